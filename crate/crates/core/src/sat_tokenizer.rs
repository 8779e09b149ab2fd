//! Variational tokenizer for one satellite instrument.

use std::rc::Rc;

use eo1_autograd::nn::{normal_init, Block, LayerNorm, Linear, TokenMask};
use eo1_autograd::optim::AdamW;
use eo1_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::geo::{area_downsample, erode_mask, sliding_windows, BinaryMask, GridSpec};
use crate::synth::SwathFrame;
use crate::tokens::{patchify, TokenField};
use crate::train::{check_finite, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatTokenizerConfig {
    pub patch: usize,
    pub channels: usize,
    pub latent_mult: usize,
    /// Sub-image size in cells.
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub beta: f64,
    pub binarize_thresh: f64,
    pub erosion_radius: i64,
    pub seed: u64,
}

impl SatTokenizerConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            patch: 4,
            channels,
            latent_mult: 4,
            rows: 16,
            cols: 16,
            depth: 2,
            width: 64,
            heads: 4,
            mlp_ratio: 2,
            beta: 1e-6,
            binarize_thresh: 0.5,
            erosion_radius: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || !self.rows.is_multiple_of(p) || !self.cols.is_multiple_of(p) || self.rows == 0 || self.cols == 0 {
            return Err(invalid(format!("patch {p} must divide the {}x{} sub-image", self.rows, self.cols)));
        }
        if self.channels == 0 || self.latent_mult == 0 {
            return Err(invalid("channels and latent_mult must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("beta must be >= 0"));
        }
        if self.depth == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(invalid("width must be a positive multiple of heads"));
        }
        if self.erosion_radius < 0 {
            return Err(invalid("erosion radius must be >= 0"));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.latent_mult * self.channels
    }

    pub fn lattice(&self) -> (usize, usize) {
        (self.rows / self.patch, self.cols / self.patch)
    }
}

/// Decoder from a token lattice to a `[C, H, W]` image; shared by the
/// satellite tokenizer and the product inversion head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDecoderConfig {
    pub token_dim: usize,
    pub out_channels: usize,
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone)]
pub struct TokenDecoder {
    pub cfg: TokenDecoderConfig,
    fill: ParamId,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl TokenDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: TokenDecoderConfig, rng: &mut R) -> Self {
        let n = cfg.h * cfg.w;
        let fill = store.add(format!("{name}.fill"), normal_init(rng, &[cfg.token_dim], 0.02));
        let embed = Linear::new(store, &format!("{name}.embed"), cfg.token_dim, cfg.width, rng);
        let pos = store.add(format!("{name}.pos"), normal_init(rng, &[n, cfg.width], 0.02));
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("{name}.blk{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.width);
        let out = cfg.out_channels * cfg.patch * cfg.patch;
        let head = Linear::new(store, &format!("{name}.head"), cfg.width, out, rng);
        Self { cfg, fill, embed, pos, blocks, norm, head }
    }

    /// `tokens: [n, token_dim]` → image `[C, H, W]`. Positions with
    /// `valid = false` are replaced by the fill embedding and excluded as
    /// attention keys.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, tokens: Var, valid: &[bool]) -> Var {
        let c = &self.cfg;
        let n = c.h * c.w;
        assert_eq!(valid.len(), n, "validity length");
        let d = c.token_dim;
        let mut gate = Vec::with_capacity(n * d);
        for &v in valid {
            gate.extend(std::iter::repeat_n(if v { 1.0 } else { 0.0 }, d));
        }
        let inv = gate.iter().map(|g| 1.0 - g).collect();
        let kept = t.mul_const(tokens, Tensor::new(&[n, d], gate).expect("gate"));
        let fill = t.param(s, self.fill);
        let fill = t.broadcast_rows(fill, n);
        let fill = t.mul_const(fill, Tensor::new(&[n, d], inv).expect("gate"));
        let x = t.add(kept, fill);
        let x = self.embed.forward(t, s, x);
        let pos = t.param(s, self.pos);
        let mut x = t.add(x, pos);
        let mask = TokenMask::new(valid.to_vec());
        let full = mask.count() == n;
        for b in &self.blocks {
            x = b.forward(t, s, x, if full { None } else { Some(&mask) });
        }
        let x = self.norm.forward(t, s, x);
        let y = self.head.forward(t, s, x);
        let p = c.patch;
        let y = t.reshape(y, &[c.h, c.w, c.out_channels, p, p]);
        let y = t.permute(y, &[2, 0, 3, 1, 4]);
        t.reshape(y, &[c.out_channels, c.h * p, c.w * p])
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

/// Tape handles for one encoded sub-image.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub tokens: Var,
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Debug, Clone)]
pub struct SatTokenizer {
    pub cfg: SatTokenizerConfig,
    pub store: ParamStore,
    enc: Encoder,
    pub decoder: TokenDecoder,
}

/// Token-level attention mask: area fraction of observed cells ≥ threshold.
pub fn attention_mask(mask: &BinaryMask, p: usize, thresh: f64) -> Result<BinaryMask> {
    Ok(area_downsample(mask, p)?.binarize(thresh))
}

/// Selected tokens: the attention mask eroded by `radius`.
pub fn selection_mask(mask: &BinaryMask, p: usize, thresh: f64, radius: i64) -> Result<BinaryMask> {
    erode_mask(&attention_mask(mask, p, thresh)?, radius)
}

/// `m_rec`: pixel expansion of the token selection, intersected with the cell mask.
pub fn reconstruction_mask(selection: &BinaryMask, mask: &BinaryMask, p: usize) -> BinaryMask {
    selection.upsample(p).and(mask)
}

/// KL(N(mu, e^logvar) ‖ N(0, I)) summed over elements and divided by the token count.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> f64 {
    let n = mu.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return 0.0;
    }
    let s: f64 = mu.data().iter().zip(logvar.data()).map(|(m, l)| m * m + l.exp() - 1.0 - l).sum();
    0.5 * s / n as f64
}

/// VAE objective on the tape. `x, xhat: [C, H, W]`; `mu, logvar: [n_tok, D]`.
pub fn vae_loss_on_tape(
    t: &mut Tape,
    x: &Tensor,
    xhat: Var,
    m_rec: &BinaryMask,
    mu: Var,
    logvar: Var,
    beta: f64,
) -> Var {
    let shape = x.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(t.shape(xhat), &shape[..], "reconstruction shape");
    assert_eq!((m_rec.height(), m_rec.width()), (h, w), "m_rec shape");
    let count = m_rec.count_ones();
    let mut loss = t.constant(Tensor::scalar(0.0));
    if count > 0 {
        let mut gate = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            gate.extend(m_rec.data().iter().map(|&v| v as f64));
        }
        let xv = t.constant(x.clone());
        let diff = t.sub(xhat, xv);
        let diff = t.abs(diff);
        let diff = t.mul_const(diff, Tensor::new(&shape, gate).expect("gate"));
        let s = t.sum(diff);
        loss = t.scale(s, 1.0 / (count * c) as f64);
    }
    let n_tok = t.shape(mu)[0];
    if n_tok > 0 && beta > 0.0 {
        let numel = t.value(mu).numel() as f64;
        let m2 = t.square(mu);
        let e = t.exp(logvar);
        let a = t.add(m2, e);
        let a = t.sub(a, logvar);
        let s = t.sum(a);
        let one = t.constant(Tensor::scalar(numel));
        let s = t.sub(s, one);
        let kl = t.scale(s, 0.5 * beta / n_tok as f64);
        loss = t.add(loss, kl);
    }
    loss
}

/// Value form of [`vae_loss_on_tape`].
pub fn vae_loss(x: &Tensor, xhat: &Tensor, m_rec: &BinaryMask, mu: &Tensor, logvar: &Tensor, beta: f64) -> Result<f64> {
    if x.shape() != xhat.shape() || x.ndim() != 3 || mu.shape() != logvar.shape() || mu.ndim() != 2 {
        return Err(invalid("vae_loss: shape mismatch"));
    }
    if m_rec.height() != x.shape()[1] || m_rec.width() != x.shape()[2] {
        return Err(invalid("vae_loss: m_rec shape mismatch"));
    }
    let mut t = Tape::new();
    let xh = t.constant(xhat.clone());
    let m = t.constant(mu.clone());
    let l = t.constant(logvar.clone());
    let loss = vae_loss_on_tape(&mut t, x, xh, m_rec, m, l, beta);
    Ok(t.value(loss).item())
}

/// One training window: a sub-image and its token selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SatSample {
    pub frame: SwathFrame,
    pub selection: BinaryMask,
}

impl SatSample {
    pub fn m_rec(&self, p: usize) -> BinaryMask {
        reconstruction_mask(&self.selection, &self.frame.mask, p)
    }

    pub fn target(&self) -> Tensor {
        let f = &self.frame;
        Tensor::from_f32(&[f.channels, f.rows, f.cols], &f.values).expect("frame shape")
    }
}

impl SatTokenizer {
    pub fn new(cfg: SatTokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (h, w) = cfg.lattice();
        let p = cfg.patch;
        let din = (cfg.channels + 1) * p * p;
        let enc = Encoder {
            embed: Linear::new(&mut store, "enc.embed", din, cfg.width, &mut rng),
            pos: store.add("enc.pos", normal_init(&mut rng, &[h * w, cfg.width], 0.02)),
            blocks: (0..cfg.depth)
                .map(|i| Block::new(&mut store, &format!("enc.blk{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, &mut rng))
                .collect(),
            norm: LayerNorm::new(&mut store, "enc.norm", cfg.width),
            head: Linear::new(&mut store, "enc.head", cfg.width, 2 * cfg.token_dim(), &mut rng),
        };
        let decoder = TokenDecoder::new(
            &mut store,
            "dec",
            TokenDecoderConfig {
                token_dim: cfg.token_dim(),
                out_channels: cfg.channels,
                h,
                w,
                patch: p,
                width: cfg.width,
                depth: cfg.depth,
                heads: cfg.heads,
                mlp_ratio: cfg.mlp_ratio,
            },
            &mut rng,
        );
        Ok(Self { cfg, store, enc, decoder })
    }

    fn check_frame(&self, f: &SwathFrame) -> Result<()> {
        if f.channels != self.cfg.channels || f.rows != self.cfg.rows || f.cols != self.cfg.cols {
            return Err(invalid(format!(
                "frame {}x{}x{} does not match tokenizer {}x{}x{}",
                f.channels, f.rows, f.cols, self.cfg.channels, self.cfg.rows, self.cfg.cols
            )));
        }
        Ok(())
    }

    pub fn selection(&self, mask: &BinaryMask) -> Result<BinaryMask> {
        selection_mask(mask, self.cfg.patch, self.cfg.binarize_thresh, self.cfg.erosion_radius)
    }

    /// Encoder on the tape. With `noise`, tokens are reparameterised samples.
    pub fn encode_on_tape(&self, t: &mut Tape, f: &SwathFrame, noise: Option<&mut ChaCha8Rng>) -> Result<EncodedVars> {
        self.check_frame(f)?;
        let cfg = &self.cfg;
        let (c, h, w, p) = (cfg.channels, cfg.rows, cfg.cols, cfg.patch);
        let mut input = Vec::with_capacity((c + 1) * h * w);
        for k in 0..c * h * w {
            let m = f.mask.data()[k % (h * w)] as f64;
            input.push(f.values[k] as f64 * m);
        }
        input.extend(f.mask.data().iter().map(|&v| v as f64));
        let patches = t.constant(patchify(&input, c + 1, h, w, p));
        let attn = attention_mask(&f.mask, p, cfg.binarize_thresh)?;
        let tmask = TokenMask::new(attn.data().iter().map(|&v| v == 1).collect());
        let x = self.enc.embed.forward(t, &self.store, patches);
        let pos = t.param(&self.store, self.enc.pos);
        let mut x = t.add(x, pos);
        for b in &self.enc.blocks {
            x = b.forward(t, &self.store, x, Some(&tmask));
        }
        let x = self.enc.norm.forward(t, &self.store, x);
        let y = self.enc.head.forward(t, &self.store, x);
        let d = cfg.token_dim();
        let mu = t.narrow(y, 1, 0, d);
        let logvar = t.narrow(y, 1, d, d);
        let tokens = match noise {
            Some(rng) => {
                let n = t.shape(mu)[0];
                let eps: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
                let half = t.scale(logvar, 0.5);
                let std = t.exp(half);
                let z = t.mul_const(std, Tensor::new(&[n, d], eps)?);
                t.add(mu, z)
            }
            None => mu,
        };
        Ok(EncodedVars { tokens, mu, logvar })
    }

    /// Encodes with an externally supplied token selection.
    pub fn encode_with_selection(&self, f: &SwathFrame, selection: &BinaryMask) -> Result<TokenField> {
        let (h, w) = self.cfg.lattice();
        if selection.height() != h || selection.width() != w {
            return Err(invalid("selection mask does not match the token lattice"));
        }
        let mut t = Tape::new();
        let e = self.encode_on_tape(&mut t, f, None)?;
        let mu = t.value(e.mu).data().to_vec();
        let logvar = t.value(e.logvar).data().to_vec();
        let mut tf = TokenField::new(self.cfg.token_dim(), h, w, mu.clone(), selection.clone(), f.bbox, f.time)?;
        tf.mu = Some(mu);
        tf.logvar = Some(logvar);
        Ok(tf)
    }

    /// Inference encoding of one sub-image; tokens are the posterior means.
    pub fn encode(&self, f: &SwathFrame) -> Result<TokenField> {
        self.check_frame(f)?;
        let sel = self.selection(&f.mask)?;
        self.encode_with_selection(f, &sel)
    }

    pub fn decode(&self, tf: &TokenField) -> Result<Tensor> {
        let (h, w) = self.cfg.lattice();
        if tf.h != h || tf.w != w || tf.dim != self.cfg.token_dim() {
            return Err(invalid("token field does not match the tokenizer lattice"));
        }
        let mut t = Tape::new();
        let z = t.constant(tf.as_tensor());
        let valid: Vec<bool> = tf.valid.data().iter().map(|&v| v == 1).collect();
        let y = self.decoder.forward(&mut t, &self.store, z, &valid);
        Ok(t.value(y).clone())
    }

    /// Tokenizes a whole swath frame window by window. Selection uses the
    /// erosion of the full frame's attention mask so that window seams are
    /// not treated as swath edges.
    pub fn tokenize_swath(&self, frame: &SwathFrame) -> Result<TokenField> {
        let p = self.cfg.patch;
        if !frame.rows.is_multiple_of(self.cfg.rows) || !frame.cols.is_multiple_of(self.cfg.cols) {
            return Err(invalid("swath frame must tile into sub-images"));
        }
        let sel = self.selection(&frame.mask)?;
        let grid = GridSpec::new(frame.bbox, frame.rows, frame.cols)?;
        let (th, tw) = (frame.rows / p, frame.cols / p);
        let d = self.cfg.token_dim();
        let mut out = TokenField::empty(d, th, tw, frame.bbox, frame.time);
        out.valid = sel.clone();
        let mut mu_all = vec![0.0; th * tw * d];
        let mut lv_all = vec![0.0; th * tw * d];
        for win in sliding_windows(&grid, (self.cfg.rows, self.cfg.cols), self.cfg.rows)? {
            let sub = frame.crop(&win)?;
            let (r0, c0) = (win.row0 / p, win.col0 / p);
            let (lh, lw) = self.cfg.lattice();
            let local_sel = sel.crop(r0, c0, lh, lw);
            let tf = self.encode_with_selection(&sub, &local_sel)?;
            let (mu, lv) = (tf.mu.as_ref().expect("mu"), tf.logvar.as_ref().expect("logvar"));
            for i in 0..lh {
                for j in 0..lw {
                    let src = (i * lw + j) * d;
                    let dst = ((r0 + i) * tw + c0 + j) * d;
                    out.tokens[dst..dst + d].copy_from_slice(&tf.tokens[src..src + d]);
                    mu_all[dst..dst + d].copy_from_slice(&mu[src..src + d]);
                    lv_all[dst..dst + d].copy_from_slice(&lv[src..src + d]);
                }
            }
        }
        out.mu = Some(mu_all);
        out.logvar = Some(lv_all);
        Ok(out)
    }

    /// Sub-image windows of a swath frame with at least `min_valid` selected tokens.
    pub fn samples_from_frame(&self, frame: &SwathFrame, min_valid: usize) -> Result<Vec<SatSample>> {
        let p = self.cfg.patch;
        let sel = self.selection(&frame.mask)?;
        let grid = GridSpec::new(frame.bbox, frame.rows, frame.cols)?;
        let (lh, lw) = self.cfg.lattice();
        let mut out = Vec::new();
        for win in sliding_windows(&grid, (self.cfg.rows, self.cfg.cols), self.cfg.rows)? {
            let s = sel.crop(win.row0 / p, win.col0 / p, lh, lw);
            if s.count_ones() >= min_valid.max(1) {
                out.push(SatSample { frame: frame.crop(&win)?, selection: s });
            }
        }
        Ok(out)
    }

    /// Loss of one sample on the tape.
    pub fn sample_loss(&self, t: &mut Tape, s: &SatSample, noise: Option<&mut ChaCha8Rng>, beta: f64) -> Result<Var> {
        let e = self.encode_on_tape(t, &s.frame, noise)?;
        let valid: Vec<bool> = s.selection.data().iter().map(|&v| v == 1).collect();
        let xhat = self.decoder.forward(t, &self.store, e.tokens, &valid);
        let idx: Vec<Option<usize>> = valid.iter().enumerate().filter(|(_, v)| **v).map(|(k, _)| Some(k)).collect();
        let idx = Rc::new(idx);
        let mu = t.gather_rows(e.mu, idx.clone());
        let lv = t.gather_rows(e.logvar, idx);
        Ok(vae_loss_on_tape(t, &s.target(), xhat, &s.m_rec(self.cfg.patch), mu, lv, beta))
    }

    /// Inference-mode masked L1 of one sample (reconstruction term only).
    pub fn masked_l1(&self, s: &SatSample) -> Result<f64> {
        let mut t = Tape::new();
        let loss = self.sample_loss(&mut t, s, None, 0.0)?;
        Ok(t.value(loss).item())
    }

    pub fn mean_masked_l1(&self, samples: &[SatSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(invalid("no samples"));
        }
        let mut acc = 0.0;
        for s in samples {
            acc += self.masked_l1(s)?;
        }
        Ok(acc / samples.len() as f64)
    }

    pub fn checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint::new("sat-tokenizer", serde_json::to_value(&self.cfg)?, step).with_store("sat", &self.store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "sat-tokenizer" {
            return Err(Error::Integrity(format!("expected a sat-tokenizer checkpoint, found '{}'", ck.kind)));
        }
        let cfg: SatTokenizerConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = Self::new(cfg)?;
        ck.load_store("sat", &mut m.store)?;
        Ok(m)
    }
}

/// Result of a tokenizer training run.
#[derive(Debug, Clone)]
pub struct SatTraining {
    pub model: SatTokenizer,
    /// Mean batch loss per step.
    pub trace: Vec<f64>,
}

pub fn train_sat_tokenizer(
    samples: &[SatSample],
    cfg: &SatTokenizerConfig,
    train: &TrainConfig,
) -> Result<SatTraining> {
    let model = SatTokenizer::new(cfg.clone())?;
    continue_sat_training(model, samples, train)
}

pub fn continue_sat_training(
    mut model: SatTokenizer,
    samples: &[SatSample],
    train: &TrainConfig,
) -> Result<SatTraining> {
    if samples.is_empty() {
        return Err(invalid("no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = AdamW::new(train.adamw());
    let batch = train.batch.max(1);
    let mut trace = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let picks: Vec<&SatSample> = if batch >= samples.len() {
            samples.iter().collect()
        } else {
            samples.choose_multiple(&mut rng, batch).collect()
        };
        let mut t = Tape::new();
        let mut total = t.constant(Tensor::scalar(0.0));
        for s in &picks {
            let l = model.sample_loss(&mut t, s, Some(&mut rng), model.cfg.beta)?;
            total = t.add(total, l);
        }
        let loss = t.scale(total, 1.0 / picks.len() as f64);
        let v = t.value(loss).item();
        check_finite("sat tokenizer", step, v)?;
        trace.push(v);
        let g = t.backward(loss);
        opt.step_with_lr(&mut [&mut model.store], &g, train.lr_at(step));
    }
    Ok(SatTraining { model, trace })
}

//! Latent-space forecasting, autoregressive rollout and product inversion.

use eo1_autograd::nn::{normal_init, Block, LayerNorm, Linear};
use eo1_autograd::optim::AdamW;
use eo1_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::fusion::{FusionCorpus, FusionModel};
use crate::geo::{sliding_windows, BBox, BinaryMask, GridSpec, Window};
use crate::sat_tokenizer::{SatTokenizer, TokenDecoder, TokenDecoderConfig};
use crate::synth::{Dataset, Dims, ProductField, ProductSeries, SwathFrame, SwathSeries};
use crate::tokens::TokenField;
use crate::train::{check_finite, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredLossMode {
    /// `Σ‖z̃ − ẑ‖² / ((n+1)·h·w)` with plain sums over slots and channels.
    Strict,
    /// Same, with each modality's error further averaged over time and channels.
    Averaged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Time slots per input/output window.
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Token dimension per modality.
    pub dims: Vec<usize>,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub loss_mode: PredLossMode,
    pub seed: u64,
}

impl ForecastConfig {
    pub fn new(dims: Vec<usize>) -> Self {
        Self {
            t: 2,
            h: 16,
            w: 32,
            dims,
            patch: 2,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            loss_mode: PredLossMode::Averaged,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(invalid("forecast T, h and w must be >= 1"));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(invalid("forecast needs at least one modality with non-zero token dim"));
        }
        if self.patch == 0 || !self.h.is_multiple_of(self.patch) || !self.w.is_multiple_of(self.patch) {
            return Err(invalid(format!("lattice {}x{} not divisible by patch {}", self.h, self.w, self.patch)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid("dim must be a multiple of heads"));
        }
        Ok(())
    }
}

/// Fused per-modality tokens over `t` consecutive slots on the global lattice.
/// `data[m]` is laid out `[position][slot][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentWindow {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub dims: Vec<usize>,
    /// First time step covered.
    pub start: usize,
    pub data: Vec<Vec<f64>>,
    /// `present[m][position·t + slot]`.
    pub present: Vec<Vec<bool>>,
}

impl LatentWindow {
    pub fn complete(t: usize, h: usize, w: usize, dims: Vec<usize>, start: usize, data: Vec<Vec<f64>>) -> Result<Self> {
        let present = dims.iter().map(|_| vec![true; h * w * t]).collect();
        let win = Self { t, h, w, dims, start, data, present };
        win.check_shape()?;
        Ok(win)
    }

    fn check_shape(&self) -> Result<()> {
        if self.data.len() != self.dims.len() || self.present.len() != self.dims.len() {
            return Err(invalid("latent window modality count mismatch"));
        }
        for (m, d) in self.dims.iter().enumerate() {
            if self.data[m].len() != self.h * self.w * self.t * d || self.present[m].len() != self.h * self.w * self.t {
                return Err(invalid(format!("latent window modality {m} has the wrong size")));
            }
        }
        Ok(())
    }

    /// Shape plus completeness: every position present and finite.
    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        if self.present.iter().flatten().any(|p| !p) {
            return Err(invalid("latent window has missing positions"));
        }
        if self.data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("latent window has non-finite tokens"));
        }
        Ok(())
    }

    pub fn n_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn token(&self, m: usize, slot: usize, pos: usize) -> &[f64] {
        let d = self.dims[m];
        let k = (pos * self.t + slot) * d;
        &self.data[m][k..k + d]
    }

    pub fn tensor(&self, m: usize) -> Tensor {
        Tensor::new(&[self.h * self.w, self.t * self.dims[m]], self.data[m].clone()).expect("checked shape")
    }

    pub fn same_shape(&self, other: &LatentWindow) -> bool {
        self.t == other.t && self.h == other.h && self.w == other.w && self.dims == other.dims
    }

    /// Token field of one slot, all modalities concatenated along channels.
    pub fn state(&self, slot: usize, bbox: BBox, time: f64) -> Result<TokenField> {
        let total: usize = self.dims.iter().sum();
        let n = self.h * self.w;
        let mut tokens = Vec::with_capacity(n * total);
        for pos in 0..n {
            for m in 0..self.n_modalities() {
                tokens.extend_from_slice(self.token(m, slot, pos));
            }
        }
        TokenField::new(total, self.h, self.w, tokens, BinaryMask::ones(self.h, self.w), bbox, time)
    }
}

/// Prediction loss: squared error summed over modalities, positions and slots,
/// divided by the modality count and the lattice size.
pub fn pred_loss(truth: &LatentWindow, pred: &LatentWindow, mode: PredLossMode) -> Result<f64> {
    if !truth.same_shape(pred) {
        return Err(invalid("pred_loss: window shapes differ"));
    }
    let mut t = Tape::new();
    let preds: Vec<Var> = (0..pred.n_modalities()).map(|m| t.constant(pred.tensor(m))).collect();
    let l = pred_loss_on_tape(&mut t, truth, &preds, mode);
    Ok(t.value(l).item())
}

pub fn pred_loss_on_tape(t: &mut Tape, truth: &LatentWindow, preds: &[Var], mode: PredLossMode) -> Var {
    let hw = (truth.h * truth.w) as f64;
    let n1 = truth.n_modalities() as f64;
    let mut acc: Option<Var> = None;
    for (m, &p) in preds.iter().enumerate() {
        let z = t.constant(truth.tensor(m));
        let d = t.sub(p, z);
        let sq = t.square(d);
        let s = t.sum(sq);
        let s = match mode {
            PredLossMode::Strict => s,
            PredLossMode::Averaged => t.scale(s, 1.0 / (truth.t * truth.dims[m]) as f64),
        };
        acc = Some(match acc {
            Some(a) => t.add(a, s),
            None => s,
        });
    }
    let acc = acc.expect("at least one modality");
    t.scale(acc, 1.0 / (n1 * hw))
}

/// Averaged-mode prediction loss between two windows: the token MSE used for skill.
pub fn token_mse(a: &LatentWindow, b: &LatentWindow) -> Result<f64> {
    pred_loss(a, b, PredLossMode::Averaged)
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub cfg: ForecastConfig,
    pub store: ParamStore,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    heads: Vec<Linear>,
}

impl ForecastModel {
    pub fn new(cfg: ForecastConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let pp = cfg.patch * cfg.patch;
        let cin: usize = cfg.dims.iter().sum::<usize>() * cfg.t * pp;
        let n = (cfg.h / cfg.patch) * (cfg.w / cfg.patch);
        let embed = Linear::new(s, "embed", cin, cfg.dim, r);
        let pos = s.add("pos", normal_init(r, &[n, cfg.dim], 0.02));
        let blocks =
            (0..cfg.depth).map(|i| Block::new(s, &format!("blk{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, r)).collect();
        let norm = LayerNorm::new(s, "norm", cfg.dim);
        // zero heads: an untrained model is the persistence forecast
        let heads = cfg
            .dims
            .iter()
            .enumerate()
            .map(|(m, d)| Linear::zeros(s, &format!("head{m}"), cfg.dim, d * cfg.t * pp))
            .collect();
        Ok(Self { cfg, store, embed, pos, blocks, norm, heads })
    }

    fn check(&self, win: &LatentWindow) -> Result<()> {
        win.validate()?;
        let c = &self.cfg;
        if win.t != c.t || win.h != c.h || win.w != c.w || win.dims != c.dims {
            return Err(invalid("latent window does not match the forecast configuration"));
        }
        Ok(())
    }

    /// `inputs[m]: [h·w, t·D_m]` → next-window predictions of the same shapes.
    /// Heads predict the change relative to the input window.
    pub fn forward_on_tape(&self, t: &mut Tape, inputs: &[Var]) -> Vec<Var> {
        let c = &self.cfg;
        let s = &self.store;
        let p = c.patch;
        let (gh, gw) = (c.h / p, c.w / p);
        let x = t.concat(inputs, 1);
        let ch = t.shape(x)[1];
        let x = t.reshape(x, &[gh, p, gw, p, ch]);
        let x = t.permute(x, &[0, 2, 1, 3, 4]);
        let x = t.reshape(x, &[gh * gw, p * p * ch]);
        let x = self.embed.forward(t, s, x);
        let pos = t.param(s, self.pos);
        let mut x = t.add(x, pos);
        for b in &self.blocks {
            x = b.forward(t, s, x, None);
        }
        let x = self.norm.forward(t, s, x);
        let mut outs = Vec::with_capacity(c.dims.len());
        for (m, head) in self.heads.iter().enumerate() {
            let k = c.t * c.dims[m];
            let y = head.forward(t, s, x);
            let y = t.reshape(y, &[gh, gw, p, p, k]);
            let y = t.permute(y, &[0, 2, 1, 3, 4]);
            let y = t.reshape(y, &[c.h * c.w, k]);
            outs.push(t.add(inputs[m], y));
        }
        outs
    }

    pub fn forecast(&self, win: &LatentWindow) -> Result<LatentWindow> {
        self.check(win)?;
        let mut t = Tape::new();
        let inputs: Vec<Var> = (0..win.n_modalities()).map(|m| t.constant(win.tensor(m))).collect();
        let outs = self.forward_on_tape(&mut t, &inputs);
        let data = outs.iter().map(|v| t.value(*v).data().to_vec()).collect();
        LatentWindow::complete(win.t, win.h, win.w, win.dims.clone(), win.start + win.t, data)
    }

    /// Feeds each output back in; returns `steps` successive windows.
    pub fn rollout(&self, win: &LatentWindow, steps: usize) -> Result<Vec<LatentWindow>> {
        let mut out = Vec::with_capacity(steps);
        let mut cur = win.clone();
        for _ in 0..steps {
            cur = self.forecast(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint::new("forecast", serde_json::to_value(&self.cfg)?, step).with_store("forecast", &self.store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "forecast" {
            return Err(Error::Integrity(format!("expected a forecast checkpoint, found '{}'", ck.kind)));
        }
        let mut m = Self::new(serde_json::from_value(ck.config.clone())?)?;
        ck.load_store("forecast", &mut m.store)?;
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Consecutive `(input, target)` window pairs.
pub fn transition_pairs(series: &[LatentWindow]) -> Vec<(LatentWindow, LatentWindow)> {
    series.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}

#[derive(Debug, Clone)]
pub struct ForecastTraining {
    pub model: ForecastModel,
    pub trace: Vec<f64>,
}

pub fn train_forecast(
    mut model: ForecastModel,
    pairs: &[(LatentWindow, LatentWindow)],
    tr: &TrainConfig,
) -> Result<ForecastTraining> {
    if pairs.is_empty() {
        return Err(invalid("no forecast training pairs"));
    }
    for (a, b) in pairs {
        model.check(a)?;
        model.check(b)?;
    }
    let mode = model.cfg.loss_mode;
    let mut rng = ChaCha8Rng::seed_from_u64(tr.seed);
    let mut opt = AdamW::new(tr.adamw());
    let batch = tr.batch.max(1).min(pairs.len());
    let mut trace = Vec::with_capacity(tr.steps);
    for step in 0..tr.steps {
        let picks: Vec<usize> = if batch == pairs.len() {
            (0..pairs.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, pairs.len(), batch).into_vec()
        };
        let mut t = Tape::new();
        let mut acc: Option<Var> = None;
        for &k in &picks {
            let (x, y) = &pairs[k];
            let inputs: Vec<Var> = (0..x.n_modalities()).map(|m| t.constant(x.tensor(m))).collect();
            let outs = model.forward_on_tape(&mut t, &inputs);
            let l = pred_loss_on_tape(&mut t, y, &outs, mode);
            acc = Some(match acc {
                Some(a) => t.add(a, l),
                None => l,
            });
        }
        let loss = t.scale(acc.expect("non-empty batch"), 1.0 / picks.len() as f64);
        let v = t.value(loss).item();
        check_finite("forecast", step, v)?;
        trace.push(v);
        let g = t.backward(loss);
        opt.step_with_lr(&mut [&mut model.store], &g, tr.lr_at(step));
    }
    Ok(ForecastTraining { model, trace })
}

/// Mean token MSE of the model and of persistence over `pairs`.
pub fn skill_vs_persistence(model: &ForecastModel, pairs: &[(LatentWindow, LatentWindow)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(invalid("no evaluation pairs"));
    }
    let (mut fm, mut pm) = (0.0, 0.0);
    for (x, y) in pairs {
        fm += token_mse(y, &model.forecast(x)?)?;
        pm += token_mse(y, &LatentWindow { start: y.start, ..x.clone() })?;
    }
    let n = pairs.len() as f64;
    Ok((fm / n, pm / n))
}

/// Averages overlapping per-window outputs into a `[channels, rows, cols]` mosaic.
/// `parts` hold `(window, values [channels, window.rows, window.cols])`.
pub fn stitch_mean(parts: &[(Window, Vec<f64>)], channels: usize, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; channels * rows * cols];
    let mut cnt = vec![0usize; rows * cols];
    for (w, v) in parts {
        if v.len() != channels * w.rows * w.cols || w.row0 + w.rows > rows || w.col0 + w.cols > cols {
            return Err(invalid("stitch: window does not fit the mosaic"));
        }
        for i in 0..w.rows {
            for j in 0..w.cols {
                let g = (w.row0 + i) * cols + w.col0 + j;
                cnt[g] += 1;
                for c in 0..channels {
                    sum[c * rows * cols + g] += v[(c * w.rows + i) * w.cols + j];
                }
            }
        }
    }
    if cnt.contains(&0) {
        return Err(invalid("stitch: mosaic has uncovered cells"));
    }
    for c in 0..channels {
        for g in 0..rows * cols {
            sum[c * rows * cols + g] /= cnt[g] as f64;
        }
    }
    Ok(sum)
}

/// MMAE completion of every sliding window for the time window starting at
/// `start`, stitched onto the global lattice.
pub fn latent_window(fm: &FusionModel, corpus: &FusionCorpus, start: usize) -> Result<LatentWindow> {
    let cfg = &fm.mmae.cfg;
    let (h, w) = corpus.token_lattice;
    let tw = cfg.t_w;
    let dims: Vec<usize> = cfg.modalities.iter().map(|m| m.token_dim).collect();
    let mut parts: Vec<Vec<(Window, Vec<f64>)>> = vec![Vec::new(); dims.len()];
    for (wi, win) in corpus.windows.iter().enumerate() {
        let out = fm.complete_window(corpus, wi, start)?;
        for (m, slots) in out.iter().enumerate() {
            let d = dims[m];
            let n = win.rows * win.cols;
            // channel-major [t·d, rows, cols] for stitching
            let mut v = vec![0.0; tw * d * n];
            for (s, vals) in slots.iter().enumerate() {
                for pos in 0..n {
                    for c in 0..d {
                        v[(s * d + c) * n + pos] = vals[pos * d + c];
                    }
                }
            }
            parts[m].push((*win, v));
        }
    }
    let mut data = Vec::with_capacity(dims.len());
    for (m, d) in dims.iter().enumerate() {
        let k = tw * d;
        let mosaic = stitch_mean(&parts[m], k, h, w)?;
        let mut row = vec![0.0; h * w * k];
        for pos in 0..h * w {
            for c in 0..k {
                row[pos * k + c] = mosaic[c * h * w + pos];
            }
        }
        data.push(row);
    }
    LatentWindow::complete(tw, h, w, dims, start, data)
}

/// Latent windows on non-overlapping time windows covering the corpus.
pub fn latent_series(fm: &FusionModel, corpus: &FusionCorpus) -> Result<Vec<LatentWindow>> {
    let tw = fm.mmae.cfg.t_w;
    (0..corpus.steps / tw).map(|k| latent_window(fm, corpus, k * tw)).collect()
}

/// Decodes each satellite modality of a window to observation space with its
/// frozen tokenizer decoder. `decoders[m]` is `Some` for satellite modalities.
pub fn decode_forecast_to_obs(
    win: &LatentWindow,
    decoders: &[Option<(&str, &SatTokenizer)>],
    dt_hours: f64,
) -> Result<Vec<SwathSeries>> {
    if decoders.len() != win.n_modalities() {
        return Err(invalid("one decoder slot per modality is required"));
    }
    let mut out = Vec::new();
    for (m, dec) in decoders.iter().enumerate() {
        let Some((id, tok)) = dec else { continue };
        let tc = &tok.cfg;
        if tc.token_dim() != win.dims[m] {
            return Err(invalid(format!("decoder for '{id}' expects token dim {}", tc.token_dim())));
        }
        let p = tc.patch;
        let (rows, cols) = (win.h * p, win.w * p);
        let grid = GridSpec::global(win.h, win.w);
        let wins = sliding_windows(&grid, tc.lattice(), tc.lattice().0.min(tc.lattice().1))?;
        let mut frames = Vec::with_capacity(win.t);
        for slot in 0..win.t {
            let mut parts = Vec::with_capacity(wins.len());
            for tw in &wins {
                let mut tokens = Vec::with_capacity(tw.rows * tw.cols * win.dims[m]);
                for i in 0..tw.rows {
                    for j in 0..tw.cols {
                        tokens.extend_from_slice(win.token(m, slot, (tw.row0 + i) * win.w + tw.col0 + j));
                    }
                }
                let tf = TokenField::new(
                    win.dims[m],
                    tw.rows,
                    tw.cols,
                    tokens,
                    BinaryMask::ones(tw.rows, tw.cols),
                    tw.bbox,
                    0.0,
                )?;
                let img = tok.decode(&tf)?;
                let pw = Window {
                    row0: tw.row0 * p,
                    col0: tw.col0 * p,
                    rows: tw.rows * p,
                    cols: tw.cols * p,
                    bbox: tw.bbox,
                };
                parts.push((pw, img.into_data()));
            }
            let mosaic = stitch_mean(&parts, tc.channels, rows, cols)?;
            let step = win.start + slot;
            frames.push(SwathFrame {
                instrument_id: id.to_string(),
                step,
                time: step as f64 * dt_hours,
                bbox: BBox::global(),
                channels: tc.channels,
                rows,
                cols,
                values: mosaic.iter().map(|&v| v as f32).collect(),
                mask: BinaryMask::ones(rows, cols),
                coverage: 1.0,
                node_lon: None,
            });
        }
        out.push(SwathSeries { instrument_id: id.to_string(), channels: tc.channels, frames });
    }
    Ok(out)
}

/// A container dataset holding forecast fields.
pub fn forecast_dataset(
    seed: u64,
    dims: Dims,
    lead_time_hours: f64,
    swaths: Vec<SwathSeries>,
    products: Vec<ProductSeries>,
) -> Dataset {
    Dataset {
        seed,
        dims,
        forecast: true,
        lead_time_hours: Some(lead_time_hours),
        swaths,
        stations: Vec::new(),
        products,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub decoder: TokenDecoderConfig,
    /// Token-lattice stride of the region sliding window.
    pub stride: usize,
    pub seed: u64,
}

impl InversionConfig {
    pub fn new(token_dim: usize) -> Self {
        Self {
            decoder: TokenDecoderConfig {
                token_dim,
                out_channels: 1,
                h: 4,
                w: 4,
                patch: 4,
                width: 32,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
            },
            stride: 2,
            seed: 0,
        }
    }
}

/// One inversion training pair: a token window and the product on its pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionSample {
    pub tokens: TokenField,
    pub target: ProductField,
}

#[derive(Debug, Clone)]
pub struct Inverter {
    pub cfg: InversionConfig,
    pub store: ParamStore,
    pub decoder: TokenDecoder,
}

impl Inverter {
    pub fn new(cfg: InversionConfig) -> Result<Self> {
        let d = &cfg.decoder;
        if d.out_channels != 1 || d.h == 0 || d.w == 0 || d.patch == 0 || cfg.stride == 0 {
            return Err(invalid("inversion decoder needs one output channel and positive dims"));
        }
        if d.heads == 0 || !d.width.is_multiple_of(d.heads) {
            return Err(invalid("inversion width must be a multiple of heads"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let decoder = TokenDecoder::new(&mut store, "inv", d.clone(), &mut rng);
        Ok(Self { cfg, store, decoder })
    }

    fn check_window(&self, tf: &TokenField) -> Result<()> {
        let d = &self.cfg.decoder;
        if tf.h != d.h || tf.w != d.w || tf.dim != d.token_dim {
            return Err(invalid("token window does not match the inversion decoder"));
        }
        Ok(())
    }

    /// Product estimate `[1, h·p, w·p]` for one token window.
    pub fn invert_window(&self, tf: &TokenField) -> Result<Tensor> {
        self.check_window(tf)?;
        let mut t = Tape::new();
        let z = t.constant(tf.as_tensor());
        let valid: Vec<bool> = tf.valid.data().iter().map(|&v| v == 1).collect();
        let y = self.decoder.forward(&mut t, &self.store, z, &valid);
        Ok(t.value(y).clone())
    }

    /// Region sliding-window inversion of a token field, overlaps averaged.
    pub fn invert(&self, tokens: &TokenField, product_id: &str, step: usize, time: f64) -> Result<ProductField> {
        let d = &self.cfg.decoder;
        let p = d.patch;
        let grid = GridSpec::new(tokens.bbox, tokens.h, tokens.w)?;
        let wins = sliding_windows(&grid, (d.h, d.w), self.cfg.stride)?;
        let mut parts = Vec::with_capacity(wins.len());
        for w in &wins {
            let tf = tokens.crop(w.row0, w.col0, w.rows, w.cols, w.bbox);
            let y = self.invert_window(&tf)?;
            let pw = Window { row0: w.row0 * p, col0: w.col0 * p, rows: w.rows * p, cols: w.cols * p, bbox: w.bbox };
            parts.push((pw, y.into_data()));
        }
        let (rows, cols) = (tokens.h * p, tokens.w * p);
        let mosaic = stitch_mean(&parts, 1, rows, cols)?;
        Ok(ProductField {
            product_id: product_id.to_string(),
            step,
            time,
            bbox: tokens.bbox,
            rows,
            cols,
            values: mosaic.iter().map(|&v| v as f32).collect(),
        })
    }

    /// Masked L1 of one sample on the tape; finite target pixels are supervised.
    pub fn sample_loss(&self, t: &mut Tape, s: &InversionSample) -> Result<Var> {
        self.check_window(&s.tokens)?;
        let d = &self.cfg.decoder;
        let (rows, cols) = (d.h * d.patch, d.w * d.patch);
        if s.target.rows != rows || s.target.cols != cols {
            return Err(invalid("product window does not match the decoder output"));
        }
        let z = t.constant(s.tokens.as_tensor());
        let valid: Vec<bool> = s.tokens.valid.data().iter().map(|&v| v == 1).collect();
        let y = self.decoder.forward(t, &self.store, z, &valid);
        let gate: Vec<f64> = s.target.values.iter().map(|v| if v.is_finite() { 1.0 } else { 0.0 }).collect();
        let n = gate.iter().sum::<f64>();
        let target: Vec<f64> = s.target.values.iter().map(|&v| if v.is_finite() { v as f64 } else { 0.0 }).collect();
        let tv = t.constant(Tensor::new(&[1, rows, cols], target)?);
        let diff = t.sub(y, tv);
        let a = t.abs(diff);
        let a = t.mul_const(a, Tensor::new(&[1, rows, cols], gate)?);
        let sum = t.sum(a);
        Ok(t.scale(sum, 1.0 / n.max(1.0)))
    }

    pub fn checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint::new("inversion", serde_json::to_value(&self.cfg)?, step).with_store("inv", &self.store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "inversion" {
            return Err(Error::Integrity(format!("expected an inversion checkpoint, found '{}'", ck.kind)));
        }
        let mut m = Self::new(serde_json::from_value(ck.config.clone())?)?;
        ck.load_store("inv", &mut m.store)?;
        Ok(m)
    }
}

/// Token/product window pairs for every latent state slot and region window.
pub fn inversion_samples(
    series: &[LatentWindow],
    products: &ProductSeries,
    cfg: &InversionConfig,
) -> Result<Vec<InversionSample>> {
    let d = &cfg.decoder;
    let mut out = Vec::new();
    for win in series {
        let grid = GridSpec::global(win.h, win.w);
        let wins = sliding_windows(&grid, (d.h, d.w), cfg.stride)?;
        for slot in 0..win.t {
            let step = win.start + slot;
            let Some(prod) = products.fields.iter().find(|f| f.step == step) else { continue };
            if prod.rows != win.h * d.patch || prod.cols != win.w * d.patch {
                return Err(invalid("product grid does not match the token lattice"));
            }
            let state = win.state(slot, BBox::global(), prod.time)?;
            for w in &wins {
                let pw = Window {
                    row0: w.row0 * d.patch,
                    col0: w.col0 * d.patch,
                    rows: w.rows * d.patch,
                    cols: w.cols * d.patch,
                    bbox: w.bbox,
                };
                out.push(InversionSample {
                    tokens: state.crop(w.row0, w.col0, w.rows, w.cols, w.bbox),
                    target: prod.crop(&pw),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct InversionTraining {
    pub model: Inverter,
    pub trace: Vec<f64>,
}

pub fn train_inverter(mut model: Inverter, samples: &[InversionSample], tr: &TrainConfig) -> Result<InversionTraining> {
    if samples.is_empty() {
        return Err(invalid("no inversion samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tr.seed);
    let mut opt = AdamW::new(tr.adamw());
    let batch = tr.batch.max(1).min(samples.len());
    let mut trace = Vec::with_capacity(tr.steps);
    for step in 0..tr.steps {
        let picks: Vec<usize> = if batch == samples.len() {
            (0..samples.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, samples.len(), batch).into_vec()
        };
        let mut t = Tape::new();
        let mut acc: Option<Var> = None;
        for &k in &picks {
            let l = model.sample_loss(&mut t, &samples[k])?;
            acc = Some(match acc {
                Some(a) => t.add(a, l),
                None => l,
            });
        }
        let loss = t.scale(acc.expect("non-empty batch"), 1.0 / picks.len() as f64);
        let v = t.value(loss).item();
        check_finite("inversion", step, v)?;
        trace.push(v);
        let g = t.backward(loss);
        opt.step_with_lr(&mut [&mut model.store], &g, tr.lr_at(step));
    }
    Ok(InversionTraining { model, trace })
}

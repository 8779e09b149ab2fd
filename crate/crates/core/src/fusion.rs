//! Multimodal masked autoencoder over per-modality token lattices.

use std::path::Path;

use eo1_autograd::nn::{normal_init, Block, LayerNorm, Linear};
use eo1_autograd::optim::AdamW;
use eo1_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{invalid, Error, Result};
use crate::geo::{sliding_windows, BBox, GridSpec, Window};
use crate::insitu_tokenizer::{insitu_joint_loss_on_tape, EncoderInput, InSituConfig, InSituTokenizer, MetaQuery};
use crate::sat_tokenizer::SatTokenizer;
use crate::seed::derive_seed;
use crate::synth::{Dataset, StationSet};
use crate::tokens::TokenField;
use crate::train::{check_finite, write_trace, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalityKind {
    Satellite,
    InSitu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub id: String,
    pub kind: ModalityKind,
    pub token_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub modalities: Vec<ModalitySpec>,
    pub fusion_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    /// Time slots per 12-hour window.
    pub t_w: usize,
    /// Token lattice of one sliding window.
    pub lattice: (usize, usize),
    pub seed: u64,
}

impl FusionConfig {
    pub fn new(modalities: Vec<ModalitySpec>) -> Self {
        Self {
            modalities,
            fusion_dim: 48,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            mask_ratio: 0.6,
            t_w: 2,
            lattice: (4, 4),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(invalid("fusion needs at least one modality"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(invalid(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.t_w == 0 || self.lattice.0 == 0 || self.lattice.1 == 0 {
            return Err(invalid("t_w and lattice dims must be >= 1"));
        }
        if self.heads == 0 || !self.fusion_dim.is_multiple_of(self.heads) {
            return Err(invalid("fusion_dim must be a multiple of heads"));
        }
        if self.modalities.iter().filter(|m| m.kind == ModalityKind::InSitu).count() > 1 {
            return Err(invalid("at most one in-situ modality is supported"));
        }
        Ok(())
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn positions(&self) -> usize {
        self.lattice.0 * self.lattice.1
    }

    pub fn insitu_index(&self) -> Option<usize> {
        self.modalities.iter().position(|m| m.kind == ModalityKind::InSitu)
    }
}

/// Per-modality, per-slot token fields for one window; `None` marks a
/// modality/slot without data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub bbox: BBox,
    pub window_times: Vec<f64>,
    pub fields: Vec<Vec<Option<TokenField>>>,
}

impl ModalityBundle {
    pub fn observed(&self, m: usize, slot: usize, positions: usize) -> Vec<bool> {
        match &self.fields[m][slot] {
            Some(f) => f.valid.data().iter().map(|&v| v == 1).collect(),
            None => vec![false; positions],
        }
    }

    /// A modality is present when any slot has at least one valid token.
    pub fn present(&self, m: usize) -> bool {
        self.fields[m].iter().flatten().any(|f| f.n_valid() > 0)
    }
}

/// Sampled mask `[modality][slot][position]`; `true` = withheld.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub masked: Vec<Vec<Vec<bool>>>,
}

impl MaskPattern {
    pub fn none(cfg: &FusionConfig) -> Self {
        Self { masked: vec![vec![vec![false; cfg.positions()]; cfg.t_w]; cfg.n_modalities()] }
    }

    /// Independent Bernoulli(`ratio`) per position.
    pub fn sample<R: Rng + ?Sized>(cfg: &FusionConfig, ratio: f64, rng: &mut R) -> Self {
        let masked = (0..cfg.n_modalities())
            .map(|_| (0..cfg.t_w).map(|_| (0..cfg.positions()).map(|_| rng.random_bool(ratio)).collect()).collect())
            .collect();
        Self { masked }
    }
}

/// Which positions carry real tokens, which carry domain tokens, and which
/// are reconstruction targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembly {
    /// Modality is part of the sequence.
    pub include: Vec<bool>,
    pub domain: Vec<Vec<Vec<bool>>>,
    /// Masked and observed: supervised positions.
    pub targets: Vec<Vec<Vec<bool>>>,
}

impl Assembly {
    /// `observed[m][slot][i]`; absent modalities are excluded unless
    /// `include_absent` (inference queries for every modality).
    pub fn plan(observed: &[Vec<Vec<bool>>], mask: &MaskPattern, include_absent: bool) -> Self {
        let include: Vec<bool> = observed.iter().map(|o| include_absent || o.iter().flatten().any(|v| *v)).collect();
        let mut domain = Vec::new();
        let mut targets = Vec::new();
        for (m, om) in observed.iter().enumerate() {
            let mut dm = Vec::new();
            let mut tm = Vec::new();
            for (s, os) in om.iter().enumerate() {
                let mk = &mask.masked[m][s];
                dm.push(os.iter().zip(mk).map(|(o, k)| !o || *k).collect());
                tm.push(os.iter().zip(mk).map(|(o, k)| *o && *k && include[m]).collect());
            }
            domain.push(dm);
            targets.push(tm);
        }
        Self { include, domain, targets }
    }

    pub fn n_domain(&self) -> usize {
        self.domain
            .iter()
            .zip(&self.include)
            .filter(|(_, inc)| **inc)
            .map(|(d, _)| d.iter().flatten().filter(|v| **v).count())
            .sum()
    }

    /// Supervised positions of modality `m`, flattened slot-major.
    pub fn target_rows(&self, m: usize) -> Vec<bool> {
        self.targets[m].iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone)]
struct Projector {
    lin: Linear,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Mmae {
    pub cfg: FusionConfig,
    pub store: ParamStore,
    proj: Vec<Projector>,
    domain: Vec<ParamId>,
    mod_emb: ParamId,
    slot_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    heads: Vec<Linear>,
}

impl Mmae {
    pub fn new(cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let f = cfg.fusion_dim;
        let proj = cfg
            .modalities
            .iter()
            .map(|m| Projector {
                lin: Linear::new(s, &format!("proj.{}", m.id), m.token_dim, f, r),
                norm: LayerNorm::new(s, &format!("proj.{}.norm", m.id), f),
            })
            .collect();
        let domain =
            cfg.modalities.iter().map(|m| s.add(format!("domain.{}", m.id), normal_init(r, &[f], 0.5))).collect();
        let mod_emb = s.add("emb.modality", normal_init(r, &[cfg.n_modalities(), f], 0.02));
        let slot_emb = s.add("emb.slot", normal_init(r, &[cfg.t_w, f], 0.02));
        let pos_emb = s.add("emb.pos", normal_init(r, &[cfg.positions(), f], 0.02));
        let blocks =
            (0..cfg.depth).map(|i| Block::new(s, &format!("blk{i}"), f, cfg.heads, cfg.mlp_ratio, r)).collect();
        let norm = LayerNorm::new(s, "norm", f);
        let heads =
            cfg.modalities.iter().map(|m| Linear::new(s, &format!("head.{}", m.id), f, m.token_dim, r)).collect();
        Ok(Self { cfg, store, proj, domain, mod_emb, slot_emb, pos_emb, blocks, norm, heads })
    }

    /// Modality projector followed by that modality's normalisation.
    pub fn project_modality(&self, t: &mut Tape, m: usize, tokens: Var) -> Var {
        let p = &self.proj[m];
        let x = p.lin.forward(t, &self.store, tokens);
        p.norm.forward(t, &self.store, x)
    }

    fn row(&self, t: &mut Tape, id: ParamId, r: usize, n: usize) -> Var {
        let p = t.param(&self.store, id);
        let row = t.narrow(p, 0, r, 1);
        let row = t.reshape(row, &[self.cfg.fusion_dim]);
        t.broadcast_rows(row, n)
    }

    /// Token sequence over included modalities × slots × positions.
    /// `tokens[m][slot]` are `[positions, token_dim]` tape values.
    pub fn assemble_input(&self, t: &mut Tape, tokens: &[Vec<Option<Var>>], asm: &Assembly) -> Result<Var> {
        let n = self.cfg.positions();
        let f = self.cfg.fusion_dim;
        let mut parts = Vec::new();
        for m in 0..self.cfg.n_modalities() {
            if !asm.include[m] {
                continue;
            }
            for slot in 0..self.cfg.t_w {
                let dom = t.param(&self.store, self.domain[m]);
                let dom = t.broadcast_rows(dom, n);
                let dmask = &asm.domain[m][slot];
                let x = match tokens[m][slot] {
                    Some(v) if dmask.iter().any(|d| !d) => {
                        let p = self.project_modality(t, m, v);
                        let mut keep = Vec::with_capacity(n * f);
                        for &d in dmask {
                            keep.extend(std::iter::repeat_n(if d { 0.0 } else { 1.0 }, f));
                        }
                        let fill = keep.iter().map(|k| 1.0 - k).collect();
                        let p = t.mul_const(p, Tensor::new(&[n, f], keep)?);
                        let d = t.mul_const(dom, Tensor::new(&[n, f], fill)?);
                        t.add(p, d)
                    }
                    _ => dom,
                };
                let pos = t.param(&self.store, self.pos_emb);
                let x = t.add(x, pos);
                let se = self.row(t, self.slot_emb, slot, n);
                let x = t.add(x, se);
                let me = self.row(t, self.mod_emb, m, n);
                parts.push(t.add(x, me));
            }
        }
        if parts.is_empty() {
            return Err(invalid("no modality included in the sequence"));
        }
        Ok(t.concat(&parts, 0))
    }

    /// Joint transformer; returns `[t_w·positions, token_dim]` per included modality.
    pub fn forward(&self, t: &mut Tape, seq: Var, asm: &Assembly) -> Vec<Option<Var>> {
        let mut x = seq;
        for b in &self.blocks {
            x = b.forward(t, &self.store, x, None);
        }
        let x = self.norm.forward(t, &self.store, x);
        let rows = self.cfg.t_w * self.cfg.positions();
        let mut off = 0;
        let mut out = Vec::with_capacity(self.cfg.n_modalities());
        for m in 0..self.cfg.n_modalities() {
            if asm.include[m] {
                let xm = t.narrow(x, 0, off, rows);
                out.push(Some(self.heads[m].forward(t, &self.store, xm)));
                off += rows;
            } else {
                out.push(None);
            }
        }
        out
    }

    /// Inference: every modality is queried; observed tokens are all shown.
    pub fn complete(&self, bundle: &ModalityBundle) -> Result<Vec<Vec<Vec<f64>>>> {
        let n = self.cfg.positions();
        let observed: Vec<Vec<Vec<bool>>> = (0..self.cfg.n_modalities())
            .map(|m| (0..self.cfg.t_w).map(|s| bundle.observed(m, s, n)).collect())
            .collect();
        let asm = Assembly::plan(&observed, &MaskPattern::none(&self.cfg), true);
        let mut t = Tape::new();
        let tokens = constant_tokens(&mut t, bundle);
        let seq = self.assemble_input(&mut t, &tokens, &asm)?;
        let out = self.forward(&mut t, seq, &asm);
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(m, v)| {
                let d = self.cfg.modalities[m].token_dim;
                let v = t.value(v.expect("all modalities included")).data().to_vec();
                v.chunks(n * d).map(|c| c.to_vec()).collect()
            })
            .collect())
    }

    pub fn n_params(&self) -> usize {
        self.store.num_scalars()
    }
}

fn constant_tokens(t: &mut Tape, bundle: &ModalityBundle) -> Vec<Vec<Option<Var>>> {
    bundle.fields.iter().map(|fs| fs.iter().map(|f| f.as_ref().map(|f| t.constant(f.as_tensor()))).collect()).collect()
}

/// Per-modality reconstruction term: rows are supervised where `targets` is true.
pub struct ReconTerm<'a> {
    pub target: &'a Tensor,
    pub pred: &'a Tensor,
    pub rows: &'a [bool],
}

/// `(1/n_present) Σ_m (1/|M_m|) Σ_{i∈M_m} ‖ẑ_i − z_i‖²`, skipping empty `M_m`.
pub fn mmae_recon_loss(terms: &[ReconTerm]) -> Result<f64> {
    let mut t = Tape::new();
    let mut vars = Vec::new();
    for term in terms {
        if term.target.shape() != term.pred.shape() || term.target.shape()[0] != term.rows.len() {
            return Err(invalid("mmae_loss: shape mismatch"));
        }
        vars.push((t.constant(term.pred.clone()), term.target, term.rows));
    }
    let l = mmae_recon_on_tape(&mut t, &vars);
    Ok(t.value(l).item())
}

pub fn mmae_recon_on_tape(t: &mut Tape, terms: &[(Var, &Tensor, &[bool])]) -> Var {
    let mut acc: Option<Var> = None;
    let mut n_present = 0usize;
    for (pred, target, rows) in terms {
        let count = rows.iter().filter(|r| **r).count();
        if count == 0 {
            continue;
        }
        n_present += 1;
        let d = target.shape()[1];
        let mut gate = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            gate.extend(std::iter::repeat_n(if r { 1.0 } else { 0.0 }, d));
        }
        let tv = t.constant((*target).clone());
        let diff = t.sub(*pred, tv);
        let sq = t.square(diff);
        let sq = t.mul_const(sq, Tensor::new(target.shape(), gate).expect("gate"));
        let s = t.sum(sq);
        let term = t.scale(s, 1.0 / count as f64);
        acc = Some(match acc {
            Some(a) => t.add(a, term),
            None => term,
        });
    }
    match acc {
        Some(a) => t.scale(a, 1.0 / n_present as f64),
        None => t.constant(Tensor::scalar(0.0)),
    }
}

/// Global token fields and station sets that MMAE windows are cut from.
#[derive(Debug, Clone)]
pub struct FusionCorpus {
    pub modalities: Vec<ModalitySpec>,
    /// `[satellite modality][step]`, whole-swath token fields.
    pub sat_tokens: Vec<Vec<TokenField>>,
    pub stations: Vec<StationSet>,
    pub station_channels: usize,
    /// Token-resolution sliding windows over the global lattice.
    pub windows: Vec<Window>,
    pub steps: usize,
    pub dt_hours: f64,
    pub token_lattice: (usize, usize),
}

impl FusionCorpus {
    /// Tokenizes every swath frame with its frozen tokenizer.
    pub fn build(
        ds: &Dataset,
        tokenizers: &[(&str, &SatTokenizer)],
        insitu_id: Option<&str>,
        insitu_token_dim: usize,
        window: usize,
    ) -> Result<Self> {
        let mut modalities = Vec::new();
        let mut sat_tokens = Vec::new();
        let mut lattice = None;
        for (id, tok) in tokenizers {
            let series = ds.swath(id).ok_or_else(|| invalid(format!("dataset has no swath modality '{id}'")))?;
            let fields = series.frames.iter().map(|f| tok.tokenize_swath(f)).collect::<Result<Vec<_>>>()?;
            if let Some(f) = fields.first() {
                lattice = Some((f.h, f.w));
            }
            modalities.push(ModalitySpec {
                id: id.to_string(),
                kind: ModalityKind::Satellite,
                token_dim: tok.cfg.token_dim(),
            });
            sat_tokens.push(fields);
        }
        let (stations, station_channels) = match insitu_id {
            Some(id) => {
                let s =
                    ds.station_series(id).ok_or_else(|| invalid(format!("dataset has no station modality '{id}'")))?;
                modalities.push(ModalitySpec {
                    id: id.to_string(),
                    kind: ModalityKind::InSitu,
                    token_dim: insitu_token_dim,
                });
                (s.sets.clone(), s.channels)
            }
            None => (Vec::new(), 0),
        };
        let token_lattice = lattice.unwrap_or((ds.dims.rows / 4, ds.dims.cols / 4));
        let grid = GridSpec::new(BBox::global(), token_lattice.0, token_lattice.1)?;
        let windows = sliding_windows(&grid, (window, window), window)?;
        Ok(Self {
            modalities,
            sat_tokens,
            stations,
            station_channels,
            windows,
            steps: ds.dims.steps,
            dt_hours: ds.dims.dt_hours,
            token_lattice,
        })
    }

    /// Satellite part of the bundle for window `w` and first step `s0`.
    pub fn sat_bundle(&self, w: usize, s0: usize, t_w: usize) -> Result<ModalityBundle> {
        if s0 + t_w > self.steps {
            return Err(invalid(format!("time window {s0}+{t_w} exceeds {} steps", self.steps)));
        }
        let win = self.windows.get(w).ok_or_else(|| invalid(format!("window {w} out of range")))?;
        let mut fields = Vec::new();
        for spec in &self.modalities {
            match spec.kind {
                ModalityKind::Satellite => {
                    let k = fields.len();
                    let series = &self.sat_tokens[k];
                    fields.push(
                        (0..t_w)
                            .map(|s| {
                                series.get(s0 + s).map(|f| f.crop(win.row0, win.col0, win.rows, win.cols, win.bbox))
                            })
                            .collect(),
                    );
                }
                ModalityKind::InSitu => fields.push(vec![None; t_w]),
            }
        }
        Ok(ModalityBundle {
            bbox: win.bbox,
            window_times: (0..t_w).map(|s| (s0 + s) as f64 * self.dt_hours).collect(),
            fields,
        })
    }

    /// Stations of step `s` inside window `w`.
    pub fn stations_in(&self, w: usize, s: usize) -> Option<StationSet> {
        self.stations.get(s).map(|st| st.within(&self.windows[w].bbox))
    }

    /// Drops the named modality (flexible-combination check).
    pub fn without(&self, id: &str) -> Self {
        let mut c = self.clone();
        if let Some(k) = c.modalities.iter().position(|m| m.id == id) {
            if c.modalities[k].kind == ModalityKind::Satellite {
                let sat_k = c.modalities[..k].iter().filter(|m| m.kind == ModalityKind::Satellite).count();
                c.sat_tokens.remove(sat_k);
            } else {
                c.stations.clear();
            }
            c.modalities.remove(k);
        }
        c
    }
}

/// One MMAE training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub window: usize,
    pub start: usize,
}

/// Every (window, 12-h window) pair on non-overlapping time windows.
pub fn all_samples(corpus: &FusionCorpus, t_w: usize) -> Vec<WindowSample> {
    let mut out = Vec::new();
    let mut s0 = 0;
    while s0 + t_w <= corpus.steps {
        for w in 0..corpus.windows.len() {
            out.push(WindowSample { window: w, start: s0 });
        }
        s0 += t_w;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmaeTrainConfig {
    pub train: TrainConfig,
    /// Keep one mask and one station draw per sample (overfit runs).
    pub fixed_masks: bool,
}

/// Per-step losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub recon: f64,
    pub insitu: f64,
    pub total: f64,
    /// Squared gradient norm reaching the frozen satellite tokenizers.
    pub frozen_grad_sq: f64,
}

/// MMAE together with the jointly trained in-situ tokenizer.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub mmae: Mmae,
    pub insitu: Option<InSituTokenizer>,
}

/// Tape values for one sample.
pub struct SampleLoss {
    pub recon: Var,
    pub insitu: Var,
    pub total: Var,
    /// Per-modality predictions, targets and supervised rows.
    pub preds: Vec<Option<Var>>,
    pub targets: Vec<Option<Tensor>>,
    pub rows: Vec<Vec<bool>>,
}

impl FusionModel {
    pub fn new(cfg: FusionConfig, insitu: Option<InSituConfig>) -> Result<Self> {
        let has = cfg.insitu_index().is_some();
        if has != insitu.is_some() {
            return Err(invalid("in-situ config must be given exactly when an in-situ modality is configured"));
        }
        if let (Some(k), Some(ic)) = (cfg.insitu_index(), &insitu) {
            if cfg.modalities[k].token_dim != ic.token_dim
                || ic.token_side != cfg.lattice.0
                || ic.token_side != cfg.lattice.1
            {
                return Err(invalid("in-situ token shape does not match the fusion lattice"));
            }
        }
        Ok(Self { mmae: Mmae::new(cfg)?, insitu: insitu.map(InSituTokenizer::new).transpose()? })
    }

    /// Builds the loss of one sample on the tape.
    pub fn sample_loss(
        &self,
        t: &mut Tape,
        corpus: &FusionCorpus,
        sample: WindowSample,
        mask: &MaskPattern,
        station_rng: &mut ChaCha8Rng,
    ) -> Result<SampleLoss> {
        let cfg = &self.mmae.cfg;
        let n = cfg.positions();
        let mut bundle = corpus.sat_bundle(sample.window, sample.start, cfg.t_w)?;
        let mut tokens = constant_tokens(t, &bundle);
        let mut targets: Vec<Option<Tensor>> = vec![None; cfg.n_modalities()];
        let mut joint: Vec<(StationSet, usize)> = Vec::new();
        if let (Some(k), Some(tok)) = (cfg.insitu_index(), &self.insitu) {
            let mut target_rows = Vec::with_capacity(cfg.t_w * n * tok.cfg.token_dim);
            for slot in 0..cfg.t_w {
                let all = corpus.stations_in(sample.window, sample.start + slot);
                let Some(all) = all.filter(|s| !s.is_empty()) else {
                    target_rows.extend(std::iter::repeat_n(0.0, n * tok.cfg.token_dim));
                    continue;
                };
                let input = EncoderInput::sample(&all, &bundle.bbox, tok.cfg.n, station_rng);
                let target = tok.encode(&input)?;
                target_rows.extend_from_slice(&target.tokens);
                // stations in withheld cells are hidden from the encoder
                let masked = &mask.masked[k][slot];
                let keep: Vec<usize> = (0..input.stations.len())
                    .filter(|&i| !masked[tok.cell_index(&input.bbox, &input.stations.points[i])])
                    .collect();
                let visible = EncoderInput { stations: input.stations.select(&keep), bbox: input.bbox };
                let enc = tok.encode_on_tape(t, &visible)?;
                tokens[k][slot] = Some(enc.tokens);
                bundle.fields[k][slot] = Some(target);
                joint.push((all, slot));
            }
            targets[k] = Some(Tensor::new(&[cfg.t_w * n, tok.cfg.token_dim], target_rows)?);
        }
        let observed: Vec<Vec<Vec<bool>>> =
            (0..cfg.n_modalities()).map(|m| (0..cfg.t_w).map(|s| bundle.observed(m, s, n)).collect()).collect();
        let asm = Assembly::plan(&observed, mask, false);
        if !asm.include.iter().any(|v| *v) {
            let z = t.constant(Tensor::scalar(0.0));
            return Ok(SampleLoss {
                recon: z,
                insitu: z,
                total: z,
                preds: vec![None; cfg.n_modalities()],
                targets,
                rows: vec![Vec::new(); cfg.n_modalities()],
            });
        }
        let seq = self.mmae.assemble_input(t, &tokens, &asm)?;
        let out = self.mmae.forward(t, seq, &asm);
        for (m, spec) in cfg.modalities.iter().enumerate() {
            if spec.kind == ModalityKind::Satellite {
                let mut rows = Vec::with_capacity(cfg.t_w * n * spec.token_dim);
                for slot in 0..cfg.t_w {
                    match &bundle.fields[m][slot] {
                        Some(f) => rows.extend_from_slice(&f.tokens),
                        None => rows.extend(std::iter::repeat_n(0.0, n * spec.token_dim)),
                    }
                }
                targets[m] = Some(Tensor::new(&[cfg.t_w * n, spec.token_dim], rows)?);
            }
        }
        let row_masks: Vec<Vec<bool>> = (0..cfg.n_modalities()).map(|m| asm.target_rows(m)).collect();
        let terms: Vec<(Var, &Tensor, &[bool])> = (0..cfg.n_modalities())
            .filter_map(|m| out[m].map(|p| (p, targets[m].as_ref().expect("target built"), row_masks[m].as_slice())))
            .collect();
        let recon = mmae_recon_on_tape(t, &terms);

        let insitu = match (cfg.insitu_index(), &self.insitu) {
            (Some(k), Some(tok)) if out[k].is_some() && !joint.is_empty() => {
                let pred = out[k].expect("checked");
                let (mut sum, mut count) = (None, 0usize);
                for (st, slot) in &joint {
                    let rows = t.narrow(pred, 0, slot * n, n);
                    let q = MetaQuery::from_stations(st);
                    let yhat = tok.decode_on_tape(t, rows, &bundle.bbox, &q)?;
                    let y: Vec<f64> = st.values.iter().map(|&v| v as f64).collect();
                    let c = st.present.iter().filter(|p| **p).count();
                    if c == 0 {
                        continue;
                    }
                    let l = insitu_joint_loss_on_tape(t, &y, yhat, &st.present);
                    let l = t.scale(l, c as f64);
                    sum = Some(match sum {
                        Some(a) => t.add(a, l),
                        None => l,
                    });
                    count += c;
                }
                match sum {
                    Some(s) => t.scale(s, 1.0 / count as f64),
                    None => t.constant(Tensor::scalar(0.0)),
                }
            }
            _ => t.constant(Tensor::scalar(0.0)),
        };
        let total = t.add(recon, insitu);
        Ok(SampleLoss { recon, insitu, total, preds: out, targets, rows: row_masks })
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![&mut self.mmae.store];
        if let Some(tok) = &mut self.insitu {
            v.push(&mut tok.store);
        }
        v
    }

    /// Mean loss over `samples` with fixed per-sample masks and station draws.
    pub fn evaluate(
        &self,
        corpus: &FusionCorpus,
        samples: &[WindowSample],
        mask_ratio: f64,
        seed: u64,
    ) -> Result<LossRow> {
        if samples.is_empty() {
            return Err(invalid("no samples to evaluate"));
        }
        let (mut r, mut i, mut tot) = (0.0, 0.0, 0.0);
        for (k, s) in samples.iter().enumerate() {
            let (mask, mut srng) = fixed_draw(&self.mmae.cfg, mask_ratio, seed, k);
            let mut t = Tape::new();
            let l = self.sample_loss(&mut t, corpus, *s, &mask, &mut srng)?;
            r += t.value(l.recon).item();
            i += t.value(l.insitu).item();
            tot += t.value(l.total).item();
        }
        let n = samples.len() as f64;
        Ok(LossRow { recon: r / n, insitu: i / n, total: tot / n, frozen_grad_sq: 0.0 })
    }

    /// Like [`Self::evaluate`] but in units that do not depend on the model:
    /// satellite reconstruction against frozen tokenizer targets plus the
    /// station error in observation space. In-situ token targets come from
    /// the jointly trained encoder, so they are left out.
    pub fn evaluate_fixed(
        &self,
        corpus: &FusionCorpus,
        samples: &[WindowSample],
        mask_ratio: f64,
        seed: u64,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(invalid("no samples to evaluate"));
        }
        let cfg = &self.mmae.cfg;
        let (mut sat_sum, mut st_sum) = (0.0, 0.0);
        for (k, s) in samples.iter().enumerate() {
            let (mask, mut srng) = fixed_draw(cfg, mask_ratio, seed, k);
            let mut t = Tape::new();
            let l = self.sample_loss(&mut t, corpus, *s, &mask, &mut srng)?;
            let terms: Vec<(Var, &Tensor, &[bool])> = (0..cfg.n_modalities())
                .filter(|&m| cfg.modalities[m].kind == ModalityKind::Satellite)
                .filter_map(|m| match (l.preds[m], l.targets[m].as_ref()) {
                    (Some(p), Some(tg)) => Some((p, tg, l.rows[m].as_slice())),
                    _ => None,
                })
                .collect();
            let sat = mmae_recon_on_tape(&mut t, &terms);
            sat_sum += t.value(sat).item();
            st_sum += t.value(l.insitu).item();
        }
        let n = samples.len() as f64;
        log::debug!("fixed-units validation: satellite {:.5}, stations {:.5}", sat_sum / n, st_sum / n);
        Ok((sat_sum + st_sum) / n)
    }

    pub fn checkpoint(&self, step: u64, rng: Option<&ChaCha8Rng>) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "fusion": serde_json::to_value(&self.mmae.cfg)?,
            "insitu": serde_json::to_value(self.insitu.as_ref().map(|t| &t.cfg))?,
        });
        let mut ck = Checkpoint::new("mmae", config, step).with_store("mmae", &self.mmae.store);
        if let Some(tok) = &self.insitu {
            ck = ck.with_store("insitu", &tok.store);
        }
        ck.rng = rng.map(RngState::capture);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "mmae" {
            return Err(Error::Integrity(format!("expected an mmae checkpoint, found '{}'", ck.kind)));
        }
        let cfg: FusionConfig = serde_json::from_value(ck.config["fusion"].clone())?;
        let ic: Option<InSituConfig> = serde_json::from_value(ck.config["insitu"].clone())?;
        let mut m = Self::new(cfg, ic)?;
        ck.load_store("mmae", &mut m.mmae.store)?;
        if let Some(tok) = &mut m.insitu {
            ck.load_store("insitu", &mut tok.store)?;
        }
        Ok(m)
    }

    /// Completed tokens for every modality on one window, in-situ tokens
    /// encoded from every station in the window.
    pub fn complete_window(&self, corpus: &FusionCorpus, w: usize, s0: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let bundle = self.bundle_for_inference(corpus, w, s0)?;
        self.mmae.complete(&bundle)
    }

    pub fn bundle_for_inference(&self, corpus: &FusionCorpus, w: usize, s0: usize) -> Result<ModalityBundle> {
        let cfg = &self.mmae.cfg;
        let mut bundle = corpus.sat_bundle(w, s0, cfg.t_w)?;
        if let (Some(k), Some(tok)) = (cfg.insitu_index(), &self.insitu) {
            for slot in 0..cfg.t_w {
                if let Some(st) = corpus.stations_in(w, s0 + slot).filter(|s| !s.is_empty()) {
                    bundle.fields[k][slot] = Some(tok.encode(&EncoderInput::all(&st, &bundle.bbox))?);
                }
            }
        }
        Ok(bundle)
    }
}

/// Fraction of supervised positions where the reconstruction is closer (L2)
/// to the target token than the all-domain-token prediction is.
pub fn completion_sanity(
    model: &FusionModel,
    corpus: &FusionCorpus,
    samples: &[WindowSample],
    seed: u64,
) -> Result<f64> {
    let cfg = &model.mmae.cfg;
    let empty = ModalityBundle {
        bbox: BBox::global(),
        window_times: vec![0.0; cfg.t_w],
        fields: vec![vec![None; cfg.t_w]; cfg.n_modalities()],
    };
    let baseline = model.mmae.complete(&empty)?;
    let (mut wins, mut total) = (0usize, 0usize);
    for (k, s) in samples.iter().enumerate() {
        let (mask, mut srng) = fixed_draw(cfg, cfg.mask_ratio, seed, k);
        let mut t = Tape::new();
        let l = model.sample_loss(&mut t, corpus, *s, &mask, &mut srng)?;
        for m in 0..cfg.n_modalities() {
            let (Some(p), Some(target)) = (l.preds[m], &l.targets[m]) else { continue };
            let d = cfg.modalities[m].token_dim;
            let pred = t.value(p).data();
            let base: Vec<f64> = baseline[m].concat();
            for (r, _) in l.rows[m].iter().enumerate().filter(|(_, v)| **v) {
                let z = &target.data()[r * d..(r + 1) * d];
                total += 1;
                if sq_dist(&pred[r * d..(r + 1) * d], z) < sq_dist(&base[r * d..(r + 1) * d], z) {
                    wins += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(invalid("no supervised positions to score"));
    }
    Ok(wins as f64 / total as f64)
}

/// Deterministic per-sample mask and station-sampling stream.
pub fn fixed_draw(cfg: &FusionConfig, ratio: f64, seed: u64, k: usize) -> (MaskPattern, ChaCha8Rng) {
    let mut mr = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mask", k as u64));
    let mask = MaskPattern::sample(cfg, ratio, &mut mr);
    (mask, ChaCha8Rng::seed_from_u64(derive_seed(seed, "stations", k as u64)))
}

/// Result of an MMAE run.
#[derive(Debug, Clone)]
pub struct MmaeTraining {
    pub model: FusionModel,
    pub trace: Vec<LossRow>,
}

/// Trains the MMAE and the in-situ tokenizer jointly. Satellite tokens come
/// from frozen tokenizers through `corpus`.
pub fn train_mmae(
    model: FusionModel,
    corpus: &FusionCorpus,
    samples: &[WindowSample],
    cfg: &MmaeTrainConfig,
) -> Result<MmaeTraining> {
    train_mmae_with(model, corpus, samples, cfg, &[], |_, _| Ok(false))
}

/// Training loop with a per-step hook (`step, model`) that may request an
/// early stop by returning `true`. `frozen` stores are audited for gradient.
pub fn train_mmae_with(
    mut model: FusionModel,
    corpus: &FusionCorpus,
    samples: &[WindowSample],
    cfg: &MmaeTrainConfig,
    frozen: &[&ParamStore],
    mut hook: impl FnMut(usize, &FusionModel) -> Result<bool>,
) -> Result<MmaeTraining> {
    if samples.is_empty() {
        return Err(invalid("no MMAE training samples"));
    }
    let tr = &cfg.train;
    let ratio = model.mmae.cfg.mask_ratio;
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
        let (mut r, mut i, mut tot) = (None, None, None);
        let add = |t: &mut Tape, acc: &mut Option<Var>, v: Var| {
            *acc = Some(match *acc {
                Some(a) => t.add(a, v),
                None => v,
            });
        };
        for &k in &picks {
            let (mask, mut srng) = if cfg.fixed_masks {
                fixed_draw(&model.mmae.cfg, ratio, tr.seed, k)
            } else {
                let m = MaskPattern::sample(&model.mmae.cfg, ratio, &mut rng);
                let s = ChaCha8Rng::seed_from_u64(rng.random());
                (m, s)
            };
            let l = model.sample_loss(&mut t, corpus, samples[k], &mask, &mut srng)?;
            add(&mut t, &mut r, l.recon);
            add(&mut t, &mut i, l.insitu);
            add(&mut t, &mut tot, l.total);
        }
        let inv = 1.0 / picks.len() as f64;
        let value = |t: &Tape, v: Option<Var>| v.map_or(0.0, |v| t.value(v).item() * inv);
        let (rv, iv, tv) = (value(&t, r), value(&t, i), value(&t, tot));
        check_finite("mmae", step, tv)?;
        let loss = t.scale(tot.expect("non-empty batch"), inv);
        let g = t.backward(loss);
        let frozen_grad_sq = frozen.iter().map(|s| g.store_sq_norm(s)).sum();
        trace.push(LossRow { recon: rv, insitu: iv, total: tv, frozen_grad_sq });
        let lr = tr.lr_at(step);
        opt.step_with_lr(&mut model.stores_mut(), &g, lr);
        if hook(step, &model)? {
            break;
        }
    }
    Ok(MmaeTraining { model, trace })
}

pub fn write_loss_trace(path: &Path, trace: &[LossRow]) -> Result<()> {
    let rows: Vec<Vec<f64>> = trace.iter().map(|r| vec![r.recon, r.insitu, r.total]).collect();
    write_trace(path, &["step", "recon", "insitu", "total"], &rows)
}

/// Squared L2 distance between two token vectors.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

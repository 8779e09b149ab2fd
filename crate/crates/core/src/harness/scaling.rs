//! Power-law fitting and the miniature scaling sweep.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fusion::{FusionConfig, FusionCorpus, FusionModel, MmaeTrainConfig, WindowSample};
use crate::harness::metrics::ols;
use crate::insitu_tokenizer::InSituConfig;
use crate::seed::derive_seed;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub points: Vec<(f64, f64)>,
}

impl ScalingFit {
    pub fn predict(&self, size: f64) -> f64 {
        self.a * size.powf(self.b)
    }
}

/// Least squares on `log L = log a + b·log size`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 2 {
        return Err(invalid(format!("power-law fit needs at least 2 points, got {}", points.len())));
    }
    if points.iter().any(|&(s, l)| !(s > 0.0 && l > 0.0 && s.is_finite() && l.is_finite())) {
        return Err(invalid("power-law fit needs positive finite sizes and losses"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(s, l)| (s.ln(), l.ln())).collect();
    if logs.iter().all(|p| p.0 == logs[0].0) {
        return Err(invalid("power-law fit needs at least two distinct sizes"));
    }
    let (b, ln_a) = ols(&logs);
    let my = logs.iter().map(|p| p.1).sum::<f64>() / logs.len() as f64;
    let ss_tot: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = logs.iter().map(|p| (p.1 - (ln_a + b * p.0)).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(ScalingFit { a: ln_a.exp(), b, r2, points: points.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Training-set sizes (number of window samples) for the data sweep.
    pub data_sizes: Vec<usize>,
    /// Fusion widths for the model sweep; depth and heads stay fixed.
    pub widths: Vec<usize>,
    /// Width used during the data sweep.
    pub data_width: usize,
    pub depth: usize,
    pub heads: usize,
    pub train: TrainConfig,
    /// Validation every `eval_every` steps; stop after `patience` evaluations
    /// without improvement.
    pub eval_every: usize,
    pub patience: usize,
    /// Independently seeded runs per point; the point's loss is their mean.
    pub repeats: usize,
    /// Seed of the validation masks, shared by every run so points compare.
    pub val_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            data_sizes: vec![16, 32, 64, 128],
            widths: vec![8, 16, 32, 64],
            data_width: 32,
            depth: 2,
            heads: 2,
            train: TrainConfig { steps: 800, batch: 8, lr: 1e-3, warmup: 20, ..TrainConfig::default() },
            eval_every: 20,
            patience: 8,
            repeats: 3,
            val_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: f64,
    pub params: usize,
    pub samples: usize,
    /// Mean of `runs`.
    pub best_val: f64,
    /// Best validation loss of each repeat.
    pub runs: Vec<f64>,
    pub best_step: usize,
    pub stopped_at: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub data: Vec<SweepPoint>,
    pub model: Vec<SweepPoint>,
    pub data_fit: ScalingFit,
    pub model_fit: ScalingFit,
}

/// Best validation loss of one run with patience-based early stopping. The
/// loss is measured in model-independent units so sweep points compare.
pub fn train_point(
    fusion: FusionConfig,
    insitu: Option<InSituConfig>,
    corpus: &FusionCorpus,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &SweepConfig,
) -> Result<SweepPoint> {
    let model = FusionModel::new(fusion, insitu)?;
    let params = model.mmae.n_params() + model.insitu.as_ref().map_or(0, |t| t.store.num_scalars());
    let ratio = model.mmae.cfg.mask_ratio;
    let seed = cfg.val_seed;
    let mut best = (f64::INFINITY, 0usize);
    let mut since = 0usize;
    let mut stopped = cfg.train.steps;
    let mut err = None;
    let every = cfg.eval_every.max(1);
    let tc = MmaeTrainConfig { train: cfg.train.clone(), fixed_masks: false };
    crate::fusion::train_mmae_with(model, corpus, train, &tc, &[], |step, m| {
        if (step + 1) % every != 0 && step + 1 != cfg.train.steps {
            return Ok(false);
        }
        match m.evaluate_fixed(corpus, val, ratio, seed) {
            Ok(l) => {
                if l < best.0 {
                    best = (l, step + 1);
                    since = 0;
                } else {
                    since += 1;
                }
            }
            Err(e) => {
                err = Some(e);
                return Ok(true);
            }
        }
        if since >= cfg.patience {
            stopped = step + 1;
            return Ok(true);
        }
        Ok(false)
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(SweepPoint {
        size: 0.0,
        params,
        samples: train.len(),
        best_val: best.0,
        runs: vec![best.0],
        best_step: best.1,
        stopped_at: stopped,
    })
}

/// Runs `cfg.repeats` seeded copies of one point and averages their best
/// validation losses; steps are the latest over repeats.
pub fn repeated_point(
    fusion: FusionConfig,
    insitu: Option<InSituConfig>,
    corpus: &FusionCorpus,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &SweepConfig,
) -> Result<SweepPoint> {
    let mut acc: Option<SweepPoint> = None;
    for r in 0..cfg.repeats.max(1) as u64 {
        let f = FusionConfig { seed: derive_seed(fusion.seed, "sweep-init", r), ..fusion.clone() };
        let ic = insitu.as_ref().map(|c| InSituConfig { seed: derive_seed(c.seed, "sweep-init", r), ..c.clone() });
        let mut rc = cfg.clone();
        rc.train.seed = derive_seed(cfg.train.seed, "sweep-run", r);
        let p = train_point(f, ic, corpus, train, val, &rc)?;
        acc = Some(match acc {
            None => p,
            Some(mut a) => {
                a.runs.extend(p.runs);
                a.best_step = a.best_step.max(p.best_step);
                a.stopped_at = a.stopped_at.max(p.stopped_at);
                a
            }
        });
    }
    let mut p = acc.expect("at least one repeat");
    p.best_val = p.runs.iter().sum::<f64>() / p.runs.len() as f64;
    Ok(p)
}

/// Data sweep at fixed width, then model sweep on the largest data size;
/// power laws are fitted to the best validation losses.
pub fn scaling_sweep(
    base: &FusionConfig,
    insitu: Option<&InSituConfig>,
    corpus: &FusionCorpus,
    train_pool: &[WindowSample],
    val: &[WindowSample],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if cfg.data_sizes.len() < 2 || cfg.widths.len() < 2 {
        return Err(invalid("a sweep needs at least 2 points on each axis"));
    }
    let max_d = *cfg.data_sizes.iter().max().expect("non-empty");
    if max_d > train_pool.len() {
        return Err(invalid(format!("data size {max_d} exceeds the {} available samples", train_pool.len())));
    }
    if val.is_empty() {
        return Err(invalid("the sweep needs validation samples"));
    }
    let fusion = |width: usize| FusionConfig { fusion_dim: width, depth: cfg.depth, heads: cfg.heads, ..base.clone() };
    let insitu_at = |width: usize| insitu.map(|c| InSituConfig { width: width.max(8), ..c.clone() });
    let mut data = Vec::new();
    for &d in &cfg.data_sizes {
        let mut p =
            repeated_point(fusion(cfg.data_width), insitu_at(cfg.data_width), corpus, &train_pool[..d], val, cfg)?;
        p.size = d as f64;
        log::info!("data sweep D={d}: best val {:.5} at step {}", p.best_val, p.best_step);
        data.push(p);
    }
    let mut model = Vec::new();
    for &w in &cfg.widths {
        let mut p = repeated_point(fusion(w), insitu_at(w), corpus, &train_pool[..max_d], val, cfg)?;
        p.size = p.params as f64;
        log::info!("model sweep width {w} ({} params): best val {:.5}", p.params, p.best_val);
        model.push(p);
    }
    let data_fit = fit_power_law(&data.iter().map(|p| (p.size, p.best_val)).collect::<Vec<_>>())?;
    let model_fit = fit_power_law(&model.iter().map(|p| (p.size, p.best_val)).collect::<Vec<_>>())?;
    Ok(SweepResult { data, model, data_fit, model_fit })
}

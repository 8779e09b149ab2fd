//! Run configuration parsed from `key = value` text.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Gen,
    Tok,
    Mmae,
    Forecast,
    Invert,
    Eval,
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    pub steps: usize,
    pub stations: usize,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokSection {
    pub train: TrainConfig,
    pub width: usize,
    pub depth: usize,
    /// Minimum selected tokens for a sub-image to be used in training.
    pub min_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmaeSection {
    pub train: TrainConfig,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mask_ratio: f64,
    pub insitu_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSection {
    pub train: TrainConfig,
    pub dim: usize,
    pub depth: usize,
    /// Fraction of transition pairs (earliest first) used for training.
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertSection {
    pub train: TrainConfig,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub percentiles: Vec<f64>,
    pub smooth_window: usize,
    pub elevation_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSection {
    pub data_sizes: Vec<usize>,
    pub widths: Vec<usize>,
    pub steps: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub repeats: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthSection,
    pub tok: TokSection,
    pub mmae: MmaeSection,
    pub forecast: ForecastSection,
    pub invert: InvertSection,
    pub eval: EvalSection,
    pub scale: ScaleSection,
}

fn train(steps: usize, lr: f64, batch: usize, warmup: usize) -> TrainConfig {
    TrainConfig { steps, lr, batch, warmup, ..TrainConfig::default() }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            synth: SynthSection { steps: 48, stations: 400, missing_rate: 0.1 },
            tok: TokSection { train: train(400, 2e-3, 8, 20), width: 32, depth: 2, min_tokens: 4 },
            mmae: MmaeSection {
                train: train(400, 1e-3, 8, 20),
                dim: 48,
                depth: 4,
                heads: 4,
                mask_ratio: 0.6,
                insitu_width: 32,
            },
            forecast: ForecastSection { train: train(600, 1e-3, 4, 20), dim: 64, depth: 2, train_fraction: 0.5 },
            invert: InvertSection { train: train(400, 2e-3, 8, 20), width: 32 },
            eval: EvalSection { percentiles: vec![80.0, 90.0], smooth_window: 5, elevation_bins: 4 },
            scale: ScaleSection {
                data_sizes: vec![16, 32, 64, 128],
                widths: vec![8, 16, 32, 64],
                steps: 800,
                patience: 8,
                eval_every: 20,
                repeats: 3,
                lr: 1e-3,
            },
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("bad value for '{key}': '{v}'")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "steps" => t.steps = num(key, v)?,
        "lr" => t.lr = num(key, v)?,
        "batch" => t.batch = num(key, v)?,
        "warmup" => t.warmup = num(key, v)?,
        "clip_norm" => t.clip_norm = if v == "none" { None } else { Some(num(key, v)?) },
        "weight_decay" => t.weight_decay = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| invalid(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| invalid(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let known = match section {
            "" => match field {
                "seed" => {
                    self.seed = num(key, v)?;
                    true
                }
                _ => false,
            },
            "paths" => match field {
                "data" => {
                    self.data_dir = Some(PathBuf::from(v));
                    true
                }
                _ => false,
            },
            "synth" => match field {
                "steps" => {
                    self.synth.steps = num(key, v)?;
                    true
                }
                "stations" => {
                    self.synth.stations = num(key, v)?;
                    true
                }
                "missing_rate" => {
                    self.synth.missing_rate = num(key, v)?;
                    true
                }
                _ => false,
            },
            "tok" => match field {
                "width" => {
                    self.tok.width = num(key, v)?;
                    true
                }
                "depth" => {
                    self.tok.depth = num(key, v)?;
                    true
                }
                "min_tokens" => {
                    self.tok.min_tokens = num(key, v)?;
                    true
                }
                f => set_train(&mut self.tok.train, f, key, v)?,
            },
            "mmae" => match field {
                "dim" => {
                    self.mmae.dim = num(key, v)?;
                    true
                }
                "depth" => {
                    self.mmae.depth = num(key, v)?;
                    true
                }
                "heads" => {
                    self.mmae.heads = num(key, v)?;
                    true
                }
                "mask_ratio" => {
                    self.mmae.mask_ratio = num(key, v)?;
                    true
                }
                "insitu_width" => {
                    self.mmae.insitu_width = num(key, v)?;
                    true
                }
                f => set_train(&mut self.mmae.train, f, key, v)?,
            },
            "forecast" => match field {
                "dim" => {
                    self.forecast.dim = num(key, v)?;
                    true
                }
                "depth" => {
                    self.forecast.depth = num(key, v)?;
                    true
                }
                "train_fraction" => {
                    self.forecast.train_fraction = num(key, v)?;
                    true
                }
                f => set_train(&mut self.forecast.train, f, key, v)?,
            },
            "invert" => match field {
                "width" => {
                    self.invert.width = num(key, v)?;
                    true
                }
                f => set_train(&mut self.invert.train, f, key, v)?,
            },
            "eval" => match field {
                "percentiles" => {
                    self.eval.percentiles = list(key, v)?;
                    true
                }
                "smooth_window" => {
                    self.eval.smooth_window = num(key, v)?;
                    true
                }
                "elevation_bins" => {
                    self.eval.elevation_bins = num(key, v)?;
                    true
                }
                _ => false,
            },
            "scale" => match field {
                "data_sizes" => {
                    self.scale.data_sizes = list(key, v)?;
                    true
                }
                "widths" => {
                    self.scale.widths = list(key, v)?;
                    true
                }
                "steps" => {
                    self.scale.steps = num(key, v)?;
                    true
                }
                "patience" => {
                    self.scale.patience = num(key, v)?;
                    true
                }
                "eval_every" => {
                    self.scale.eval_every = num(key, v)?;
                    true
                }
                "repeats" => {
                    self.scale.repeats = num(key, v)?;
                    true
                }
                "lr" => {
                    self.scale.lr = num(key, v)?;
                    true
                }
                _ => false,
            },
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(invalid(format!("unknown config key '{key}'")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.synth.steps < 4 || !self.synth.steps.is_multiple_of(2) {
            return Err(invalid("synth.steps must be even and >= 4"));
        }
        if !(0.0..1.0).contains(&self.synth.missing_rate) {
            return Err(invalid("synth.missing_rate must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.mmae.mask_ratio) {
            return Err(invalid("mmae.mask_ratio must be in [0, 1)"));
        }
        if !(self.forecast.train_fraction > 0.0 && self.forecast.train_fraction < 1.0) {
            return Err(invalid("forecast.train_fraction must be in (0, 1)"));
        }
        if self.eval.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(invalid("eval.percentiles must be in [0, 100]"));
        }
        if self.eval.smooth_window.is_multiple_of(2) {
            return Err(invalid("eval.smooth_window must be odd"));
        }
        for (name, t) in [
            ("tok", &self.tok.train),
            ("mmae", &self.mmae.train),
            ("forecast", &self.forecast.train),
            ("invert", &self.invert.train),
        ] {
            if t.steps == 0 || t.batch == 0 || !(t.lr > 0.0) {
                return Err(invalid(format!("{name}: steps, batch and lr must be positive")));
            }
        }
        if self.scale.steps == 0 || self.scale.repeats == 0 || !(self.scale.lr > 0.0) {
            return Err(invalid("scale: steps, repeats and lr must be positive"));
        }
        Ok(())
    }

    pub fn data_dir(&self, out: &Path) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| out.join("data"))
    }

    /// Stage-specific seed derived from the root seed.
    pub fn stage_seed(&self, tag: &str) -> u64 {
        crate::seed::derive_seed(self.seed, tag, 0)
    }
}

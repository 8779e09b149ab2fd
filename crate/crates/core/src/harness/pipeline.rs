//! Stage drivers. Every stage reads declared inputs from the output
//! directory, writes its artifacts there and records a stage manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::forecast::{
    decode_forecast_to_obs, forecast_dataset, inversion_samples, latent_series, skill_vs_persistence, train_forecast,
    train_inverter, transition_pairs, ForecastConfig, ForecastModel, InversionConfig, Inverter, LatentWindow,
};
use crate::fusion::{
    all_samples, train_mmae_with, write_loss_trace, FusionConfig, FusionCorpus, FusionModel, LossRow, MmaeTrainConfig,
    WindowSample,
};
use crate::geo::BBox;
use crate::harness::config::RunConfig;
use crate::harness::metrics::{
    elevation_regression, equal_bins, station_mae, station_rmse, threshold_skill, Contingency, MetricReport, SkillEntry,
};
use crate::harness::plots::{plot_lines, plot_scaling, plot_skill, plot_trace};
use crate::harness::scaling::{scaling_sweep, SweepConfig, SweepResult};
use crate::insitu_tokenizer::{InSituConfig, MetaQuery};
use crate::sat_tokenizer::{train_sat_tokenizer, SatTokenizer, SatTokenizerConfig};
use crate::synth::container::Manifest;
use crate::synth::{generate, read_dataset, write_dataset, Dataset, ProductSeries, SynthConfig};
use crate::tokens::TokenField;
use crate::train::{write_trace, TrainConfig};

/// Artifact locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
    pub data: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig, out: &Path) -> Self {
        Self { out: out.to_path_buf(), data: cfg.data_dir(out) }
    }

    pub fn tok_ckpt(&self, id: &str) -> PathBuf {
        self.out.join(format!("tok_{id}.ckpt"))
    }

    pub fn tok_trace(&self, id: &str) -> PathBuf {
        self.out.join(format!("tok_{id}_trace.csv"))
    }

    pub fn mmae_ckpt(&self) -> PathBuf {
        self.out.join("mmae.ckpt")
    }

    pub fn forecast_ckpt(&self) -> PathBuf {
        self.out.join("forecast.ckpt")
    }

    pub fn invert_ckpt(&self) -> PathBuf {
        self.out.join("invert.ckpt")
    }

    pub fn trace(&self, stage: &str) -> PathBuf {
        self.out.join(format!("{stage}_trace.csv"))
    }

    pub fn report(&self) -> PathBuf {
        self.out.join("report.json")
    }

    pub fn scaling(&self) -> PathBuf {
        self.out.join("scaling.json")
    }

    pub fn forecast_container(&self) -> PathBuf {
        self.out.join("forecast")
    }

    pub fn plots(&self) -> PathBuf {
        self.out.join("plots")
    }

    pub fn stage_manifest(&self, stage: &str) -> PathBuf {
        self.out.join(format!("stage_{stage}.json"))
    }
}

/// Record of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn require(paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(invalid(format!("missing stage input {}", p.display())));
        }
    }
    Ok(())
}

fn record(l: &Layout, cfg: &RunConfig, stage: &str, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<()> {
    let m = StageManifest { stage: stage.into(), seed: cfg.seed, config: cfg.clone(), inputs, outputs };
    std::fs::write(l.stage_manifest(stage), serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    let mut s = SynthConfig::default();
    s.truth.seed = cfg.seed;
    s.truth.steps = cfg.synth.steps;
    s.n_stations = cfg.synth.stations;
    s.missing_rate = cfg.synth.missing_rate;
    s
}

/// Time windows used for training: the first `n_train + 1` windows, so the
/// first `n_train` transition pairs are training pairs.
pub fn split(cfg: &RunConfig, t_w: usize) -> (usize, usize) {
    let k = cfg.synth.steps / t_w;
    let n_train = (((k - 1) as f64) * cfg.forecast.train_fraction).round().max(1.0) as usize;
    (n_train, (n_train + 1) * t_w)
}

const T_W: usize = 2;

pub fn run_gen(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let l = Layout::new(cfg, out);
    std::fs::create_dir_all(&l.out)?;
    let (_, ds) = generate(&synth_config(cfg))?;
    let m = write_dataset(&l.data, &ds)?;
    record(&l, cfg, "gen", vec![], vec![l.data.clone()])?;
    Ok(m)
}

fn tokenizer_config(cfg: &RunConfig, id: &str, channels: usize) -> SatTokenizerConfig {
    let base = SatTokenizerConfig::new(channels);
    SatTokenizerConfig {
        width: cfg.tok.width,
        depth: cfg.tok.depth,
        heads: if cfg.tok.width.is_multiple_of(4) { 4 } else { 2 },
        // LEO swaths are too narrow at toy resolution to survive erosion
        erosion_radius: if id.starts_with("leo") { 0 } else { base.erosion_radius },
        seed: crate::seed::derive_seed(cfg.seed, "tok-init", id.len() as u64 + id.bytes().map(u64::from).sum::<u64>()),
        ..base
    }
}

/// Trains one tokenizer per swath instrument on the training time range.
pub fn run_tok(cfg: &RunConfig, out: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let l = Layout::new(cfg, out);
    require(std::slice::from_ref(&l.data))?;
    let ds = read_dataset(&l.data)?;
    let (_, train_steps) = split(cfg, T_W);
    let mut traces = Vec::new();
    let mut outputs = Vec::new();
    for s in &ds.swaths {
        let tc = tokenizer_config(cfg, &s.instrument_id, s.channels);
        let probe = SatTokenizer::new(tc.clone())?;
        let mut samples = Vec::new();
        for f in s.frames.iter().filter(|f| f.step < train_steps) {
            samples.extend(probe.samples_from_frame(f, cfg.tok.min_tokens)?);
        }
        if samples.is_empty() {
            return Err(invalid(format!("no training sub-images for '{}'", s.instrument_id)));
        }
        let tr = TrainConfig { seed: cfg.stage_seed(&format!("tok-{}", s.instrument_id)), ..cfg.tok.train.clone() };
        let run = train_sat_tokenizer(&samples, &tc, &tr)?;
        run.model.checkpoint(tr.steps as u64)?.save(&l.tok_ckpt(&s.instrument_id))?;
        let rows: Vec<Vec<f64>> = run.trace.iter().map(|v| vec![*v]).collect();
        write_trace(&l.tok_trace(&s.instrument_id), &["step", "loss"], &rows)?;
        log::info!(
            "tokenizer {}: {} samples, loss {:.4} -> {:.4}",
            s.instrument_id,
            samples.len(),
            run.trace[0],
            run.trace[run.trace.len() - 1]
        );
        outputs.push(l.tok_ckpt(&s.instrument_id));
        outputs.push(l.tok_trace(&s.instrument_id));
        traces.push((s.instrument_id.clone(), run.trace));
    }
    record(&l, cfg, "tok", vec![l.data.clone()], outputs)?;
    Ok(traces)
}

fn load_tokenizers(l: &Layout, ds: &Dataset) -> Result<Vec<(String, SatTokenizer)>> {
    ds.swaths
        .iter()
        .map(|s| {
            let tok = SatTokenizer::from_checkpoint(&Checkpoint::load(&l.tok_ckpt(&s.instrument_id))?)?;
            Ok((s.instrument_id.clone(), tok))
        })
        .collect()
}

fn tok_inputs(l: &Layout, ds: &Dataset) -> Vec<PathBuf> {
    ds.swaths.iter().map(|s| l.tok_ckpt(&s.instrument_id)).collect()
}

fn insitu_config(cfg: &RunConfig, channels: usize) -> InSituConfig {
    InSituConfig { width: cfg.mmae.insitu_width, seed: cfg.stage_seed("insitu-init"), ..InSituConfig::new(channels) }
}

/// Dataset, frozen tokenizers and the fusion corpus built from them.
pub struct Loaded {
    pub ds: Dataset,
    pub tokenizers: Vec<(String, SatTokenizer)>,
    pub corpus: FusionCorpus,
}

pub fn load_corpus(cfg: &RunConfig, l: &Layout) -> Result<Loaded> {
    let ds = read_dataset(&l.data)?;
    let tokenizers = load_tokenizers(l, &ds)?;
    let pairs: Vec<(&str, &SatTokenizer)> = tokenizers.iter().map(|(id, t)| (id.as_str(), t)).collect();
    let insitu = ds.stations.first().map(|s| s.id.clone());
    let token_dim = InSituConfig::new(1).token_dim;
    let corpus = FusionCorpus::build(&ds, &pairs, insitu.as_deref(), token_dim, 4)?;
    let _ = cfg;
    Ok(Loaded { ds, tokenizers, corpus })
}

fn fusion_config(cfg: &RunConfig, corpus: &FusionCorpus) -> FusionConfig {
    FusionConfig {
        fusion_dim: cfg.mmae.dim,
        depth: cfg.mmae.depth,
        heads: cfg.mmae.heads,
        mask_ratio: cfg.mmae.mask_ratio,
        t_w: T_W,
        seed: cfg.stage_seed("mmae-init"),
        ..FusionConfig::new(corpus.modalities.clone())
    }
}

fn new_fusion_model(cfg: &RunConfig, corpus: &FusionCorpus) -> Result<FusionModel> {
    let ic = (!corpus.stations.is_empty()).then(|| insitu_config(cfg, corpus.station_channels));
    FusionModel::new(fusion_config(cfg, corpus), ic)
}

fn train_samples(cfg: &RunConfig, corpus: &FusionCorpus) -> Vec<WindowSample> {
    let (_, train_steps) = split(cfg, T_W);
    all_samples(corpus, T_W).into_iter().filter(|s| s.start + T_W <= train_steps).collect()
}

pub fn run_mmae(cfg: &RunConfig, out: &Path) -> Result<Vec<LossRow>> {
    let l = Layout::new(cfg, out);
    let ds_inputs = {
        require(std::slice::from_ref(&l.data))?;
        let ds = read_dataset(&l.data)?;
        tok_inputs(&l, &ds)
    };
    require(&ds_inputs)?;
    let ld = load_corpus(cfg, &l)?;
    let model = new_fusion_model(cfg, &ld.corpus)?;
    let samples = train_samples(cfg, &ld.corpus);
    let tc = MmaeTrainConfig {
        train: TrainConfig { seed: cfg.stage_seed("mmae"), ..cfg.mmae.train.clone() },
        fixed_masks: false,
    };
    let frozen: Vec<&eo1_autograd::ParamStore> = ld.tokenizers.iter().map(|(_, t)| &t.store).collect();
    let run = train_mmae_with(model, &ld.corpus, &samples, &tc, &frozen, |_, _| Ok(false))?;
    run.model.checkpoint(tc.train.steps as u64, None)?.save(&l.mmae_ckpt())?;
    write_loss_trace(&l.trace("mmae"), &run.trace)?;
    let mut inputs = vec![l.data.clone()];
    inputs.extend(ds_inputs);
    record(&l, cfg, "mmae", inputs, vec![l.mmae_ckpt(), l.trace("mmae")])?;
    Ok(run.trace)
}

/// Latent windows of the whole record from the trained fusion model.
pub fn load_latents(cfg: &RunConfig, l: &Layout) -> Result<(Loaded, FusionModel, Vec<LatentWindow>)> {
    let ld = load_corpus(cfg, l)?;
    let fm = FusionModel::from_checkpoint(&Checkpoint::load(&l.mmae_ckpt())?)?;
    let series = latent_series(&fm, &ld.corpus)?;
    Ok((ld, fm, series))
}

fn forecast_config(cfg: &RunConfig, win: &LatentWindow) -> ForecastConfig {
    ForecastConfig {
        t: win.t,
        h: win.h,
        w: win.w,
        dim: cfg.forecast.dim,
        depth: cfg.forecast.depth,
        seed: cfg.stage_seed("forecast-init"),
        ..ForecastConfig::new(win.dims.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub trace: Vec<f64>,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub forecast_mse: f64,
    pub persistence_mse: f64,
}

pub fn run_forecast(cfg: &RunConfig, out: &Path) -> Result<ForecastSummary> {
    let l = Layout::new(cfg, out);
    require(&[l.data.clone(), l.mmae_ckpt()])?;
    let (ld, _, series) = load_latents(cfg, &l)?;
    let pairs = transition_pairs(&series);
    let (n_train, _) = split(cfg, T_W);
    if n_train >= pairs.len() {
        return Err(invalid("not enough time windows for a held-out forecast split"));
    }
    let model = ForecastModel::new(forecast_config(cfg, &series[0]))?;
    let tr = TrainConfig { seed: cfg.stage_seed("forecast"), ..cfg.forecast.train.clone() };
    let run = train_forecast(model, &pairs[..n_train], &tr)?;
    run.model.checkpoint(tr.steps as u64)?.save(&l.forecast_ckpt())?;
    let rows: Vec<Vec<f64>> = run.trace.iter().map(|v| vec![*v]).collect();
    write_trace(&l.trace("forecast"), &["step", "loss"], &rows)?;
    let (fm, pm) = skill_vs_persistence(&run.model, &pairs[n_train..])?;
    let mut inputs = vec![l.data.clone(), l.mmae_ckpt()];
    inputs.extend(tok_inputs(&l, &ld.ds));
    record(&l, cfg, "forecast", inputs, vec![l.forecast_ckpt(), l.trace("forecast")])?;
    Ok(ForecastSummary {
        trace: run.trace,
        train_pairs: n_train,
        test_pairs: pairs.len() - n_train,
        forecast_mse: fm,
        persistence_mse: pm,
    })
}

fn product_series(ds: &Dataset) -> Result<&ProductSeries> {
    ds.products.first().ok_or_else(|| invalid("dataset has no product series"))
}

fn inversion_config(cfg: &RunConfig, token_dim: usize) -> InversionConfig {
    let mut c = InversionConfig::new(token_dim);
    c.decoder.width = cfg.invert.width;
    c.seed = cfg.stage_seed("invert-init");
    c
}

pub fn run_invert(cfg: &RunConfig, out: &Path) -> Result<Vec<f64>> {
    let l = Layout::new(cfg, out);
    require(&[l.data.clone(), l.mmae_ckpt()])?;
    let (ld, _, series) = load_latents(cfg, &l)?;
    let (n_train, _) = split(cfg, T_W);
    let products = product_series(&ld.ds)?;
    let token_dim: usize = series[0].dims.iter().sum();
    let icfg = inversion_config(cfg, token_dim);
    let samples = inversion_samples(&series[..=n_train], products, &icfg)?;
    let tr = TrainConfig { seed: cfg.stage_seed("invert"), ..cfg.invert.train.clone() };
    let run = train_inverter(Inverter::new(icfg)?, &samples, &tr)?;
    run.model.checkpoint(tr.steps as u64)?.save(&l.invert_ckpt())?;
    let rows: Vec<Vec<f64>> = run.trace.iter().map(|v| vec![*v]).collect();
    write_trace(&l.trace("invert"), &["step", "loss"], &rows)?;
    let mut inputs = vec![l.data.clone(), l.mmae_ckpt()];
    inputs.extend(tok_inputs(&l, &ld.ds));
    record(&l, cfg, "invert", inputs, vec![l.invert_ckpt(), l.trace("invert")])?;
    Ok(run.trace)
}

/// Held-out evaluation of forecasts at stations, on products and in token space.
pub fn run_eval(cfg: &RunConfig, out: &Path) -> Result<MetricReport> {
    let l = Layout::new(cfg, out);
    require(&[l.data.clone(), l.mmae_ckpt(), l.forecast_ckpt(), l.invert_ckpt()])?;
    let (ld, fm, series) = load_latents(cfg, &l)?;
    let fc = ForecastModel::from_checkpoint(&Checkpoint::load(&l.forecast_ckpt())?)?;
    let inv = Inverter::from_checkpoint(&Checkpoint::load(&l.invert_ckpt())?)?;
    let pairs = transition_pairs(&series);
    let (n_train, _) = split(cfg, T_W);
    let test = &pairs[n_train..];
    if test.is_empty() {
        return Err(invalid("no held-out windows to evaluate"));
    }
    let (fmse, pmse) = skill_vs_persistence(&fc, test)?;
    let dt = ld.ds.dims.dt_hours;
    let products = product_series(&ld.ds)?;
    let corpus = &ld.corpus;
    let k_insitu = fm.mmae.cfg.insitu_index();
    let channels = corpus.station_channels;

    let (mut pred, mut truth, mut present) = (Vec::new(), Vec::new(), Vec::new());
    let (mut st_err, mut st_alt) = (Vec::new(), Vec::new());
    let mut tables: Vec<(f64, f64, Contingency)> = Vec::new();
    let mut first_forecast = None;
    for (x, y) in test {
        let f = fc.forecast(x)?;
        for slot in 0..f.t {
            let step = y.start + slot;
            let lead = (slot + 1) as f64 * dt;
            if let (Some(k), Some(tok)) = (k_insitu, &fm.insitu) {
                for (wi, w) in corpus.windows.iter().enumerate() {
                    let Some(st) = corpus.stations_in(wi, step).filter(|s| !s.is_empty()) else { continue };
                    let mut tokens = Vec::with_capacity(w.rows * w.cols * f.dims[k]);
                    for i in 0..w.rows {
                        for j in 0..w.cols {
                            tokens.extend_from_slice(f.token(k, slot, (w.row0 + i) * f.w + w.col0 + j));
                        }
                    }
                    let tf = TokenField::new(
                        f.dims[k],
                        w.rows,
                        w.cols,
                        tokens,
                        crate::geo::BinaryMask::ones(w.rows, w.cols),
                        w.bbox,
                        0.0,
                    )?;
                    let yhat = tok.decode_at(&tf, &MetaQuery::from_stations(&st))?;
                    for (s, row) in yhat.iter().enumerate() {
                        let (mut e, mut n) = (0.0, 0usize);
                        for c in 0..channels {
                            let kk = s * channels + c;
                            pred.push(row[c]);
                            truth.push(st.values[kk] as f64);
                            present.push(st.present[kk]);
                            if st.present[kk] {
                                e += (row[c] - st.values[kk] as f64).abs();
                                n += 1;
                            }
                        }
                        if n > 0 {
                            st_err.push(e / n as f64);
                            st_alt.push(st.points[s].alt);
                        }
                    }
                }
            }
            if let Some(p) = products.fields.iter().find(|p| p.step == step) {
                let state = f.state(slot, BBox::global(), p.time)?;
                let est = inv.invert(&state, &p.product_id, step, p.time)?;
                let a: Vec<f64> = est.values.iter().map(|&v| v as f64).collect();
                let b: Vec<f64> = p.values.iter().map(|&v| v as f64).collect();
                for &pct in &cfg.eval.percentiles {
                    let s = threshold_skill(&a, &b, p.rows, p.cols, pct, cfg.eval.smooth_window)?;
                    match tables.iter_mut().find(|t| t.0 == lead && t.1 == pct) {
                        Some(t) => {
                            t.2.tp += s.table.tp;
                            t.2.fn_ += s.table.fn_;
                            t.2.fp += s.table.fp;
                            t.2.tn += s.table.tn;
                        }
                        None => tables.push((lead, pct, s.table)),
                    }
                }
            }
        }
        if first_forecast.is_none() {
            first_forecast = Some(f);
        }
    }
    let mae = if pred.is_empty() { Vec::new() } else { station_mae(&pred, &truth, &present, channels)? };
    let rmse = if pred.is_empty() { Vec::new() } else { station_rmse(&pred, &truth, &present, channels)? };
    let elevation = if st_alt.len() >= 2 {
        let lo = st_alt.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = st_alt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        equal_bins(lo, hi, cfg.eval.elevation_bins.max(1)).and_then(|b| elevation_regression(&st_err, &st_alt, &b)).ok()
    } else {
        None
    };
    let skill = tables
        .iter()
        .map(|(lead, pct, t)| SkillEntry {
            lead_hours: *lead,
            percentile: *pct,
            miss: t.miss_rate(),
            false_alarm: t.false_alarm_rate(),
        })
        .collect();
    let report = MetricReport {
        seed: cfg.seed,
        mae,
        rmse,
        elevation,
        skill,
        forecast_token_mse: fmse,
        persistence_token_mse: pmse,
        windows_evaluated: test.len(),
    };
    std::fs::write(l.report(), serde_json::to_vec_pretty(&report)?)?;
    write_report_csv(&l.out.join("report.csv"), &report)?;

    // first held-out forecast, decoded to observation space and products
    let f = first_forecast.expect("non-empty test set");
    let decoders: Vec<Option<(&str, &SatTokenizer)>> = fm
        .mmae
        .cfg
        .modalities
        .iter()
        .map(|m| ld.tokenizers.iter().find(|(id, _)| *id == m.id).map(|(id, t)| (id.as_str(), t)))
        .collect();
    let swaths = decode_forecast_to_obs(&f, &decoders, dt)?;
    let mut fields = Vec::new();
    for slot in 0..f.t {
        let step = f.start + slot;
        let time = step as f64 * dt;
        fields.push(inv.invert(&f.state(slot, BBox::global(), time)?, &products.id, step, time)?);
    }
    let prod = ProductSeries { id: products.id.clone(), fields };
    let dims = crate::synth::Dims { steps: f.t, ..ld.ds.dims.clone() };
    write_dataset(&l.forecast_container(), &forecast_dataset(cfg.seed, dims, f.t as f64 * dt, swaths, vec![prod]))?;
    let mut inputs = vec![l.data.clone(), l.mmae_ckpt(), l.forecast_ckpt(), l.invert_ckpt()];
    inputs.extend(tok_inputs(&l, &ld.ds));
    record(&l, cfg, "eval", inputs, vec![l.report(), l.out.join("report.csv"), l.forecast_container()])?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

fn write_report_csv(path: &Path, r: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "key", "value"])?;
    for (c, v) in r.mae.iter().enumerate() {
        w.write_record(["mae", &format!("var{c}"), &opt(*v)])?;
    }
    for (c, v) in r.rmse.iter().enumerate() {
        w.write_record(["rmse", &format!("var{c}"), &opt(*v)])?;
    }
    if let Some(e) = &r.elevation {
        w.write_record(["elevation_slope", "per_metre", &format!("{:e}", e.slope)])?;
    }
    for s in &r.skill {
        let key = format!("lead{}h_p{}", s.lead_hours, s.percentile);
        w.write_record(["miss", &key, &opt(s.miss)])?;
        w.write_record(["false_alarm", &key, &opt(s.false_alarm)])?;
    }
    w.write_record(["token_mse", "forecast", &format!("{:e}", r.forecast_token_mse)])?;
    w.write_record(["token_mse", "persistence", &format!("{:e}", r.persistence_token_mse)])?;
    w.flush()?;
    Ok(())
}

pub fn sweep_config(cfg: &RunConfig) -> SweepConfig {
    let d = SweepConfig::default();
    SweepConfig {
        data_sizes: cfg.scale.data_sizes.clone(),
        widths: cfg.scale.widths.clone(),
        patience: cfg.scale.patience,
        eval_every: cfg.scale.eval_every,
        repeats: cfg.scale.repeats,
        val_seed: cfg.stage_seed("scale-val-masks"),
        train: TrainConfig {
            steps: cfg.scale.steps,
            lr: cfg.scale.lr,
            seed: cfg.stage_seed("scale"),
            ..d.train.clone()
        },
        ..d
    }
}

pub fn run_scale(cfg: &RunConfig, out: &Path) -> Result<SweepResult> {
    let l = Layout::new(cfg, out);
    require(std::slice::from_ref(&l.data))?;
    let ld = load_corpus(cfg, &l)?;
    let (_, train_steps) = split(cfg, T_W);
    let mut pool = train_samples(cfg, &ld.corpus);
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.stage_seed("scale-pool")));
    let mut val: Vec<WindowSample> =
        all_samples(&ld.corpus, T_W).into_iter().filter(|s| s.start >= train_steps).collect();
    val.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.stage_seed("scale-val")));
    val.truncate(32);
    let base = fusion_config(cfg, &ld.corpus);
    let ic = (!ld.corpus.stations.is_empty()).then(|| insitu_config(cfg, ld.corpus.station_channels));
    let res = scaling_sweep(&base, ic.as_ref(), &ld.corpus, &pool, &val, &sweep_config(cfg))?;
    std::fs::write(l.scaling(), serde_json::to_vec_pretty(&res)?)?;
    let mut inputs = vec![l.data.clone()];
    inputs.extend(tok_inputs(&l, &ld.ds));
    record(&l, cfg, "scale", inputs, vec![l.scaling()])?;
    Ok(res)
}

fn read_trace(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| invalid(format!("bad number '{v}' in {}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Plots every trace, report and sweep found in the output directory.
pub fn run_plots(out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("plots");
    let mut files = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("_trace.csv"))
        .collect();
    entries.sort();
    for p in entries {
        let (names, rows) = read_trace(&p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("trace").to_string();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        files.extend(plot_trace(&dir, &stem, &names, &rows)?);
    }
    let report = out.join("report.json");
    if report.exists() {
        let r: MetricReport = serde_json::from_slice(&std::fs::read(&report)?)?;
        if !r.skill.is_empty() {
            files.extend(plot_skill(&dir, "skill", &r.skill)?);
        }
        if let Some(e) = &r.elevation {
            let rows: Vec<Vec<f64>> = e.bins.iter().filter_map(|b| b.mae.map(|m| vec![b.center, m])).collect();
            if !rows.is_empty() {
                files.extend(plot_lines(
                    &dir,
                    "elevation",
                    "station MAE by elevation",
                    &["elevation_m", "mae"],
                    &rows,
                )?);
            }
        }
    }
    let scaling = out.join("scaling.json");
    if scaling.exists() {
        let s: SweepResult = serde_json::from_slice(&std::fs::read(&scaling)?)?;
        files.extend(plot_scaling(&dir, "scaling_data", &s.data_fit, "D")?);
        files.extend(plot_scaling(&dir, "scaling_model", &s.model_fit, "N")?);
    }
    if files.is_empty() {
        return Err(invalid(format!("nothing to plot in {}", out.display())));
    }
    Ok(files)
}

/// Results of a full `gen → tok → mmae → forecast → invert → eval` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub tok_traces: Vec<(String, Vec<f64>)>,
    pub mmae_trace: Vec<LossRow>,
    pub forecast: ForecastSummary,
    pub invert_trace: Vec<f64>,
    pub report: MetricReport,
}

pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<PipelineSummary> {
    run_gen(cfg, out)?;
    let tok_traces = run_tok(cfg, out)?;
    let mmae_trace = run_mmae(cfg, out)?;
    let forecast = run_forecast(cfg, out)?;
    let invert_trace = run_invert(cfg, out)?;
    let report = run_eval(cfg, out)?;
    Ok(PipelineSummary { tok_traces, mmae_trace, forecast, invert_trace, report })
}

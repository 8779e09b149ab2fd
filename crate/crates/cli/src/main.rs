use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eo1_core::error::{Error, Result};
use eo1_core::harness::pipeline;
use eo1_core::harness::RunConfig;

#[derive(Parser)]
#[command(name = "eo1", version, about = "Train and evaluate the observation-native world model on synthetic data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file (`section.key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-sensor dataset.
    Gen(Common),
    /// Train one satellite tokenizer per instrument.
    TrainTok(Common),
    /// Train the masked multimodal autoencoder.
    TrainMmae(Common),
    /// Train the latent forecaster.
    TrainForecast(Common),
    /// Train the product inversion head.
    TrainInvert(Common),
    /// Evaluate held-out forecasts and write the metric report.
    Eval(Common),
    /// Run the miniature scaling sweep.
    Scale(Common),
    /// Render plots and CSVs from the artifacts in the output directory.
    Plot(Common),
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&c.out)?;
    Ok(cfg)
}

fn print<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen(c) => {
            let m = pipeline::run_gen(&load(&c)?, &c.out)?;
            print(&m)
        }
        Cmd::TrainTok(c) => {
            let traces = pipeline::run_tok(&load(&c)?, &c.out)?;
            for (id, t) in traces {
                println!("{id}: final loss {:.6}", t.last().copied().unwrap_or(f64::NAN));
            }
            Ok(())
        }
        Cmd::TrainMmae(c) => {
            let trace = pipeline::run_mmae(&load(&c)?, &c.out)?;
            if let Some(l) = trace.last() {
                println!("final loss {:.6} (recon {:.6}, in-situ {:.6})", l.total, l.recon, l.insitu);
            }
            Ok(())
        }
        Cmd::TrainForecast(c) => {
            let s = pipeline::run_forecast(&load(&c)?, &c.out)?;
            println!(
                "held-out token MSE {:.6} vs persistence {:.6} over {} pairs",
                s.forecast_mse, s.persistence_mse, s.test_pairs
            );
            Ok(())
        }
        Cmd::TrainInvert(c) => {
            let t = pipeline::run_invert(&load(&c)?, &c.out)?;
            println!("final loss {:.6}", t.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Cmd::Eval(c) => print(&pipeline::run_eval(&load(&c)?, &c.out)?),
        Cmd::Scale(c) => print(&pipeline::run_scale(&load(&c)?, &c.out)?),
        Cmd::Plot(c) => {
            for f in pipeline::run_plots(&c.out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(match e {
                Error::InvalidInput(_) | Error::Integrity(_) => 2,
                Error::Divergence(_) => 3,
                _ => 1,
            })
        }
    }
}

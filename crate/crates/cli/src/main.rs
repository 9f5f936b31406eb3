use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spex_cli::commands::{execute, replay, Run};
use spex_cli::config::Config;
use spex_cli::exit_code;
use spex_cli::manifest::{CommandKind, RunArgs, RunManifest};
use spex_core::{Error, Result};

/// Bayesian spatial extremes: simulate, fit, predict and evaluate.
#[derive(Parser)]
#[command(name = "spex", version)]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a dataset from one of the six settings.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Run the MCMC sampler on a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Long-format dataset; overrides `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many sweeps and write only a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Posterior predictive quantiles at new sites.
    Predict {
        #[command(flatten)]
        common: Common,
        /// `samples.bin` written by `fit`.
        #[arg(long)]
        samples: PathBuf,
        /// Sites CSV with `x` and `y` columns; overrides `prediction.sites`.
        #[arg(long)]
        sites: Option<PathBuf>,
        /// Comma-separated quantile levels; overrides `prediction.levels`.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
    },
    /// Score models by MMSE of quantiles and tail dependence.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Repeat a recorded run from its manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn absolute(p: Option<PathBuf>) -> Result<Option<PathBuf>> {
    p.map(|p| std::path::absolute(&p).map_err(Error::from)).transpose()
}

fn load_config(path: &Option<PathBuf>) -> Result<(Config, bool)> {
    match path {
        Some(p) => {
            let mut c = Config::load(p)?;
            let base = p.parent().unwrap_or(Path::new("."));
            // paths inside the file are relative to it
            for f in [&mut c.data.path, &mut c.data.knots, &mut c.prediction.sites] {
                if let Some(v) = f.as_mut() {
                    if v.is_relative() {
                        *v = std::path::absolute(base.join(&*v))?;
                    }
                }
            }
            Ok((c, true))
        }
        None => Ok((Config::default(), false)),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::config("--threads", e.to_string()))?;
    }
    let (command, common, seed, args) = match cli.command {
        Cmd::Replay { manifest, out } => {
            let m = RunManifest::load(&manifest)?;
            replay(&m, &out)?;
            return Ok(());
        }
        Cmd::Simulate { common, seed } => (CommandKind::Simulate, common, Some(seed), RunArgs::default()),
        Cmd::Fit { common, seed, data, resume, stop_after } => (
            CommandKind::Fit,
            common,
            Some(seed),
            RunArgs { data: absolute(data)?, resume: absolute(resume)?, stop_after, ..RunArgs::default() },
        ),
        Cmd::Predict { common, samples, sites, levels } => (
            CommandKind::Predict,
            common,
            None,
            RunArgs { samples: absolute(Some(samples))?, sites: absolute(sites)?, levels, ..RunArgs::default() },
        ),
        Cmd::Evaluate { common, seed, data } => {
            (CommandKind::Evaluate, common, Some(seed), RunArgs { data: absolute(data)?, ..RunArgs::default() })
        }
    };
    let (config, explicit_config) = load_config(&common.config)?;
    execute(&Run { command, config, explicit_config, seed, args, out: common.out })?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

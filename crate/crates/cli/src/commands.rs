//! The four commands. Each reads its inputs, writes its outputs into one
//! directory and finishes with a manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use spex_core::geometry::KnotSet;
use spex_core::io::{fmt_f64, read_dataset, read_sites, write_acceptance, write_dataset, write_grid, write_samples, write_scores, write_sites};
use spex_core::mcmc::{posterior_prob_delta, Checkpoint, PosteriorSamples, Sampler};
use spex_core::models::ModelKind;
use spex_core::predict::{
    cross_validate, empirical_chi_pairs, empirical_quantiles, mmse_chi, mmse_quantiles, model_chi_pairs,
    predict_quantiles, CvSettings, ScoreTable,
};
use spex_core::simulate::{simulate, Dataset};
use spex_core::stats::mean;
use spex_core::{Error, Result};

use crate::config::{Config, EvalMode};
use crate::manifest::{digest_file, now_unix, CommandKind, RunArgs, RunManifest};

pub const DATA_FILE: &str = "data.csv";
pub const SITES_FILE: &str = "sites.csv";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const SAMPLES_BIN: &str = "samples.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ACCEPTANCE_FILE: &str = "acceptance.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const SCORES_FILE: &str = "scores.csv";

/// One fully resolved invocation.
#[derive(Debug, Clone)]
pub struct Run {
    pub command: CommandKind,
    pub config: Config,
    /// Whether the configuration came from a file (or a manifest) rather than defaults.
    pub explicit_config: bool,
    pub seed: Option<u64>,
    pub args: RunArgs,
    pub out: PathBuf,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(path);
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))
}

fn need_seed(run: &Run) -> Result<u64> {
    run.seed.ok_or_else(|| Error::config("--seed", "a seed is required for this command"))
}

fn data_path(run: &Run) -> Result<PathBuf> {
    run.args
        .data
        .clone()
        .or_else(|| run.config.data.path.clone())
        .ok_or_else(|| Error::config("data.path", "no dataset given (use --data or data.path)"))
}

fn load_data(path: &Path) -> Result<Dataset> {
    let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_dataset(open(path)?, &tag).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Execute a run and write its manifest.
pub fn execute(run: &Run) -> Result<RunManifest> {
    let started = now_unix();
    let mut out = Outputs::new(&run.out)?;
    let mut inputs = Vec::new();
    let mut config = run.config.clone();
    match run.command {
        CommandKind::Simulate => {
            let seed = need_seed(run)?;
            config.simulation.seed = seed;
            config.simulation.validate()?;
            let sim = simulate(&config.simulation)?;
            out.write(DATA_FILE, |w| write_dataset(w, &sim.data))?;
            out.write(SITES_FILE, |w| write_sites(w, &sim.data.sites))?;
        }
        CommandKind::Fit => {
            let seed = need_seed(run)?;
            fit(run, &config, seed, &mut out, &mut inputs)?;
        }
        CommandKind::Predict => predict(run, &mut config, &mut out, &mut inputs)?,
        CommandKind::Evaluate => {
            let seed = need_seed(run)?;
            evaluate(run, &config, seed, &mut out, &mut inputs)?;
        }
    }
    let manifest = RunManifest {
        command: run.command,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: run.seed,
        started_unix: started,
        finished_unix: now_unix(),
        args: run.args.clone(),
        inputs: inputs.iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
        outputs: out.files.iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
        config,
    };
    manifest.write(&run.out)?;
    Ok(manifest)
}

fn fit(run: &Run, config: &Config, seed: u64, out: &mut Outputs, inputs: &mut Vec<PathBuf>) -> Result<()> {
    let cfg = config.chain(config.model.kind, seed);
    let mut sampler = match &run.args.resume {
        Some(path) => {
            inputs.push(path.clone());
            let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
            let cp = Checkpoint::from_bytes(&bytes)?;
            if cp.config != cfg {
                return Err(Error::config("--resume", "checkpoint was written under a different configuration or seed"));
            }
            Sampler::resume(cp)?
        }
        None => {
            let path = data_path(run)?;
            inputs.push(path.clone());
            let data = load_data(&path)?;
            let knots = match &config.data.knots {
                Some(k) => {
                    inputs.push(k.clone());
                    Some(KnotSet::new(read_sites(open(k)?)?)?)
                }
                None => None,
            };
            Sampler::new(&data, knots, &cfg)?
        }
    };
    if let Some(n) = run.args.stop_after {
        sampler.run_until(n)?;
        if sampler.iteration() < cfg.iterations {
            let bytes = sampler.checkpoint().to_bytes()?;
            return out.write(CHECKPOINT_FILE, |w| Ok(w.write_all(&bytes)?));
        }
    }
    sampler.run_until(cfg.iterations)?;
    let bytes = sampler.checkpoint().to_bytes()?;
    let samples = sampler.into_samples();
    out.write(SAMPLES_CSV, |w| write_samples(w, &samples))?;
    let sb = samples.to_bytes()?;
    out.write(SAMPLES_BIN, |w| Ok(w.write_all(&sb)?))?;
    out.write(CHECKPOINT_FILE, |w| Ok(w.write_all(&bytes)?))?;
    out.write(ACCEPTANCE_FILE, |w| write_acceptance(w, &samples.acceptance))?;
    out.write(SUMMARY_FILE, |w| write_summary(w, &samples))
}

fn write_summary<W: Write>(w: &mut W, s: &PosteriorSamples) -> Result<()> {
    writeln!(w, "name,value")?;
    writeln!(w, "model,{}", s.kind)?;
    writeln!(w, "draws,{}", s.len())?;
    if !s.is_empty() {
        writeln!(w, "alpha_mean,{}", fmt_f64(mean(&s.alpha_trace())))?;
        writeln!(w, "tau_mean,{}", fmt_f64(mean(&s.tau_trace())))?;
        if s.kind == ModelKind::Mm {
            writeln!(w, "q_mean,{}", fmt_f64(mean(&s.q_trace())))?;
            writeln!(w, "prob_delta,{}", fmt_f64(posterior_prob_delta(s)?))?;
        }
    }
    Ok(())
}

fn predict(run: &Run, config: &mut Config, out: &mut Outputs, inputs: &mut Vec<PathBuf>) -> Result<()> {
    let path = run.args.samples.clone().ok_or_else(|| Error::config("--samples", "no samples file given"))?;
    inputs.push(path.clone());
    let bytes = std::fs::read(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let samples = PosteriorSamples::from_bytes(&bytes)?;
    if run.explicit_config && config.model.kind != samples.kind {
        return Err(Error::config(
            "model.kind",
            format!("configuration names {} but the samples come from {}", config.model.kind, samples.kind),
        ));
    }
    config.model.kind = samples.kind;
    let sites_path = run
        .args
        .sites
        .clone()
        .or_else(|| config.prediction.sites.clone())
        .ok_or_else(|| Error::config("prediction.sites", "no prediction sites given (use --sites or prediction.sites)"))?;
    inputs.push(sites_path.clone());
    let sites = read_sites(open(&sites_path)?)?;
    let levels = run.args.levels.clone().unwrap_or_else(|| config.prediction.levels.clone());
    let grid = predict_quantiles(&samples, &sites, &levels).map_err(|e| match e {
        Error::Domain(m) => Error::config("prediction.levels", m),
        e => e,
    })?;
    out.write(GRID_FILE, |w| write_grid(w, &grid))
}

fn evaluate(run: &Run, config: &Config, seed: u64, out: &mut Outputs, inputs: &mut Vec<PathBuf>) -> Result<()> {
    let path = data_path(run)?;
    inputs.push(path.clone());
    let data = load_data(&path)?;
    let ev = &config.evaluation;
    let table = match ev.mode {
        EvalMode::Cv => {
            let cv = CvSettings {
                models: ev.models.clone(),
                folds: ev.folds,
                quantile_levels: ev.quantile_levels.clone(),
                chi_levels: ev.chi_levels.clone(),
                seed,
            };
            cross_validate(&data, &cv, &config.chain(config.model.kind, seed))?
        }
        EvalMode::InSample => in_sample(&data, config, seed)?,
    };
    out.write(SCORES_FILE, |w| write_scores(w, &table))
}

fn in_sample(data: &Dataset, config: &Config, seed: u64) -> Result<ScoreTable> {
    let ev = &config.evaluation;
    let tq = empirical_quantiles(data, &ev.quantile_levels)?;
    let tc = empirical_chi_pairs(data, &ev.chi_levels)?;
    let mut table = ScoreTable {
        models: ev.models.clone(),
        quantile_levels: ev.quantile_levels.clone(),
        chi_levels: ev.chi_levels.clone(),
        mmse_quantiles: Vec::new(),
        mmse_chi: Vec::new(),
    };
    for &kind in &ev.models {
        let samples = Sampler::new(data, None, &config.chain(kind, seed))?.run()?;
        let grid = predict_quantiles(&samples, &data.sites, &ev.quantile_levels)?;
        let chi = model_chi_pairs(&samples, &data.sites, &ev.chi_levels)?;
        table.mmse_quantiles.push(
            (0..ev.quantile_levels.len())
                .map(|k| mmse_quantiles(&[grid.level_means(k)], &[tq[k].clone()]))
                .collect::<Result<_>>()?,
        );
        table.mmse_chi.push(
            (0..ev.chi_levels.len()).map(|k| mmse_chi(&[chi[k].clone()], &[tc[k].clone()])).collect::<Result<_>>()?,
        );
    }
    Ok(table)
}

/// Repeat the run recorded in a manifest into `out`.
pub fn replay(manifest: &RunManifest, out: &Path) -> Result<RunManifest> {
    manifest.verify_inputs()?;
    if manifest.version != env!("CARGO_PKG_VERSION") {
        return Err(Error::config(
            "<manifest>",
            format!("recorded with version {}, this is {}", manifest.version, env!("CARGO_PKG_VERSION")),
        ));
    }
    execute(&Run {
        command: manifest.command,
        config: manifest.config.clone(),
        explicit_config: true,
        seed: manifest.seed,
        args: manifest.args.clone(),
        out: out.to_path_buf(),
    })
}

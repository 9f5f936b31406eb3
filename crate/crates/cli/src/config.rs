//! The TOML run configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spex_core::gp::{ConstantPriors, GpHyperPrior, SurfaceMode};
use spex_core::mcmc::{BlockMask, ChainConfig, InitValues, InitialSteps};
use spex_core::models::ModelKind;
use spex_core::predict::check_levels;
use spex_core::simulate::SimConfig;
use spex_core::{Error, Result};

pub const DEFAULT_PREDICT_LEVELS: [f64; 3] = [0.5, 0.95, 0.99];
pub const DEFAULT_EVAL_LEVELS: [f64; 12] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub priors: PriorsSection,
    pub mcmc: McmcSection,
    pub prediction: PredictionSection,
    pub evaluation: EvaluationSection,
    pub simulation: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Long-format dataset; `--data` overrides.
    pub path: Option<PathBuf>,
    /// Knot locations (`x,y` CSV); the data sites when absent.
    pub knots: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub surface: SurfaceMode,
    /// Truncation level; the number of replicates when absent.
    pub n_atoms: Option<usize>,
    pub stick_concentration: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { kind: ModelKind::Mm, surface: SurfaceMode::Constant, n_atoms: None, stick_concentration: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsSection {
    pub mu_sd: f64,
    pub log_sigma_sd: f64,
    pub xi_sd: f64,
    pub tau_shape: f64,
    pub tau_scale: f64,
    pub gp: GpHyperPrior,
}

impl Default for PriorsSection {
    fn default() -> Self {
        let c = ConstantPriors::default();
        PriorsSection {
            mu_sd: c.mu_sd,
            log_sigma_sd: c.log_sigma_sd,
            xi_sd: c.xi_sd,
            tau_shape: c.tau_shape,
            tau_scale: c.tau_scale,
            gp: GpHyperPrior::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub target_accept: f64,
    pub adapt: bool,
    pub prior_only: bool,
    pub validate: bool,
    /// Max-mixture pilot chains; 1 disables.
    pub starts: usize,
    pub pilot: usize,
    pub blocks: BlockMask,
    pub init: InitValues,
    pub steps: InitialSteps,
}

impl Default for McmcSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        McmcSection {
            iterations: c.iterations,
            burn_in: c.burn_in,
            thin: c.thin,
            target_accept: c.target_accept,
            adapt: c.adapt,
            prior_only: false,
            validate: false,
            starts: c.starts,
            pilot: c.pilot,
            blocks: c.blocks,
            init: c.init,
            steps: c.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionSection {
    pub levels: Vec<f64>,
    /// Prediction sites (`x,y` CSV); `--sites` overrides.
    pub sites: Option<PathBuf>,
}

impl Default for PredictionSection {
    fn default() -> Self {
        PredictionSection { levels: DEFAULT_PREDICT_LEVELS.to_vec(), sites: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// k-fold cross-validation over sites.
    #[default]
    Cv,
    /// Fit on every site and score against the empirical values at the same sites.
    InSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub mode: EvalMode,
    pub models: Vec<ModelKind>,
    pub folds: usize,
    pub quantile_levels: Vec<f64>,
    pub chi_levels: Vec<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            mode: EvalMode::Cv,
            models: vec![ModelKind::Hevp, ModelKind::Sb, ModelKind::Mm],
            folds: 3,
            quantile_levels: DEFAULT_EVAL_LEVELS.to_vec(),
            chi_levels: DEFAULT_EVAL_LEVELS.to_vec(),
        }
    }
}

fn levels_at(path: &str, levels: &[f64]) -> Result<()> {
    check_levels(levels).map_err(|e| Error::config(path, e.to_string()))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<config>".to_string() } else { path };
            Error::config(path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<config>", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.chain(self.model.kind, 0).validate().map_err(|e| match e {
            Error::Config { path, msg } if path == "mcmc.n_atoms" || path == "mcmc.stick_concentration" => {
                Error::config(path.replace("mcmc.", "model."), msg)
            }
            e => e,
        })?;
        levels_at("prediction.levels", &self.prediction.levels)?;
        levels_at("evaluation.quantile_levels", &self.evaluation.quantile_levels)?;
        levels_at("evaluation.chi_levels", &self.evaluation.chi_levels)?;
        if self.evaluation.models.is_empty() {
            return Err(Error::config("evaluation.models", "no models to compare"));
        }
        if self.evaluation.folds < 2 {
            return Err(Error::config("evaluation.folds", "need at least 2 folds"));
        }
        self.simulation.validate()
    }

    /// Sampler configuration for one model.
    pub fn chain(&self, kind: ModelKind, seed: u64) -> ChainConfig {
        let p = &self.priors;
        let m = &self.mcmc;
        ChainConfig {
            model: kind,
            iterations: m.iterations,
            burn_in: m.burn_in,
            thin: m.thin,
            n_atoms: self.model.n_atoms,
            stick_concentration: self.model.stick_concentration,
            target_accept: m.target_accept,
            adapt: m.adapt,
            prior_only: m.prior_only,
            surface: self.model.surface,
            priors: ConstantPriors {
                mu_sd: p.mu_sd,
                log_sigma_sd: p.log_sigma_sd,
                xi_sd: p.xi_sd,
                tau_shape: p.tau_shape,
                tau_scale: p.tau_scale,
            },
            gp_prior: p.gp,
            blocks: m.blocks,
            init: m.init,
            steps: m.steps,
            validate: m.validate,
            starts: m.starts,
            pilot: m.pilot,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.evaluation.folds, 3);
        assert_eq!(c.prediction.levels, vec![0.5, 0.95, 0.99]);
    }

    #[test]
    fn errors_name_the_field() {
        let err = |t: &str| match Config::parse(t) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("{other:?}"),
        };
        assert_eq!(err("[mcmc]\nsweeps = 3\n"), "mcmc.sweeps");
        assert_eq!(err("[mcmc]\niterations = \"many\"\n"), "mcmc.iterations");
        assert_eq!(err("[model]\nkind = \"gauss\"\n"), "model.kind");
        assert_eq!(err("[mcmc]\nburn_in = 20000\n"), "mcmc.burn_in");
        assert_eq!(err("[model]\nn_atoms = 0\n"), "model.n_atoms");
        assert_eq!(err("[simulation]\nreplicates = 0\n"), "simulation.replicates");
        assert_eq!(err("[prediction]\nlevels = [0.5, 1.0]\n"), "prediction.levels");
        assert_eq!(err("[evaluation]\nfolds = 1\n"), "evaluation.folds");
        assert_eq!(err("[mcmc]\nstarts = 0\n"), "mcmc.starts");
        assert_eq!(err("[extra]\n"), "extra");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::default();
        c.model.kind = ModelKind::Sb;
        c.model.n_atoms = Some(7);
        c.mcmc.init.alpha = Some(0.3);
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }
}

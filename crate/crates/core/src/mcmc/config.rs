use serde::{Deserialize, Serialize};

use crate::gp::{ConstantPriors, GpHyperPrior, SurfaceMode};
use crate::models::ModelKind;
use crate::{Error, Result};

/// Which update blocks run in a sweep. Disabling a block freezes its
/// parameters at their initial values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockMask {
    pub gev: bool,
    pub tau: bool,
    pub alpha: bool,
    /// Joint move of α with the positive stable latents.
    pub alpha_joint: bool,
    pub latent: bool,
    /// Auxiliary variables `B` and `λ`.
    pub aux: bool,
    pub atoms: bool,
    pub labels: bool,
    pub sticks: bool,
    pub q: bool,
}

impl Default for BlockMask {
    fn default() -> Self {
        BlockMask { gev: true, tau: true, alpha: true, alpha_joint: true, latent: true, aux: true, atoms: true, labels: true, sticks: true, q: true }
    }
}

/// Optional initial values overriding the automatic initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InitValues {
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub q: Option<f64>,
    pub mu: Option<f64>,
    pub log_sigma: Option<f64>,
    pub xi: Option<f64>,
}

/// Initial random-walk scales. Adaptation tunes them during burn-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSteps {
    pub gev: [f64; 3],
    pub log_tau: f64,
    pub logit_alpha: f64,
    pub q: f64,
    pub log_latent: f64,
    pub aux: f64,
    pub gp_log_hyper: f64,
}

impl Default for InitialSteps {
    fn default() -> Self {
        InitialSteps { gev: [0.05, 0.05, 0.02], log_tau: 0.2, logit_alpha: 0.2, q: 0.1, log_latent: 1.0, aux: 0.3, gp_log_hyper: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub model: ModelKind,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Truncation level `J`; `None` sets it to the number of replicates.
    pub n_atoms: Option<usize>,
    /// Stick-breaking concentration `ν` in `v_j ~ Beta(1, ν)`.
    pub stick_concentration: f64,
    pub target_accept: f64,
    pub adapt: bool,
    /// Ignore the data and sample from the prior.
    pub prior_only: bool,
    pub surface: SurfaceMode,
    pub priors: ConstantPriors,
    pub gp_prior: GpHyperPrior,
    pub blocks: BlockMask,
    pub init: InitValues,
    pub steps: InitialSteps,
    /// Check state invariants and cache coherence after every sweep.
    pub validate: bool,
    /// Max-mixture only: number of tempered pilot chains; the one with the
    /// highest late log-likelihood seeds the chain. 1 disables.
    pub starts: usize,
    /// Sweeps per pilot chain.
    pub pilot: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            model: ModelKind::Mm,
            iterations: 10_000,
            burn_in: 2_500,
            thin: 5,
            n_atoms: None,
            stick_concentration: 1.0,
            target_accept: 0.4,
            adapt: true,
            prior_only: false,
            surface: SurfaceMode::Constant,
            priors: ConstantPriors::default(),
            gp_prior: GpHyperPrior::default(),
            blocks: BlockMask::default(),
            init: InitValues::default(),
            steps: InitialSteps::default(),
            validate: cfg!(debug_assertions),
            starts: 2,
            pilot: 1_000,
            seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(Error::config(format!("mcmc.{f}"), m));
        if self.iterations == 0 {
            return err("iterations", "must be positive");
        }
        if self.burn_in >= self.iterations {
            return err("burn_in", "must be smaller than iterations");
        }
        if self.thin == 0 {
            return err("thin", "must be positive");
        }
        if self.n_atoms == Some(0) {
            return err("n_atoms", "must be at least 1");
        }
        if !(self.stick_concentration > 0.0) {
            return err("stick_concentration", "must be positive");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return err("target_accept", "must lie in (0,1)");
        }
        if self.starts == 0 {
            return err("starts", "must be at least 1");
        }
        if let Some(a) = self.init.alpha {
            let hi = if self.model == ModelKind::Hevp { 1.0 } else { 1.0 - 1e-12 };
            if !(a > 0.0 && a <= hi) {
                return err("init.alpha", "must lie in (0,1)");
            }
        }
        if let Some(t) = self.init.tau {
            if !(t > 0.0) {
                return err("init.tau", "must be positive");
            }
        }
        if let Some(q) = self.init.q {
            if !(0.0..=1.0).contains(&q) {
                return err("init.q", "must lie in [0,1]");
            }
        }
        Ok(())
    }

    /// Whether construction runs pilot chains.
    pub fn uses_pilots(&self) -> bool {
        self.model == ModelKind::Mm && self.starts > 1 && self.pilot > 0 && !self.prior_only
    }

    /// Number of stored draws.
    pub fn n_stored(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

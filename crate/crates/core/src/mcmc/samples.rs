use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::Site;
use crate::gp::GpHyper;
use crate::models::{dependence_threshold, ModelKind};
use crate::{Error, Result};

use super::config::ChainConfig;

/// One stored post-burn-in state, reduced to what prediction needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iteration: usize,
    pub alpha: f64,
    pub tau: f64,
    pub q: f64,
    pub loglik: f64,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub xi: Vec<f64>,
    pub gp: Option<Vec<GpHyper>>,
    /// `ln γ`, row-major `J × L`.
    pub log_gamma: Vec<f64>,
    pub pi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub kind: ModelKind,
    pub config: ChainConfig,
    pub sites: Vec<Site>,
    pub knots: Vec<Site>,
    pub n_times: usize,
    pub n_atoms: usize,
    pub draws: Vec<Draw>,
    /// Acceptance rate per update block over the whole run.
    pub acceptance: BTreeMap<String, f64>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn alpha_trace(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.alpha).collect()
    }

    pub fn tau_trace(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.tau).collect()
    }

    pub fn q_trace(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.q).collect()
    }

    /// `I(q ≥ α/(1+α))` per draw.
    pub fn delta_trace(&self) -> Vec<u8> {
        self.draws.iter().map(|d| (d.q >= dependence_threshold(d.alpha)) as u8).collect()
    }
}

/// Posterior probability of asymptotic dependence in a max-mixture fit.
pub fn posterior_prob_delta(samples: &PosteriorSamples) -> Result<f64> {
    if samples.kind != ModelKind::Mm {
        return Err(Error::domain("posterior probability of dependence needs max-mixture samples"));
    }
    if samples.is_empty() {
        return Err(Error::domain("no stored draws"));
    }
    let d = samples.delta_trace();
    Ok(d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64)
}

impl PosteriorSamples {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| Error::Io(format!("samples encoding: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        bincode::deserialize(bytes).map_err(|e| Error::Data(format!("corrupt samples file: {e}")))
    }
}

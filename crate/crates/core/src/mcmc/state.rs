use serde::{Deserialize, Serialize};

use crate::geometry::{KnotSet, Site};
use crate::gp::{GevSurface, GpHyper};
use crate::models::ModelKind;
use crate::simulate::Dataset;
use crate::{Error, Result};

/// Observed data and knots, fixed for the life of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitData {
    pub sites: Vec<Site>,
    pub knots: KnotSet,
    /// Row-major `T × n`.
    pub y: Vec<f64>,
    pub n_sites: usize,
    pub n_times: usize,
}

impl FitData {
    /// Knots default to the data sites.
    pub fn new(data: &Dataset, knots: Option<KnotSet>) -> Result<Self> {
        if data.n_times == 0 || data.sites.is_empty() {
            return Err(Error::Data("dataset has no observations".into()));
        }
        if data.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        let knots = match knots {
            Some(k) => k,
            None => KnotSet::new(data.sites.clone())?,
        };
        Ok(FitData {
            sites: data.sites.clone(),
            knots,
            y: data.y.clone(),
            n_sites: data.sites.len(),
            n_times: data.n_times,
        })
    }

    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.y[t * self.n_sites + i]
    }
}

/// Complete latent state of one iteration.
///
/// Positive latents are stored on the log scale: for small α the positive
/// stable variables routinely exceed the range of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub kind: ModelKind,
    pub surface: GevSurface,
    /// GP hyperparameters for (μ, log σ, ξ) in GP-surface mode.
    pub gp: Option<Vec<GpHyper>>,
    pub alpha: f64,
    pub tau: f64,
    /// Mixing parameter; pinned to 1 for the HEVP and 0 for the SB model.
    pub q: f64,
    /// `ln A_{tl}`, row-major `T × L` (empty without an HEVP component).
    pub log_a: Vec<f64>,
    pub b: Vec<f64>,
    /// `ln γ_{jl}`, row-major `J × L` (empty without atoms).
    pub log_gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub labels: Vec<usize>,
    pub v: Vec<f64>,
    pub pi: Vec<f64>,
    pub n_times: usize,
    pub n_knots: usize,
    pub n_atoms: usize,
}

/// `π_j = v_j Π_{i<j} (1 − v_i)`.
pub fn stick_weights(v: &[f64]) -> Vec<f64> {
    let mut rest = 1.0;
    v.iter()
        .map(|&vj| {
            let p = vj * rest;
            rest *= 1.0 - vj;
            p
        })
        .collect()
}

impl ModelState {
    pub fn a_index(&self, t: usize, l: usize) -> usize {
        t * self.n_knots + l
    }

    pub fn g_index(&self, j: usize, l: usize) -> usize {
        j * self.n_knots + l
    }

    /// Check every structural and range invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Numerical(format!("invalid state: {m}")));
        let n = self.surface.n_sites();
        if self.surface.log_sigma.len() != n || self.surface.xi.len() != n {
            return bad("surface fields differ in length".into());
        }
        let all_finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !all_finite(&self.surface.mu) || !all_finite(&self.surface.log_sigma) || !all_finite(&self.surface.xi) {
            return bad("non-finite GEV surface".into());
        }
        let amax = if self.kind == ModelKind::Hevp { 1.0 } else { 1.0 - f64::EPSILON };
        if !(self.alpha > 0.0 && self.alpha <= amax) {
            return bad(format!("alpha = {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau = {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return bad(format!("q = {}", self.q));
        }
        let (tl, jl) = (self.n_times * self.n_knots, self.n_atoms * self.n_knots);
        if self.kind.has_latent_a() {
            if self.log_a.len() != tl || self.b.len() != tl {
                return bad("latent dimensions".into());
            }
            if !all_finite(&self.log_a) {
                return bad("non-finite latent A".into());
            }
            if self.b.iter().any(|b| !(*b >= 0.0 && *b <= 1.0)) {
                return bad("auxiliary B outside [0,1]".into());
            }
        }
        if self.kind.has_atoms() {
            if self.log_gamma.len() != jl || self.lambda.len() != jl {
                return bad("atom dimensions".into());
            }
            if !all_finite(&self.log_gamma) {
                return bad("non-finite atom".into());
            }
            if self.lambda.iter().any(|b| !(*b >= 0.0 && *b <= 1.0)) {
                return bad("auxiliary lambda outside [0,1]".into());
            }
            if self.labels.len() != self.n_times || self.labels.iter().any(|&g| g >= self.n_atoms) {
                return bad("labels out of range".into());
            }
            if self.v.len() != self.n_atoms || self.v[self.n_atoms - 1] != 1.0 {
                return bad("last stick must be pinned to 1".into());
            }
            if self.v.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
                return bad("stick outside [0,1]".into());
            }
            let s: f64 = self.pi.iter().sum();
            if self.pi.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return bad("weights off the simplex".into());
            }
        }
        Ok(())
    }
}

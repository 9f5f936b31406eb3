//! Generalized extreme value distribution.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Below this |ξ| the Gumbel limit is used.
pub const XI_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        let p = GevParams { mu, sigma, xi };
        p.validate()?;
        Ok(p)
    }

    pub fn unit_frechet() -> Self {
        GevParams {
            mu: 1.0,
            sigma: 1.0,
            xi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.xi.is_finite() && self.sigma.is_finite()) || self.sigma <= 0.0 {
            return Err(Error::domain(format!(
                "invalid GEV parameters (mu={}, sigma={}, xi={})",
                self.mu, self.sigma, self.xi
            )));
        }
        Ok(())
    }

    /// `(ln z, ln x)` where `z = 1 + ξ(y−μ)/σ` and `x = z^{1/ξ}` is `y` mapped
    /// to the unit Fréchet scale. `None` off the support.
    #[inline]
    pub fn reduce(&self, y: f64) -> Option<(f64, f64)> {
        reduce(y, self.mu, self.sigma, self.xi)
    }

    /// Lower and upper support endpoints.
    pub fn support(&self) -> (f64, f64) {
        if self.xi.abs() < XI_EPS {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else if self.xi > 0.0 {
            (self.mu - self.sigma / self.xi, f64::INFINITY)
        } else {
            (f64::NEG_INFINITY, self.mu - self.sigma / self.xi)
        }
    }

    /// Map a unit-Fréchet-scale value `x > 0` back to the data scale.
    pub fn from_frechet_log(&self, log_x: f64) -> f64 {
        if self.xi.abs() < XI_EPS {
            self.mu + self.sigma * log_x
        } else {
            self.mu + self.sigma * (self.xi * log_x).exp_m1() / self.xi
        }
    }
}

/// Shared reduction used by every GEV evaluator and by the MCMC likelihood.
#[inline]
pub fn reduce(y: f64, mu: f64, sigma: f64, xi: f64) -> Option<(f64, f64)> {
    let w = (y - mu) / sigma;
    if xi.abs() < XI_EPS {
        if w.is_nan() {
            return None;
        }
        return Some((0.0, w));
    }
    let t = xi * w;
    if !(t > -1.0) {
        return None;
    }
    let lz = t.ln_1p();
    Some((lz, lz / xi))
}

pub fn gev_cdf(y: f64, p: &GevParams) -> Result<f64> {
    p.validate()?;
    Ok(match p.reduce(y) {
        Some((_, lx)) => (-(-lx).exp()).exp(),
        None if p.xi > 0.0 => 0.0,
        None => 1.0,
    })
}

/// Natural log of the CDF; `-∞` below the lower endpoint.
pub fn gev_logcdf(y: f64, p: &GevParams) -> Result<f64> {
    p.validate()?;
    Ok(match p.reduce(y) {
        Some((_, lx)) => -(-lx).exp(),
        None if p.xi > 0.0 => f64::NEG_INFINITY,
        None => 0.0,
    })
}

pub fn gev_quantile(u: f64, p: &GevParams) -> Result<f64> {
    p.validate()?;
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("quantile level must lie in (0,1), got {u}")));
    }
    // Fréchet-scale log quantile: x = 1 / (-ln u).
    let log_x = -(-u.ln()).ln();
    Ok(p.from_frechet_log(log_x))
}

/// Log density; exactly `-∞` off the support and for invalid parameters.
#[inline]
pub fn gev_logpdf(y: f64, p: &GevParams) -> f64 {
    if !(p.sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    match p.reduce(y) {
        Some((lz, lx)) => -p.sigma.ln() - lz - lx - (-lx).exp(),
        None => f64::NEG_INFINITY,
    }
}

pub fn gev_sample(p: &GevParams, rng: &mut RngStream) -> f64 {
    let log_x = -(rng.exp1()).ln();
    p.from_frechet_log(log_x)
}

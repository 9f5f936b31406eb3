//! Positive stable law PS(α) with Laplace transform `exp(-t^α)`, and the
//! auxiliary-variable joint density that makes it tractable inside MCMC.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A positive stable variate together with its auxiliary variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsAuxPair {
    pub gamma: f64,
    pub lambda: f64,
}

impl PsAuxPair {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::domain(format!("gamma must be positive, got {gamma}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::domain(format!("lambda must lie in [0,1], got {lambda}")));
        }
        Ok(PsAuxPair { gamma, lambda })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("stable index must lie in (0,1), got {alpha}")));
    }
    Ok(())
}

/// One PS(α) draw.
pub fn ps_sample(alpha: f64, rng: &mut RngStream) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(ps_sample_log(alpha, rng).exp())
}

/// Natural log of one PS(α) draw (Kanter's representation, evaluated in
/// log space so tiny α cannot overflow).
///
/// `A = sin(αU) / sin(U)^{1/α} · (sin((1−α)U) / E)^{(1−α)/α}` with
/// `U ~ Uniform(0, π)` and `E ~ Exp(1)`.
pub fn ps_sample_log(alpha: f64, rng: &mut RngStream) -> f64 {
    let u = PI * rng.open01();
    let e = rng.exp1();
    (alpha * u).sin().ln() - (u.sin().ln()) / alpha
        + (1.0 - alpha) / alpha * (((1.0 - alpha) * u).sin().ln() - e.ln())
}

/// `sin(πx)` with full relative accuracy near both `x = 0` and `x = 1`.
#[inline]
fn sin_pi(x: f64) -> f64 {
    let r = if x > 0.5 { 1.0 - x } else { x };
    (PI * r).sin()
}

/// `ln c(λ)` for the auxiliary density. Endpoints return the analytic
/// limits: `c(0) = α^{1/(1−α)}(1−α)/α`, `c(1) = +∞`.
#[inline]
pub fn ps_aux_log_c(lambda: f64, alpha: f64) -> f64 {
    let inv = 1.0 / (1.0 - alpha);
    if lambda <= 0.0 {
        return inv * alpha.ln() + (1.0 - alpha).ln() - alpha.ln();
    }
    if lambda >= 1.0 {
        return f64::INFINITY;
    }
    let s_a = (alpha * PI * lambda).sin().ln();
    inv * (s_a - sin_pi(lambda).ln()) + ((1.0 - alpha) * PI * lambda).sin().ln() - s_a
}

pub fn ps_aux_c(lambda: f64, alpha: f64) -> f64 {
    ps_aux_log_c(lambda, alpha).exp()
}

/// Log of the joint density `p(γ, λ | α)`, parameterized by `ln γ`.
#[inline]
pub fn ps_aux_logdensity_lg(log_gamma: f64, lambda: f64, alpha: f64) -> f64 {
    let lc = ps_aux_log_c(lambda, alpha);
    if !lc.is_finite() || !log_gamma.is_finite() {
        return f64::NEG_INFINITY;
    }
    let r = alpha / (1.0 - alpha);
    alpha.ln() - (1.0 - alpha).ln() - log_gamma / (1.0 - alpha) + lc - (lc - r * log_gamma).exp()
}

pub fn ps_aux_joint_logdensity(pair: PsAuxPair, alpha: f64) -> f64 {
    if !(pair.gamma > 0.0) {
        return f64::NEG_INFINITY;
    }
    ps_aux_logdensity_lg(pair.gamma.ln(), pair.lambda, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn c_examples() {
        assert_abs_diff_eq!(ps_aux_c(0.5, 0.5), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(ps_aux_c(0.0, 0.5), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(ps_aux_c(1e-9, 0.5), 0.25, epsilon = 1e-9);
        assert_eq!(ps_aux_c(1.0, 0.5), f64::INFINITY);
    }

    #[test]
    fn c_finite_positive_on_grid() {
        for i in 1..1000 {
            let lam = i as f64 * 1e-3;
            for k in 1..1000 {
                let a = k as f64 * 1e-3;
                let c = ps_aux_c(lam, a);
                assert!(c.is_finite() && c > 0.0, "c({lam},{a}) = {c}");
            }
        }
    }

    #[test]
    fn density_vanishes_at_zero_gamma() {
        for &a in &[0.1, 0.5, 0.9] {
            for &l in &[0.1, 0.5, 0.9] {
                assert!(ps_aux_logdensity_lg(-700.0, l, a) < -1e3);
                assert_eq!(ps_aux_joint_logdensity(PsAuxPair { gamma: 0.0, lambda: l }, a), f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn sampler_rejects_bad_alpha() {
        let mut r = RngStream::new(0, 0);
        assert!(ps_sample(0.0, &mut r).is_err());
        assert!(ps_sample(1.0, &mut r).is_err());
        assert!(ps_sample(0.5, &mut r).unwrap() > 0.0);
    }

    #[test]
    fn laplace_transform_half() {
        let mut r = RngStream::new(2024, 0);
        let n = 200_000;
        let vals: Vec<f64> = (0..n).map(|_| (-ps_sample(0.5, &mut r).unwrap()).exp()).collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!((m - (-1.0f64).exp()).abs() < 3.0 * se, "{m}");
    }
}

//! Densities, distribution functions and samplers.

mod gev;
mod normal;
mod stable;
mod truncnorm;

pub use gev::{gev_cdf, gev_logcdf, gev_logpdf, gev_quantile, gev_sample, reduce as gev_reduce, GevParams, XI_EPS};
pub use normal::{normal_logpdf, std_normal_cdf, std_normal_quantile};
pub use stable::{
    ps_aux_c, ps_aux_joint_logdensity, ps_aux_log_c, ps_aux_logdensity_lg, ps_sample, ps_sample_log, PsAuxPair,
};
pub use truncnorm::{
    truncated_normal_log_normalizer, truncated_normal_logpdf, truncated_normal_sample,
};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Draw an index with probability proportional to `pi`.
pub fn categorical_sample(pi: &[f64], rng: &mut RngStream) -> Result<usize> {
    if pi.is_empty() || pi.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::domain("categorical weights must be finite and nonnegative"));
    }
    let total: f64 = pi.iter().sum();
    if !(total > 0.0) {
        return Err(Error::domain("categorical weights are all zero"));
    }
    let u = rng.open01() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in pi.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return Ok(j);
            }
        }
    }
    Ok(last)
}

/// Categorical draw from unnormalized log weights (log-sum-exp internally).
pub fn categorical_sample_log(log_w: &[f64], rng: &mut RngStream) -> Result<usize> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::domain("categorical log weights have no finite maximum"));
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    categorical_sample(&w, rng)
}

/// `ln Σ exp(x_i)`; `-∞` for an empty or all-`-∞` input.
#[inline]
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_degenerate_cases() {
        let mut r = RngStream::new(9, 0);
        for _ in 0..1000 {
            assert_eq!(categorical_sample(&[1.0, 0.0, 0.0], &mut r).unwrap(), 0);
            assert_eq!(categorical_sample(&[1.0], &mut r).unwrap(), 0);
        }
        assert!(categorical_sample(&[0.0, 0.0], &mut r).is_err());
        assert!(categorical_sample(&[], &mut r).is_err());
    }

    #[test]
    fn categorical_frequencies() {
        let mut r = RngStream::new(10, 0);
        let pi = [0.5, 0.3, 0.2];
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[categorical_sample(&pi, &mut r).unwrap()] += 1;
        }
        for j in 0..3 {
            let f = counts[j] as f64 / n as f64;
            let se = (pi[j] * (1.0 - pi[j]) / n as f64).sqrt();
            assert!((f - pi[j]).abs() < 3.0 * se, "{j}: {f}");
        }
    }

    #[test]
    fn log_sum_exp_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
    }
}

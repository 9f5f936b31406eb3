//! Normal distribution truncated to an interval.

use super::normal::{std_normal_cdf, std_normal_quantile};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use std::f64::consts::PI;

fn check(sd: f64, lo: f64, hi: f64) -> Result<()> {
    if !(sd > 0.0) {
        return Err(Error::domain(format!("standard deviation must be positive, got {sd}")));
    }
    if !(lo < hi) {
        return Err(Error::domain(format!("empty truncation interval [{lo}, {hi}]")));
    }
    Ok(())
}

/// `ln(Φ(b) − Φ(a))` for standardized bounds, accurate in either tail.
pub fn log_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        return log_mass(-b, -a);
    }
    // both bounds now have a <= 0, so Φ(a) is computed without cancellation
    let pa = std_normal_cdf(a);
    let pb = std_normal_cdf(b);
    if pb - pa > 0.0 {
        (pb - pa).ln()
    } else {
        // interval deep in the left tail: Φ(b)-Φ(a) ≈ φ(b)/|b| · (1 - e^{...})
        let lb = -0.5 * b * b - (2.0 * PI).sqrt().ln() - (-b).ln();
        let la = -0.5 * a * a - (2.0 * PI).sqrt().ln() - (-a).ln();
        lb + (-(la - lb).exp()).ln_1p()
    }
}

/// Log normalizer `ln P(lo ≤ N(mean, sd²) ≤ hi)`.
pub fn truncated_normal_log_normalizer(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    log_mass((lo - mean) / sd, (hi - mean) / sd)
}

pub fn truncated_normal_logpdf(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if !(x >= lo && x <= hi) || !(sd > 0.0) {
        return f64::NEG_INFINITY;
    }
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln() - truncated_normal_log_normalizer(mean, sd, lo, hi)
}

/// Draw from `N(mean, sd²)` conditioned on `[lo, hi]`.
pub fn truncated_normal_sample(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut RngStream) -> Result<f64> {
    check(sd, lo, hi)?;
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let z = std_truncated(a, b, rng);
    Ok((mean + sd * z).clamp(lo, hi))
}

fn std_truncated(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    if a > 0.0 {
        return -std_truncated(-b, -a, rng);
    }
    // now a <= 0
    if b < -30.0 {
        // far left tail: mirror into the right tail and use exponential rejection
        return -tail_rejection(-b, -a, rng);
    }
    let pa = std_normal_cdf(a);
    let pb = std_normal_cdf(b);
    let u = pa + rng.open01() * (pb - pa);
    std_normal_quantile(u).clamp(a, b)
}

/// Robert (1995) exponential proposal for `N(0,1)` restricted to `[a, b]`, `a > 0`.
fn tail_rejection(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let z = a + rng.exp1() / rate;
        if z > b {
            continue;
        }
        if rng.open01().ln() <= -0.5 * (z - rate) * (z - rate) {
            return z;
        }
    }
}

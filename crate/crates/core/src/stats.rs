//! Small statistical utilities used by tests, diagnostics and ground truths.

use crate::distributions::std_normal_cdf;
use crate::quad::integrate;

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut x = sample.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in x.iter().enumerate() {
        let f = cdf(*v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic Kolmogorov tail probability with Stephens' small-sample correction.
pub fn kolmogorov_pvalue(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    let lam = (s + 0.12 + 0.11 / s) * d;
    if lam < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lam * lam).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> (f64, f64) {
    let d = ks_statistic(sample, cdf);
    (d, kolmogorov_pvalue(d, sample.len() as f64))
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    y.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    (d, kolmogorov_pvalue(d, ne))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Standard error of the mean of an i.i.d. sample.
pub fn mc_se(x: &[f64]) -> f64 {
    (variance(x) / x.len() as f64).sqrt()
}

/// Batch-means standard error of the mean of a correlated series.
pub fn batch_means_se(x: &[f64], batches: usize) -> f64 {
    let b = batches.max(2).min(x.len());
    let size = x.len() / b;
    let means: Vec<f64> = (0..b).map(|k| mean(&x[k * size..(k + 1) * size])).collect();
    (variance(&means) / b as f64).sqrt()
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bivariate standard normal CDF `P(Z₁ ≤ a, Z₂ ≤ b)` with correlation `rho`.
pub fn bivariate_normal_cdf(a: f64, b: f64, rho: f64) -> f64 {
    if rho >= 1.0 {
        return std_normal_cdf(a.min(b));
    }
    if rho <= -1.0 {
        return (std_normal_cdf(a) - std_normal_cdf(-b)).max(0.0);
    }
    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        return 0.0;
    }
    if a == f64::INFINITY {
        return std_normal_cdf(b);
    }
    if b == f64::INFINITY {
        return std_normal_cdf(a);
    }
    // Plackett's identity with r = sin θ
    let top = rho.asin();
    let f = |t: f64| {
        let (s, c) = t.sin_cos();
        (-(a * a - 2.0 * a * b * s + b * b) / (2.0 * c * c)).exp()
    };
    let v = std_normal_cdf(a) * std_normal_cdf(b) + integrate(f, 0.0, top, 8) / (2.0 * std::f64::consts::PI);
    v.clamp(0.0, 1.0)
}

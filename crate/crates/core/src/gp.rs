//! Gaussian-process and constant priors for the GEV parameter surfaces.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::distributions::normal_logpdf;
use crate::geometry::Site;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Matérn smoothness. Only the half-integer cases with closed forms are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Smoothness {
    #[default]
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1.5")]
    ThreeHalves,
    #[serde(rename = "2.5")]
    FiveHalves,
}

impl Smoothness {
    pub fn value(&self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    pub fn from_value(nu: f64) -> Result<Self> {
        match nu {
            x if x == 0.5 => Ok(Smoothness::Half),
            x if x == 1.5 => Ok(Smoothness::ThreeHalves),
            x if x == 2.5 => Ok(Smoothness::FiveHalves),
            _ => Err(Error::domain(format!("unsupported Matérn smoothness {nu}; use 0.5, 1.5 or 2.5"))),
        }
    }
}

/// Mean `x(s)ᵀβ` with `x(s) = (1, s.x, s.y)` and a Matérn covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub beta: [f64; 3],
    pub variance: f64,
    pub range: f64,
    pub smoothness: Smoothness,
}

impl GpHyper {
    pub fn new(beta: [f64; 3], variance: f64, range: f64, smoothness: Smoothness) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::domain(format!("GP variance must be positive, got {variance}")));
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::domain(format!("GP range must be positive, got {range}")));
        }
        Ok(GpHyper { beta, variance, range, smoothness })
    }

    pub fn mean_at(&self, s: &Site) -> f64 {
        self.beta[0] + self.beta[1] * s.x + self.beta[2] * s.y
    }
}

pub fn matern_corr(r: f64, nu: Smoothness) -> f64 {
    match nu {
        Smoothness::Half => (-r).exp(),
        Smoothness::ThreeHalves => {
            let a = 3f64.sqrt() * r;
            (1.0 + a) * (-a).exp()
        }
        Smoothness::FiveHalves => {
            let a = 5f64.sqrt() * r;
            (1.0 + a + a * a / 3.0) * (-a).exp()
        }
    }
}

pub fn matern_cov(d: f64, h: &GpHyper) -> f64 {
    h.variance * matern_corr(d / h.range, h.smoothness)
}

pub fn covariance_matrix(a: &[Site], b: &[Site], h: &GpHyper) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| matern_cov(a[i].dist(&b[j]), h))
}

fn try_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let scale = m.diagonal().max().sqrt();
    let c = Cholesky::new(m)?;
    let ok = c.l_dirty().diagonal().iter().all(|&d| d.is_finite() && d > 1e-12 * scale);
    ok.then_some(c)
}

/// Cholesky factor of a covariance matrix, retrying once with `1e-10·variance`
/// added to the diagonal when `allow_jitter` is set.
pub fn factor(cov: DMatrix<f64>, variance: f64, allow_jitter: bool) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = try_cholesky(cov.clone()) {
        return Ok(c);
    }
    if allow_jitter {
        let mut m = cov;
        for i in 0..m.nrows() {
            m[(i, i)] += 1e-10 * variance;
        }
        if let Some(c) = try_cholesky(m) {
            return Ok(c);
        }
    }
    Err(Error::Numerical("covariance matrix is not positive definite".into()))
}

fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn mean_vector(sites: &[Site], h: &GpHyper) -> DVector<f64> {
    DVector::from_iterator(sites.len(), sites.iter().map(|s| h.mean_at(s)))
}

/// Multivariate normal log density of a field under the GP prior.
pub fn gp_logprior(values: &[f64], sites: &[Site], h: &GpHyper) -> Result<f64> {
    if values.len() != sites.len() {
        return Err(Error::domain("field length does not match site count"));
    }
    let c = factor(covariance_matrix(sites, sites, h), h.variance, true)?;
    let r = DVector::from_column_slice(values) - mean_vector(sites, h);
    let z = c.l().solve_lower_triangular(&r).expect("triangular solve");
    let n = values.len() as f64;
    Ok(-0.5 * (n * LN_2PI + log_det(&c) + z.norm_squared()))
}

/// Conditional (kriging) mean and covariance of the field at `new_sites`.
pub fn gp_conditional(
    new_sites: &[Site],
    observed: &[f64],
    sites: &[Site],
    h: &GpHyper,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if observed.len() != sites.len() {
        return Err(Error::domain("field length does not match site count"));
    }
    let c = factor(covariance_matrix(sites, sites, h), h.variance, true)?;
    let k = covariance_matrix(sites, new_sites, h);
    let r = DVector::from_column_slice(observed) - mean_vector(sites, h);
    let alpha = c.solve(&r);
    let mean = mean_vector(new_sites, h) + k.transpose() * alpha;
    let v = c.l().solve_lower_triangular(&k).expect("triangular solve");
    let cov = covariance_matrix(new_sites, new_sites, h) - v.transpose() * v;
    Ok((mean.iter().copied().collect(), cov))
}

/// Cached precision of a GP field for single-site Metropolis updates.
#[derive(Debug, Clone)]
pub struct GpPrecision {
    pub precision: DMatrix<f64>,
    pub log_det: f64,
    pub mean: DVector<f64>,
}

impl GpPrecision {
    pub fn new(sites: &[Site], h: &GpHyper) -> Result<Self> {
        let c = factor(covariance_matrix(sites, sites, h), h.variance, true)?;
        let ld = log_det(&c);
        Ok(GpPrecision { precision: c.inverse(), log_det: ld, mean: mean_vector(sites, h) })
    }

    pub fn logpdf(&self, values: &[f64]) -> f64 {
        let r = DVector::from_column_slice(values) - &self.mean;
        let q = (&self.precision * &r).dot(&r);
        -0.5 * (values.len() as f64 * LN_2PI + self.log_det + q)
    }

    /// Change in log density when coordinate `i` moves by `d`.
    pub fn delta(&self, values: &[f64], i: usize, d: f64) -> f64 {
        let mut qr = 0.0;
        for (j, v) in values.iter().enumerate() {
            qr += self.precision[(i, j)] * (v - self.mean[j]);
        }
        -(d * qr) - 0.5 * self.precision[(i, i)] * d * d
    }
}

pub fn inv_gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

pub fn half_normal_logpdf(x: f64, scale: f64) -> f64 {
    if !(x >= 0.0) {
        return f64::NEG_INFINITY;
    }
    std::f64::consts::LN_2 + normal_logpdf(x, 0.0, scale)
}

pub fn unit_interval_logpdf(x: f64) -> f64 {
    if x > 0.0 && x < 1.0 {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Priors for the constant-surface mode and the residual dependence parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantPriors {
    pub mu_sd: f64,
    pub log_sigma_sd: f64,
    pub xi_sd: f64,
    pub tau_shape: f64,
    pub tau_scale: f64,
}

impl Default for ConstantPriors {
    fn default() -> Self {
        ConstantPriors { mu_sd: 10.0, log_sigma_sd: 1.0, xi_sd: 0.25, tau_shape: 0.1, tau_scale: 0.1 }
    }
}

pub fn constant_priors() -> ConstantPriors {
    ConstantPriors::default()
}

impl ConstantPriors {
    pub fn log_mu(&self, mu: f64) -> f64 {
        normal_logpdf(mu, 0.0, self.mu_sd)
    }

    pub fn log_log_sigma(&self, ls: f64) -> f64 {
        normal_logpdf(ls, 0.0, self.log_sigma_sd)
    }

    pub fn log_xi(&self, xi: f64) -> f64 {
        normal_logpdf(xi, 0.0, self.xi_sd)
    }

    /// Prior sd of the GEV component `k` (0 = μ, 1 = log σ, 2 = ξ).
    pub fn sd(&self, k: usize) -> f64 {
        [self.mu_sd, self.log_sigma_sd, self.xi_sd][k]
    }

    pub fn log_tau(&self, tau: f64) -> f64 {
        inv_gamma_logpdf(tau, self.tau_shape, self.tau_scale)
    }

    pub fn log_alpha(&self, alpha: f64) -> f64 {
        unit_interval_logpdf(alpha)
    }

    pub fn log_q(&self, q: f64) -> f64 {
        if (0.0..=1.0).contains(&q) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Hyperpriors for a GP surface: `β ~ N(0, sd²)` per coefficient,
/// variance `~ InvGamma(shape, scale)`, range `~ HalfNormal(range_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpHyperPrior {
    pub variance_shape: f64,
    pub variance_scale: f64,
    /// Half-normal scale for the range; non-positive means the domain diameter.
    pub range_scale: f64,
    pub smoothness: Smoothness,
}

impl Default for GpHyperPrior {
    fn default() -> Self {
        GpHyperPrior { variance_shape: 2.0, variance_scale: 1.0, range_scale: 0.0, smoothness: Smoothness::Half }
    }
}

impl GpHyperPrior {
    pub fn log_density(&self, h: &GpHyper, diameter: f64) -> f64 {
        let rs = if self.range_scale > 0.0 { self.range_scale } else { diameter };
        inv_gamma_logpdf(h.variance, self.variance_shape, self.variance_scale) + half_normal_logpdf(h.range, rs)
    }
}

pub fn diameter(sites: &[Site]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in sites.iter().enumerate() {
        for b in &sites[i + 1..] {
            d = d.max(a.dist(b));
        }
    }
    if d > 0.0 {
        d
    } else {
        1.0
    }
}

/// Spatial fields of GEV parameters over a fixed site list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevSurface {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub xi: Vec<f64>,
    pub mode: SurfaceMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceMode {
    #[default]
    Constant,
    Gp,
}

impl GevSurface {
    pub fn constant(n: usize, mu: f64, log_sigma: f64, xi: f64) -> Self {
        GevSurface { mu: vec![mu; n], log_sigma: vec![log_sigma; n], xi: vec![xi; n], mode: SurfaceMode::Constant }
    }

    pub fn n_sites(&self) -> usize {
        self.mu.len()
    }

    pub fn params(&self, i: usize) -> crate::distributions::GevParams {
        crate::distributions::GevParams { mu: self.mu[i], sigma: self.log_sigma[i].exp(), xi: self.xi[i] }
    }

    pub fn field(&self, k: usize) -> &[f64] {
        match k {
            0 => &self.mu,
            1 => &self.log_sigma,
            _ => &self.xi,
        }
    }

    pub fn field_mut(&mut self, k: usize) -> &mut Vec<f64> {
        match k {
            0 => &mut self.mu,
            1 => &mut self.log_sigma,
            _ => &mut self.xi,
        }
    }
}

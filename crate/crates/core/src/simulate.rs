//! Generators for the six data-generating settings, with exact ground truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    categorical_sample, gev_quantile, ps_sample_log, std_normal_cdf, std_normal_quantile, GevParams,
};
use crate::geometry::{grid, kernel_weights, KnotSet, Site, WeightMatrix};
use crate::gp::{covariance_matrix, factor, GpHyper, Smoothness};
use crate::models::{log_theta_pow, HevpSpec, ResidualModel, SbAtoms, Q_EPS};
use crate::quad::gauss_legendre;
use crate::rng::RngStream;
use crate::stats::bivariate_normal_cdf;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Ms,
    Sb,
    Gp,
    St,
    Invms,
    Max,
}

impl std::str::FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ms" | "hevp" => Ok(Setting::Ms),
            "sb" => Ok(Setting::Sb),
            "gp" => Ok(Setting::Gp),
            "st" | "skew-t" | "skewt" => Ok(Setting::St),
            "invms" => Ok(Setting::Invms),
            "max" | "mm" => Ok(Setting::Max),
            other => Err(Error::config("simulation.setting", format!("unknown setting `{other}`"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Setting::Ms => "ms",
            Setting::Sb => "sb",
            Setting::Gp => "gp",
            Setting::St => "st",
            Setting::Invms => "invms",
            Setting::Max => "max",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { nx: 7, ny: 7, x0: 1.0, x1: 7.0, y0: 1.0, y1: 7.0 }
    }
}

impl GridSpec {
    /// Unit-spaced `n × n` grid.
    pub fn square(n: usize) -> Self {
        GridSpec { nx: n, ny: n, x0: 1.0, x1: n as f64, y0: 1.0, y1: n as f64 }
    }
}

/// Simulation settings. Defaults reproduce the 7×7, `T = 50` study design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub setting: Setting,
    pub grid: GridSpec,
    /// Explicit sites; overrides `grid` when non-empty.
    pub sites: Vec<[f64; 2]>,
    pub replicates: usize,
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    pub alpha: f64,
    pub tau: f64,
    pub n_atoms: usize,
    pub pi: Vec<f64>,
    pub q: f64,
    pub gp_mean: f64,
    pub gp_variance: f64,
    pub gp_range: f64,
    pub skew_lambda: f64,
    pub skew_mu: f64,
    pub ig_shape: f64,
    pub ig_scale: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            setting: Setting::Ms,
            grid: GridSpec::default(),
            sites: Vec::new(),
            replicates: 50,
            mu: 0.1,
            sigma: 1.0,
            xi: 0.1,
            alpha: 0.3,
            tau: 1.0,
            n_atoms: 3,
            pi: vec![0.5, 0.3, 0.2],
            q: 0.5,
            gp_mean: 0.1,
            gp_variance: 1.0,
            gp_range: 1.0,
            skew_lambda: 3.0,
            skew_mu: 1.0,
            ig_shape: 4.0,
            ig_scale: 1.0,
            seed: 0,
        }
    }
}

fn cfg_err(field: &str, msg: impl Into<String>) -> Error {
    Error::config(format!("simulation.{field}"), msg)
}

impl SimConfig {
    pub fn for_setting(setting: Setting) -> Self {
        SimConfig { setting, ..Default::default() }
    }

    pub fn site_list(&self) -> Vec<Site> {
        if self.sites.is_empty() {
            let g = &self.grid;
            grid(g.nx, g.ny, g.x0, g.x1, g.y0, g.y1)
        } else {
            self.sites.iter().map(|p| Site::new(p[0], p[1])).collect()
        }
    }

    pub fn gev(&self) -> GevParams {
        GevParams { mu: self.mu, sigma: self.sigma, xi: self.xi }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(cfg_err("replicates", "must be at least 1"));
        }
        if self.sites.is_empty() && (self.grid.nx == 0 || self.grid.ny == 0) {
            return Err(cfg_err("grid", "grid must have at least one site"));
        }
        if self.site_list().iter().any(|s| !s.is_finite()) {
            return Err(cfg_err("sites", "coordinates must be finite"));
        }
        if !(self.sigma > 0.0) || !self.mu.is_finite() || !self.xi.is_finite() {
            return Err(cfg_err("sigma", "GEV parameters must be finite with sigma > 0"));
        }
        match self.setting {
            Setting::Ms | Setting::Sb | Setting::Invms | Setting::Max => {
                if !(self.alpha > 0.0 && self.alpha < 1.0) {
                    return Err(cfg_err("alpha", "must lie in (0,1)"));
                }
                if !(self.tau > 0.0) {
                    return Err(cfg_err("tau", "must be positive"));
                }
            }
            _ => {}
        }
        if self.setting == Setting::Sb {
            if self.n_atoms == 0 {
                return Err(cfg_err("n_atoms", "must be at least 1"));
            }
            if self.pi.len() != self.n_atoms {
                return Err(cfg_err("pi", format!("expected {} weights, got {}", self.n_atoms, self.pi.len())));
            }
            let s: f64 = self.pi.iter().sum();
            if self.pi.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(cfg_err("pi", "weights must be nonnegative and sum to 1"));
            }
        }
        if self.setting == Setting::Max && !(0.0..=1.0).contains(&self.q) {
            return Err(cfg_err("q", "must lie in [0,1]"));
        }
        if matches!(self.setting, Setting::Gp | Setting::St | Setting::Max)
            && !(self.gp_variance > 0.0 && self.gp_range > 0.0)
        {
            return Err(cfg_err("gp_range", "Gaussian field variance and range must be positive"));
        }
        if self.setting == Setting::St && !(self.ig_shape > 0.0 && self.ig_scale > 0.0) {
            return Err(cfg_err("ig_shape", "inverse-gamma parameters must be positive"));
        }
        Ok(())
    }
}

/// A `T × n` response matrix on a fixed site list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sites: Vec<Site>,
    /// Row-major, `y[t * n + i]`.
    pub y: Vec<f64>,
    pub n_times: usize,
    pub tag: String,
}

impl Dataset {
    pub fn new(sites: Vec<Site>, y: Vec<f64>, n_times: usize, tag: impl Into<String>) -> Result<Self> {
        if y.len() != sites.len() * n_times {
            return Err(Error::Data(format!(
                "{} values for {} sites × {} times",
                y.len(),
                sites.len(),
                n_times
            )));
        }
        if let Some(k) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at site {} time {}", k % sites.len(), k / sites.len())));
        }
        Ok(Dataset { sites, y, n_times, tag: tag.into() })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.y[t * self.sites.len() + i]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_times).map(|t| self.get(t, i)).collect()
    }

    /// Restrict to a subset of sites, in the given order.
    pub fn select_sites(&self, idx: &[usize]) -> Dataset {
        let sites = idx.iter().map(|&i| self.sites[i]).collect();
        let mut y = Vec::with_capacity(idx.len() * self.n_times);
        for t in 0..self.n_times {
            for &i in idx {
                y.push(self.get(t, i));
            }
        }
        Dataset { sites, y, n_times: self.n_times, tag: self.tag.clone() }
    }
}

/// Exact marginal quantiles and finite-level dependence of a setting.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    /// Max-stable residual with GEV margins; `inverted` flips to the inverted process.
    MaxStable { gev: GevParams, residual: ResidualModel, inverted: bool },
    Gaussian { mean: f64, sd: f64, corr: Vec<f64>, n: usize },
    SkewT(SkewT),
    MaxMixture { gev: GevParams, hevp: HevpSpec, q: f64, corr: Vec<f64>, n: usize },
}

/// `P{Y_i > y, Y_j > y}` ratio helper: `[1 − 2u + C(u,u)]/(1 − u)` from `ln C`.
fn chi_from_log_c(u: f64, log_c: f64) -> f64 {
    ((2.0 * (1.0 - u) + log_c.exp_m1()) / (1.0 - u)).clamp(0.0, 1.0)
}

fn bisect<F: Fn(f64) -> f64>(f: F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    while f(lo) > target {
        lo -= 2.0 * (hi - lo).max(1.0);
    }
    while f(hi) < target {
        hi += 2.0 * (hi - lo).max(1.0);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl GroundTruth {
    pub fn quantile(&self, site: usize, kappa: f64) -> Result<f64> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::domain(format!("level must lie in (0,1), got {kappa}")));
        }
        match self {
            GroundTruth::MaxStable { gev, residual, inverted } => {
                if *inverted {
                    // Y is decreasing in X: Q_Y(κ) = g(Q_X(1 − κ))
                    let lx = residual.marginal(site).log_quantile(1.0 - kappa)?;
                    Ok(gev.from_frechet_log(-lx))
                } else {
                    let lx = residual.marginal(site).log_quantile(kappa)?;
                    Ok(gev.from_frechet_log(lx))
                }
            }
            GroundTruth::Gaussian { mean, sd, .. } => Ok(mean + sd * std_normal_quantile(kappa)),
            GroundTruth::SkewT(st) => Ok(st.quantile(kappa)),
            GroundTruth::MaxMixture { gev, q, .. } => {
                let q = *q;
                if q >= 1.0 - Q_EPS || q <= Q_EPS {
                    return gev_quantile(kappa, gev);
                }
                let target = kappa.ln();
                let f = |lc: f64| mm_marginal_log_cdf(lc, q);
                Ok(gev.from_frechet_log(bisect(f, target, -5.0, 5.0)))
            }
        }
    }

    /// Finite-level upper-tail dependence between sites `i` and `j`.
    pub fn chi(&self, i: usize, j: usize, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::domain(format!("level must lie in (0,1), got {u}")));
        }
        match self {
            GroundTruth::MaxStable { residual, inverted, .. } => {
                if *inverted {
                    let ci = residual.marginal(i).log_quantile(1.0 - u)?;
                    let cj = residual.marginal(j).log_quantile(1.0 - u)?;
                    let lc = residual.log_cdf(&[ci, cj], &[i, j]);
                    Ok((lc.exp() / (1.0 - u)).clamp(0.0, 1.0))
                } else {
                    residual.chi_u(i, j, u)
                }
            }
            GroundTruth::Gaussian { corr, n, .. } => {
                let z = std_normal_quantile(u);
                let rho = corr[i * n + j];
                Ok((bivariate_normal_cdf(-z, -z, rho) / (1.0 - u)).clamp(0.0, 1.0))
            }
            GroundTruth::SkewT(st) => Ok(st.chi(st.corr[i * st.n + j], u)),
            GroundTruth::MaxMixture { hevp, q, corr, n, .. } => {
                let q = *q;
                let model = ResidualModel::Hevp(hevp.clone());
                if q >= 1.0 - Q_EPS {
                    return model.chi_u(i, j, u);
                }
                let rho = corr[i * n + j];
                let log_joint = if q <= Q_EPS {
                    gauss_frechet_log_joint(-(-u.ln()).ln(), rho)
                } else {
                    let lc = bisect(|lc| mm_marginal_log_cdf(lc, q), u.ln(), -5.0, 5.0);
                    let lc1 = (lc - q.ln()) / q;
                    let lc2 = (lc - (1.0 - q).ln()) / (1.0 - q);
                    model.log_cdf(&[lc1, lc1], &[i, j]) + gauss_frechet_log_joint(lc2, rho)
                };
                Ok(chi_from_log_c(u, log_joint))
            }
        }
    }
}

/// `ln F(c)` of `max{qX₁^q, (1−q)X₂^{1−q}}` with unit Fréchet `X₁, X₂`.
fn mm_marginal_log_cdf(lc: f64, q: f64) -> f64 {
    -(-(lc - q.ln()) / q).exp() - (-(lc - (1.0 - q).ln()) / (1.0 - q)).exp()
}

/// `ln P{X_i < c, X_j < c}` for a Gaussian copula with unit Fréchet margins.
fn gauss_frechet_log_joint(lc: f64, rho: f64) -> f64 {
    // Φ(z) = exp(−1/c); P(both ≤ z) = 1 − 2Φ(−z) + Φ₂(−z,−z)
    let u = (-(-lc).exp()).exp();
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let z = std_normal_quantile(u.min(1.0 - 1e-16));
    let tail = 2.0 * std_normal_cdf(-z) - bivariate_normal_cdf(-z, -z, rho);
    (-tail).ln_1p()
}

/// Probability integral transform of a standard normal value to the log of a
/// unit Fréchet value: `ln X = −ln(−ln Φ(z))`.
pub fn gaussian_to_log_frechet(z: f64) -> f64 {
    let log_phi = if z < 0.0 { std_normal_cdf(z).ln() } else { (-std_normal_cdf(-z)).ln_1p() };
    -(-log_phi).ln()
}

/// Quadrature ground truth for the skew-t process
/// `Y = μ + λσ|Z| + σe`, `σ² ~ InvGamma(a, b)`.
#[derive(Debug, Clone)]
pub struct SkewT {
    pub mu: f64,
    pub lambda: f64,
    /// Nodes `(σ, |Z|, weight)`.
    nodes: Vec<(f64, f64, f64)>,
    pub corr: Vec<f64>,
    pub n: usize,
}

impl SkewT {
    pub fn new(mu: f64, lambda: f64, shape: f64, scale: f64, corr: Vec<f64>, n: usize) -> Self {
        let (x, w) = gauss_legendre(20);
        // σ² = 1/g with g ~ Gamma(shape, rate = scale); integrate g over [0, g_max]
        let g_max = (shape + 40.0 * shape.sqrt() + 40.0) / scale;
        let ln_norm = shape * scale.ln() - statrs::function::gamma::ln_gamma(shape);
        let panels = 24;
        let mut g_nodes = Vec::new();
        for p in 0..panels {
            let (a, b) = (g_max * p as f64 / panels as f64, g_max * (p + 1) as f64 / panels as f64);
            for (xi, wi) in x.iter().zip(&w) {
                let g = 0.5 * (b - a) * xi + 0.5 * (a + b);
                let dens = (ln_norm + (shape - 1.0) * g.ln() - scale * g).exp();
                g_nodes.push((1.0 / g.sqrt(), 0.5 * (b - a) * wi * dens));
            }
        }
        let z_max = 9.0;
        let mut z_nodes = Vec::new();
        for p in 0..6 {
            let (a, b) = (z_max * p as f64 / 6.0, z_max * (p + 1) as f64 / 6.0);
            for (xi, wi) in x.iter().zip(&w) {
                let z = 0.5 * (b - a) * xi + 0.5 * (a + b);
                let dens = 2.0 * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                z_nodes.push((z, 0.5 * (b - a) * wi * dens));
            }
        }
        let mut nodes = Vec::with_capacity(g_nodes.len() * z_nodes.len());
        for &(s, ws) in &g_nodes {
            for &(z, wz) in &z_nodes {
                let w = ws * wz;
                if w > 1e-300 {
                    nodes.push((s, z, w));
                }
            }
        }
        SkewT { mu, lambda, nodes, corr, n }
    }

    fn standardized(&self, y: f64, s: f64, z: f64) -> f64 {
        (y - self.mu) / s - self.lambda * z
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.nodes.iter().map(|&(s, z, w)| w * std_normal_cdf(self.standardized(y, s, z))).sum()
    }

    pub fn quantile(&self, kappa: f64) -> f64 {
        bisect(|y| self.cdf(y), kappa, self.mu - 5.0, self.mu + 5.0)
    }

    pub fn chi(&self, rho: f64, u: f64) -> f64 {
        let y = self.quantile(u);
        let both: f64 = self
            .nodes
            .iter()
            .map(|&(s, z, w)| {
                let a = self.standardized(y, s, z);
                w * bivariate_normal_cdf(-a, -a, rho)
            })
            .sum();
        (both / (1.0 - u)).clamp(0.0, 1.0)
    }
}

/// Simulated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: Dataset,
    pub truth: GroundTruth,
    /// Atoms drawn for the SB setting.
    pub atoms: Option<SbAtoms>,
}

fn exp_corr(sites: &[Site], range: f64) -> Vec<f64> {
    let n = sites.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = (-sites[i].dist(&sites[j]) / range).exp();
        }
    }
    c
}

/// Lower Cholesky factor of the exponential covariance, row-major.
fn gaussian_factor(sites: &[Site], variance: f64, range: f64) -> Result<Vec<f64>> {
    let h = GpHyper::new([0.0; 3], variance, range, Smoothness::Half)?;
    let c = factor(covariance_matrix(sites, sites, &h), variance, true)?;
    let l = c.l();
    let n = sites.len();
    Ok((0..n * n).map(|k| l[(k / n, k % n)]).collect())
}

fn gaussian_draw(l: &[f64], n: usize, rng: &mut RngStream) -> Vec<f64> {
    let z: Vec<f64> = (0..n).map(|_| rng.std_normal()).collect();
    (0..n).map(|i| (0..=i).map(|k| l[i * n + k] * z[k]).sum()).collect()
}

/// `ln X(s_i)` for one replicate of the max-stable residual with random effects `log_a`.
fn max_stable_log_x(log_a: &[f64], w: &WeightMatrix, alpha: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..w.n_sites())
        .map(|i| {
            // X = U θ with U = E^{−α}: ln X = α(ln S − ln E)
            let ls = log_theta_pow(log_a, w.log_row(i), alpha);
            alpha * (ls - rng.exp1().ln())
        })
        .collect()
}

fn hevp_replicate(w: &WeightMatrix, alpha: f64, rng: &mut RngStream) -> Vec<f64> {
    let log_a: Vec<f64> = (0..w.n_knots()).map(|_| ps_sample_log(alpha, rng)).collect();
    max_stable_log_x(&log_a, w, alpha, rng)
}

fn replicate_streams(seed: u64, stream: u64, t: usize) -> Vec<RngStream> {
    let base = RngStream::new(seed, stream);
    (0..t as u64).map(|k| base.substream(k)).collect()
}

fn weights_for(cfg: &SimConfig, sites: &[Site]) -> Result<WeightMatrix> {
    kernel_weights(sites, &KnotSet::new(sites.to_vec())?, cfg.tau)
}

fn assemble(rows: Vec<Vec<f64>>, sites: Vec<Site>, tag: &str) -> Result<Dataset> {
    let t = rows.len();
    Dataset::new(sites, rows.into_iter().flatten().collect(), t, tag)
}

/// Setting 1: the HEVP max-stable process with GEV margins.
pub fn sim_hevp(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let sites = cfg.site_list();
    let w = weights_for(cfg, &sites)?;
    let gev = cfg.gev();
    let rows: Vec<Vec<f64>> = replicate_streams(cfg.seed, 0, cfg.replicates)
        .into_par_iter()
        .map(|mut rng| hevp_replicate(&w, cfg.alpha, &mut rng).into_iter().map(|lx| gev.from_frechet_log(lx)).collect())
        .collect();
    let truth = GroundTruth::MaxStable {
        gev,
        residual: ResidualModel::Hevp(HevpSpec::new(cfg.alpha, w)?),
        inverted: false,
    };
    Ok(Simulation { data: assemble(rows, sites, "ms")?, truth, atoms: None })
}

/// Setting 2: stick-breaking mixture with atoms drawn once.
pub fn sim_sb(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let sites = cfg.site_list();
    let w = weights_for(cfg, &sites)?;
    let gev = cfg.gev();
    let l = w.n_knots();
    let mut atom_rng = RngStream::new(cfg.seed, 2);
    let log_gamma: Vec<Vec<f64>> =
        (0..cfg.n_atoms).map(|_| (0..l).map(|_| ps_sample_log(cfg.alpha, &mut atom_rng)).collect()).collect();
    let rows: Vec<Vec<f64>> = replicate_streams(cfg.seed, 0, cfg.replicates)
        .into_par_iter()
        .map(|mut rng| {
            let g = categorical_sample(&cfg.pi, &mut rng).expect("validated weights");
            max_stable_log_x(&log_gamma[g], &w, cfg.alpha, &mut rng)
                .into_iter()
                .map(|lx| gev.from_frechet_log(lx))
                .collect()
        })
        .collect();
    let gamma: Vec<Vec<f64>> = log_gamma.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
    let atoms = SbAtoms::new(gamma, cfg.pi.clone())?;
    let truth = GroundTruth::MaxStable {
        gev,
        residual: ResidualModel::Sb { alpha: cfg.alpha, weights: w, atoms: atoms.clone() },
        inverted: false,
    };
    Ok(Simulation { data: assemble(rows, sites, "sb")?, truth, atoms: Some(atoms) })
}

/// Setting 3: Gaussian field with exponential correlation.
pub fn sim_gp(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let sites = cfg.site_list();
    let n = sites.len();
    let l = gaussian_factor(&sites, cfg.gp_variance, cfg.gp_range)?;
    let rows: Vec<Vec<f64>> = replicate_streams(cfg.seed, 1, cfg.replicates)
        .into_par_iter()
        .map(|mut rng| gaussian_draw(&l, n, &mut rng).into_iter().map(|e| cfg.gp_mean + e).collect())
        .collect();
    let truth = GroundTruth::Gaussian {
        mean: cfg.gp_mean,
        sd: cfg.gp_variance.sqrt(),
        corr: exp_corr(&sites, cfg.gp_range),
        n,
    };
    Ok(Simulation { data: assemble(rows, sites, "gp")?, truth, atoms: None })
}

/// Setting 4: skew-t process.
pub fn sim_skew_t(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let sites = cfg.site_list();
    let n = sites.len();
    let l = gaussian_factor(&sites, 1.0, cfg.gp_range)?;
    let rows: Vec<Vec<f64>> = replicate_streams(cfg.seed, 1, cfg.replicates)
        .into_par_iter()
        .map(|mut rng| {
            let s = (1.0 / rng.gamma(cfg.ig_shape, 1.0 / cfg.ig_scale)).sqrt();
            let z = rng.std_normal().abs();
            gaussian_draw(&l, n, &mut rng)
                .into_iter()
                .map(|e| cfg.skew_mu + cfg.skew_lambda * s * z + s * e)
                .collect()
        })
        .collect();
    let truth = GroundTruth::SkewT(SkewT::new(
        cfg.skew_mu,
        cfg.skew_lambda,
        cfg.ig_shape,
        cfg.ig_scale,
        exp_corr(&sites, cfg.gp_range),
        n,
    ));
    Ok(Simulation { data: assemble(rows, sites, "st")?, truth, atoms: None })
}

/// Setting 5: inverted max-stable process.
pub fn sim_inverted_ms(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let sites = cfg.site_list();
    let w = weights_for(cfg, &sites)?;
    let gev = cfg.gev();
    let rows: Vec<Vec<f64>> = replicate_streams(cfg.seed, 0, cfg.replicates)
        .into_par_iter()
        .map(|mut rng| hevp_replicate(&w, cfg.alpha, &mut rng).into_iter().map(|lx| gev.from_frechet_log(-lx)).collect())
        .collect();
    let truth = GroundTruth::MaxStable {
        gev,
        residual: ResidualModel::Hevp(HevpSpec::new(cfg.alpha, w)?),
        inverted: true,
    };
    Ok(Simulation { data: assemble(rows, sites, "invms")?, truth, atoms: None })
}

/// Setting 6: max-mixture of the Setting-1 residual and the Setting-3 field on
/// unit Fréchet margins.
pub fn sim_max_mixture(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let sites = cfg.site_list();
    let n = sites.len();
    let w = weights_for(cfg, &sites)?;
    let gev = cfg.gev();
    let l = gaussian_factor(&sites, 1.0, cfg.gp_range)?;
    let q = cfg.q;
    let streams: Vec<(RngStream, RngStream)> = replicate_streams(cfg.seed, 0, cfg.replicates)
        .into_iter()
        .zip(replicate_streams(cfg.seed, 1, cfg.replicates))
        .collect();
    let rows: Vec<Vec<f64>> = streams
        .into_par_iter()
        .map(|(mut r1, mut r2)| {
            let x1 = hevp_replicate(&w, cfg.alpha, &mut r1);
            let z = gaussian_draw(&l, n, &mut r2);
            x1.into_iter()
                .zip(z)
                .map(|(l1, z)| {
                    let l2 = gaussian_to_log_frechet(z);
                    let lx = if q >= 1.0 - Q_EPS {
                        l1
                    } else if q <= Q_EPS {
                        l2
                    } else {
                        (q.ln() + q * l1).max((1.0 - q).ln() + (1.0 - q) * l2)
                    };
                    gev.from_frechet_log(lx)
                })
                .collect()
        })
        .collect();
    let truth = GroundTruth::MaxMixture {
        gev,
        hevp: HevpSpec::new(cfg.alpha, w)?,
        q,
        corr: exp_corr(&sites, cfg.gp_range),
        n,
    };
    Ok(Simulation { data: assemble(rows, sites, "max")?, truth, atoms: None })
}

pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    match cfg.setting {
        Setting::Ms => sim_hevp(cfg),
        Setting::Sb => sim_sb(cfg),
        Setting::Gp => sim_gp(cfg),
        Setting::St => sim_skew_t(cfg),
        Setting::Invms => sim_inverted_ms(cfg),
        Setting::Max => sim_max_mixture(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::gev_cdf;
    use crate::models::{chi_hevp, f_sb_joint};
    use crate::stats::{ks_test, ks_two_sample, mean, variance};

    fn small(setting: Setting, n: usize, t: usize, seed: u64) -> SimConfig {
        SimConfig { setting, grid: GridSpec::square(n), replicates: t, seed, ..SimConfig::for_setting(setting) }
    }

    /// Fraction of joint exceedances of the true marginal `u`-quantiles over `1 − u`.
    fn chi_hat(d: &Dataset, i: usize, j: usize, qi: f64, qj: f64, u: f64) -> f64 {
        let k = (0..d.n_times).filter(|&t| d.get(t, i) > qi && d.get(t, j) > qj).count();
        k as f64 / d.n_times as f64 / (1.0 - u)
    }

    #[test]
    fn ms_defaults_shape_and_determinism() {
        let cfg = SimConfig { seed: 11, ..Default::default() };
        let a = sim_hevp(&cfg).unwrap();
        assert_eq!(a.data.n_sites(), 49);
        assert_eq!(a.data.n_times, 50);
        assert_eq!(a.data.y.len(), 2450);
        let b = sim_hevp(&cfg).unwrap();
        assert_eq!(a.data, b.data);
        let c = sim_hevp(&SimConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.data, c.data);
        assert!(SimConfig { replicates: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn every_setting_has_requested_shape() {
        for s in [Setting::Ms, Setting::Sb, Setting::Gp, Setting::St, Setting::Invms, Setting::Max] {
            let sim = simulate(&small(s, 3, 7, 5)).unwrap();
            assert_eq!(sim.data.y.len(), 63);
            assert_eq!(sim.data.n_times, 7);
            assert_eq!(sim, sim);
        }
    }

    impl PartialEq for Simulation {
        fn eq(&self, other: &Self) -> bool {
            self.data == other.data
        }
    }

    #[test]
    fn ms_margins_are_unit_frechet() {
        let cfg = small(Setting::Ms, 3, 10_000, 3);
        let sim = sim_hevp(&cfg).unwrap();
        let gev = cfg.gev();
        // one site per replicate, rotating, keeps the pooled draws independent
        let x: Vec<f64> = (0..sim.data.n_times).map(|t| sim.data.get(t, t % 9)).collect();
        let (_, p) = ks_test(&x, |y| gev_cdf(y, &gev).unwrap());
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn ms_adjacent_chi_matches_closed_form() {
        let cfg = small(Setting::Ms, 3, 100_000, 4);
        let sim = sim_hevp(&cfg).unwrap();
        let q = gev_quantile(0.99, &cfg.gev()).unwrap();
        let GroundTruth::MaxStable { residual, .. } = &sim.truth else { panic!() };
        let exact = chi_hevp(4, 5, residual.weights(), cfg.alpha);
        assert!((chi_hat(&sim.data, 4, 5, q, q, 0.99) - exact).abs() < 0.05);
        let finite = sim.truth.chi(4, 5, 0.99).unwrap();
        assert!((finite - exact).abs() < 0.02);
    }

    #[test]
    fn sb_joint_cdf_matches_mixture_formula() {
        let cfg = SimConfig { sites: vec![[1.0, 1.0], [2.0, 1.0]], replicates: 200_000, seed: 8, ..SimConfig::for_setting(Setting::Sb) };
        let sim = sim_sb(&cfg).unwrap();
        let GroundTruth::MaxStable { residual: ResidualModel::Sb { weights, atoms, alpha }, .. } = &sim.truth else {
            panic!()
        };
        let gev = cfg.gev();
        for c in [[2.0, 3.0], [0.7, 1.5], [10.0, 10.0]] {
            let exact = f_sb_joint(&c, atoms, weights, *alpha).unwrap();
            let (y0, y1) = (gev.from_frechet_log(c[0].ln()), gev.from_frechet_log(c[1].ln()));
            let k = (0..sim.data.n_times).filter(|&t| sim.data.get(t, 0) < y0 && sim.data.get(t, 1) < y1).count();
            let p = k as f64 / sim.data.n_times as f64;
            let se = (exact * (1.0 - exact) / sim.data.n_times as f64).sqrt();
            assert!((p - exact).abs() < 3.0 * se, "{p} vs {exact}");
        }
    }

    #[test]
    fn sb_single_atom_is_fixed_effect_hevp() {
        let cfg = SimConfig { n_atoms: 1, pi: vec![1.0], replicates: 5000, seed: 13, ..small(Setting::Sb, 2, 1, 0) };
        let sim = sim_sb(&cfg).unwrap();
        let atoms = sim.atoms.unwrap();
        let GroundTruth::MaxStable { residual, .. } = &sim.truth else { panic!() };
        let w = residual.weights();
        let lg: Vec<f64> = atoms.log_gamma[0].clone();
        let mut rng = RngStream::new(999, 0);
        let gev = cfg.gev();
        let matched: Vec<f64> = (0..5000)
            .map(|_| gev.from_frechet_log(max_stable_log_x(&lg, w, cfg.alpha, &mut rng)[2]))
            .collect();
        assert!(ks_two_sample(&sim.data.column(2), &matched).1 > 0.01);
    }

    #[test]
    fn gp_moments() {
        let cfg = SimConfig { sites: vec![[0.0, 0.0], [1.0, 0.0], [8.0, 0.0], [16.0, 0.0]], replicates: 10_000, seed: 21, ..SimConfig::for_setting(Setting::Gp) };
        let sim = sim_gp(&cfg).unwrap();
        let (a, b) = (sim.data.column(0), sim.data.column(1));
        let (ma, mb) = (mean(&a), mean(&b));
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64;
        let r = cov / (variance(&a) * variance(&b)).sqrt();
        assert!((r - (-1f64).exp()).abs() < 0.02, "{r}");
        let pooled: Vec<f64> = sim.data.y.clone();
        assert!((mean(&pooled) - 0.1).abs() < 0.01);
        assert!((variance(&pooled) - 1.0).abs() < 0.02);
    }

    #[test]
    fn skew_t_symmetric_limit_and_scale_moment() {
        let cfg = SimConfig { sites: vec![[0.0, 0.0]], replicates: 50_000, skew_lambda: 0.0, seed: 2, ..SimConfig::for_setting(Setting::St) };
        let y = sim_skew_t(&cfg).unwrap().data.y;
        let m = mean(&y);
        let v = variance(&y);
        let g1 = y.iter().map(|x| ((x - m) / v.sqrt()).powi(3)).sum::<f64>() / y.len() as f64;
        assert!(g1.abs() < 0.05, "skewness {g1}");
        // Var(Y) = E[σ²] = 1/3 when λ = 0
        let sq: Vec<f64> = y.iter().map(|x| (x - m).powi(2)).collect();
        let se = (variance(&sq) / sq.len() as f64).sqrt();
        assert!((mean(&sq) - 1.0 / 3.0).abs() < 3.0 * se);
    }

    #[test]
    fn skew_t_truth_matches_simulation() {
        let cfg = SimConfig { sites: vec![[0.0, 0.0], [1.0, 0.0]], replicates: 100_000, seed: 5, ..SimConfig::for_setting(Setting::St) };
        let sim = sim_skew_t(&cfg).unwrap();
        let GroundTruth::SkewT(st) = &sim.truth else { panic!() };
        for k in [0.1, 0.5, 0.9] {
            let q = sim.truth.quantile(0, k).unwrap();
            let frac = sim.data.column(0).iter().filter(|&&v| v <= q).count() as f64 / 1e5;
            assert!((frac - k).abs() < 3.0 * (k * (1.0 - k) / 1e5).sqrt() + 1e-4, "{k}: {frac}");
            assert!((st.cdf(q) - k).abs() < 1e-8);
        }
        let u = 0.9;
        let q = sim.truth.quantile(0, u).unwrap();
        let emp = chi_hat(&sim.data, 0, 1, q, q, u);
        let exact = sim.truth.chi(0, 1, u).unwrap();
        assert!((emp - exact).abs() < 0.03, "{emp} vs {exact}");
    }

    #[test]
    fn inverted_ms_tails() {
        let cfg = small(Setting::Invms, 3, 50_000, 6);
        let sim = sim_inverted_ms(&cfg).unwrap();
        let gev = cfg.gev();
        // invert Y = μ + σ/ξ (X^{−ξ} − 1) and test 1/X ~ Exp(1)
        let inv_x: Vec<f64> = (0..sim.data.n_times)
            .map(|t| {
                let y = sim.data.get(t, t % 9);
                let lx = -gev.reduce(y).unwrap().1;
                (-lx).exp()
            })
            .collect();
        assert!(ks_test(&inv_x, |v| 1.0 - (-v.max(0.0)).exp()).1 > 0.01);
        let hi = sim.truth.quantile(4, 0.99).unwrap();
        let upper = chi_hat(&sim.data, 4, 5, hi, hi, 0.99);
        // asymptotic independence: the exact ratio decays towards 0
        let far = sim.truth.chi(4, 5, 1.0 - 1e-6).unwrap();
        assert!(far < 0.15 && far < sim.truth.chi(4, 5, 0.99).unwrap(), "{far}");
        let lo = sim.truth.quantile(4, 0.01).unwrap();
        let k = (0..sim.data.n_times).filter(|&t| sim.data.get(t, 4) < lo && sim.data.get(t, 5) < lo).count();
        let lower = k as f64 / sim.data.n_times as f64 / 0.01;
        assert!(lower > upper);
        assert!((upper - sim.truth.chi(4, 5, 0.99).unwrap()).abs() < 0.05);
    }

    #[test]
    fn max_mixture_boundary_and_tail() {
        let cfg = small(Setting::Max, 3, 40, 17);
        let ms = sim_hevp(&SimConfig { setting: Setting::Ms, ..cfg.clone() }).unwrap();
        let mx = sim_max_mixture(&SimConfig { q: 1.0, ..cfg.clone() }).unwrap();
        assert_eq!(ms.data.y, mx.data.y);

        let cfg = small(Setting::Max, 3, 400_000, 18);
        let sim = sim_max_mixture(&cfg).unwrap();
        let q = sim.truth.quantile(4, 0.995).unwrap();
        let emp = chi_hat(&sim.data, 4, 5, q, q, 0.995);
        let GroundTruth::MaxMixture { hevp, .. } = &sim.truth else { panic!() };
        // at q = 1/2 both components have unit tail index, so only half of the
        // marginal exceedances come from the dependent part
        let limit = 0.5 * chi_hevp(4, 5, &hevp.weights, cfg.alpha);
        assert!((emp - limit).abs() < 0.05, "{emp} vs {limit}");
        assert!((sim.truth.chi(4, 5, 1.0 - 1e-7).unwrap() - limit).abs() < 0.01);
        let finite = sim.truth.chi(4, 5, 0.995).unwrap();
        assert!((emp - finite).abs() < 0.04, "{emp} vs {finite}");
        let frac = sim.data.column(4).iter().filter(|&&v| v <= q).count() as f64 / 400_000.0;
        assert!((frac - 0.995).abs() < 3.0 * (0.995f64 * 0.005 / 4e5).sqrt());
    }

    #[test]
    fn gaussian_truth_matches_simulation() {
        let cfg = small(Setting::Gp, 2, 100_000, 31);
        let sim = sim_gp(&cfg).unwrap();
        let q = sim.truth.quantile(0, 0.9).unwrap();
        assert!((q - (0.1 + 1.281_551_565_544_600_5)).abs() < 1e-9);
        let emp = chi_hat(&sim.data, 0, 1, q, q, 0.9);
        assert!((emp - sim.truth.chi(0, 1, 0.9).unwrap()).abs() < 0.02);
    }
}

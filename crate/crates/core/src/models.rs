//! HEVP, stick-breaking and max-mixture residual processes: latent θ
//! fields, conditional GEV parameters, closed-form distribution functions
//! and tail summaries.
//!
//! Every distribution function here is for the residual process `X_t(s)`
//! with (for the HEVP) unit Fréchet margins. All of them are evaluated in
//! log space; mixtures over atoms go through log-sum-exp.

use crate::distributions::{log_sum_exp, GevParams, XI_EPS};
use crate::error::{Error, Result};
use crate::geometry::WeightMatrix;
use serde::{Deserialize, Serialize};

/// `q` within this distance of 0 or 1 short-circuits to the pure sub-model.
pub const Q_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hevp,
    Sb,
    Mm,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Hevp => "hevp",
            ModelKind::Sb => "sb",
            ModelKind::Mm => "mm",
        }
    }

    pub fn has_latent_a(&self) -> bool {
        matches!(self, ModelKind::Hevp | ModelKind::Mm)
    }

    pub fn has_atoms(&self) -> bool {
        matches!(self, ModelKind::Sb | ModelKind::Mm)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hevp" | "ms" => Ok(ModelKind::Hevp),
            "sb" => Ok(ModelKind::Sb),
            "mm" => Ok(ModelKind::Mm),
            other => Err(Error::domain(format!("unknown model kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HevpSpec {
    pub alpha: f64,
    pub weights: WeightMatrix,
}

impl HevpSpec {
    pub fn new(alpha: f64, weights: WeightMatrix) -> Result<Self> {
        check_alpha_closed(alpha)?;
        Ok(HevpSpec { alpha, weights })
    }
}

/// Stick-breaking atoms, kept on the log scale: `log_gamma[j][l]` is
/// `ln γ` of atom `j` at knot `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbAtoms {
    pub log_gamma: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
}

impl SbAtoms {
    pub fn new(gamma: Vec<Vec<f64>>, pi: Vec<f64>) -> Result<Self> {
        if gamma.iter().flatten().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::domain("atoms must be positive and finite"));
        }
        Self::from_log(gamma.into_iter().map(|g| g.into_iter().map(f64::ln).collect()).collect(), pi)
    }

    /// Atoms given as `ln γ`; avoids overflow for small α.
    pub fn from_log(log_gamma: Vec<Vec<f64>>, pi: Vec<f64>) -> Result<Self> {
        if log_gamma.is_empty() || log_gamma.len() != pi.len() {
            return Err(Error::domain("atoms and weights must be nonempty and of equal length"));
        }
        let l = log_gamma[0].len();
        if log_gamma.iter().any(|g| g.len() != l || g.iter().any(|x| !x.is_finite())) {
            return Err(Error::domain("atoms must be positive, finite and of equal length"));
        }
        let s: f64 = pi.iter().sum();
        if pi.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::domain("atom weights must lie on the simplex"));
        }
        Ok(SbAtoms { log_gamma, pi })
    }

    pub fn n_atoms(&self) -> usize {
        self.log_gamma.len()
    }

    fn check_knots(&self, w: &WeightMatrix) -> Result<()> {
        if self.log_gamma[0].len() != w.n_knots() {
            return Err(Error::domain(format!(
                "atoms have {} knots, weights have {}",
                self.log_gamma[0].len(),
                w.n_knots()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmSpec {
    pub q: f64,
    pub hevp: HevpSpec,
    pub sb: SbAtoms,
}

impl MmSpec {
    pub fn new(q: f64, hevp: HevpSpec, sb: SbAtoms) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::domain(format!("q must lie in [0,1], got {q}")));
        }
        sb.check_knots(&hevp.weights)?;
        Ok(MmSpec { q, hevp, sb })
    }
}

fn check_alpha_closed(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0,1], got {alpha}")));
    }
    Ok(())
}

fn log_positive(c: &[f64]) -> Result<Vec<f64>> {
    c.iter()
        .map(|&x| {
            if x > 0.0 {
                Ok(x.ln())
            } else {
                Err(Error::domain(format!("distribution function argument must be positive, got {x}")))
            }
        })
        .collect()
}

/// `θ(s_i) = (Σ_l a_l ω_l(s_i)^{1/α})^α` for every site.
pub fn theta_field(a: &[f64], weights: &WeightMatrix, alpha: f64) -> Result<Vec<f64>> {
    check_alpha_closed(alpha)?;
    if a.len() != weights.n_knots() {
        return Err(Error::domain("random-effect vector length must equal the number of knots"));
    }
    let log_a = log_positive(a)?;
    Ok((0..weights.n_sites())
        .map(|i| (alpha * log_theta_pow(&log_a, weights.log_row(i), alpha)).exp())
        .collect())
}

/// `ln Σ_l a_l ω_l^{1/α}` from `ln a` and `ln ω`.
#[inline]
pub fn log_theta_pow(log_a: &[f64], log_w_row: &[f64], alpha: f64) -> f64 {
    let inv = 1.0 / alpha;
    let mut m = f64::NEG_INFINITY;
    for (la, lw) in log_a.iter().zip(log_w_row) {
        m = m.max(la + inv * lw);
    }
    if !m.is_finite() {
        return m;
    }
    let s: f64 = log_a.iter().zip(log_w_row).map(|(la, lw)| (la + inv * lw - m).exp()).sum();
    m + s.ln()
}

/// Conditional GEV parameters given the spatial term θ.
pub fn hevp_conditional_gev(theta: f64, gev: &GevParams, alpha: f64) -> GevParams {
    let lt = theta.ln();
    let (mu, scale) = if gev.xi.abs() < XI_EPS {
        (gev.mu + gev.sigma * lt, 1.0)
    } else {
        let k = (gev.xi * lt).exp();
        (gev.mu + gev.sigma * (gev.xi * lt).exp_m1() / gev.xi, k)
    };
    GevParams {
        mu,
        sigma: alpha * gev.sigma * scale,
        xi: alpha * gev.xi,
    }
}

/// `ln V` where `V = Σ_l {Σ_i (ω_l(s_i)/c_i)^{1/α}}^α` over the given rows.
fn hevp_log_exponent(log_c: &[f64], rows: &[usize], w: &WeightMatrix, alpha: f64) -> f64 {
    let inv = 1.0 / alpha;
    let mut per_knot = Vec::with_capacity(w.n_knots());
    let mut inner = Vec::with_capacity(rows.len());
    for l in 0..w.n_knots() {
        inner.clear();
        for (k, &i) in rows.iter().enumerate() {
            inner.push(inv * (w.log_row(i)[l] - log_c[k]));
        }
        per_knot.push(alpha * log_sum_exp(&inner));
    }
    log_sum_exp(&per_knot)
}

/// `b_l = ln Σ_i (ω_l(s_i)/c_i)^{1/α}` for every knot.
fn sb_knot_terms(log_c: &[f64], rows: &[usize], w: &WeightMatrix, alpha: f64) -> Vec<f64> {
    let inv = 1.0 / alpha;
    let mut inner = Vec::with_capacity(rows.len());
    (0..w.n_knots())
        .map(|l| {
            inner.clear();
            for (k, &i) in rows.iter().enumerate() {
                inner.push(inv * (w.log_row(i)[l] - log_c[k]));
            }
            log_sum_exp(&inner)
        })
        .collect()
}

fn sb_log_cdf(log_c: &[f64], rows: &[usize], atoms: &SbAtoms, w: &WeightMatrix, alpha: f64) -> f64 {
    let b = sb_knot_terms(log_c, rows, w, alpha);
    let mut terms = Vec::with_capacity(atoms.n_atoms());
    let mut buf = Vec::with_capacity(b.len());
    for (g, &p) in atoms.log_gamma.iter().zip(&atoms.pi) {
        if p <= 0.0 {
            continue;
        }
        buf.clear();
        buf.extend(g.iter().zip(&b).map(|(gl, bl)| gl + bl));
        terms.push(p.ln() - log_sum_exp(&buf).exp());
    }
    log_sum_exp(&terms)
}

fn hevp_log_cdf(log_c: &[f64], rows: &[usize], w: &WeightMatrix, alpha: f64) -> f64 {
    -hevp_log_exponent(log_c, rows, w, alpha).exp()
}

fn all_rows(w: &WeightMatrix) -> Vec<usize> {
    (0..w.n_sites()).collect()
}

fn check_len(c: &[f64], w: &WeightMatrix) -> Result<()> {
    if c.len() != w.n_sites() {
        return Err(Error::domain(format!("{} arguments for {} sites", c.len(), w.n_sites())));
    }
    Ok(())
}

/// Joint distribution function of the HEVP residual at all weight-matrix sites.
pub fn f_hevp_joint(c: &[f64], weights: &WeightMatrix, alpha: f64) -> Result<f64> {
    check_alpha_closed(alpha)?;
    check_len(c, weights)?;
    let lc = log_positive(c)?;
    Ok(hevp_log_cdf(&lc, &all_rows(weights), weights, alpha).exp())
}

/// Upper tail-dependence coefficient of the HEVP between two sites.
pub fn chi_hevp(i: usize, j: usize, weights: &WeightMatrix, alpha: f64) -> f64 {
    let inv = 1.0 / alpha;
    let s: f64 = weights
        .log_row(i)
        .iter()
        .zip(weights.log_row(j))
        .map(|(a, b)| {
            let m = a.max(*b);
            if m == f64::NEG_INFINITY {
                return 0.0;
            }
            (m + alpha * ((inv * (a - m)).exp() + (inv * (b - m)).exp()).ln()).exp()
        })
        .sum();
    (2.0 - s).clamp(0.0, 1.0)
}

pub fn f_sb_marginal(c: f64, site: usize, atoms: &SbAtoms, weights: &WeightMatrix, alpha: f64) -> Result<f64> {
    check_alpha_closed(alpha)?;
    atoms.check_knots(weights)?;
    let lc = log_positive(&[c])?;
    Ok(sb_log_cdf(&lc, &[site], atoms, weights, alpha).exp())
}

pub fn f_sb_joint(c: &[f64], atoms: &SbAtoms, weights: &WeightMatrix, alpha: f64) -> Result<f64> {
    check_alpha_closed(alpha)?;
    atoms.check_knots(weights)?;
    check_len(c, weights)?;
    let lc = log_positive(c)?;
    Ok(sb_log_cdf(&lc, &all_rows(weights), atoms, weights, alpha).exp())
}

fn mm_log_cdf(log_c: &[f64], rows: &[usize], mm: &MmSpec) -> f64 {
    let q = mm.q;
    let w = &mm.hevp.weights;
    let alpha = mm.hevp.alpha;
    if q >= 1.0 - Q_EPS {
        return hevp_log_cdf(log_c, rows, w, alpha);
    }
    if q <= Q_EPS {
        return sb_log_cdf(log_c, rows, &mm.sb, w, alpha);
    }
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    let c_hevp: Vec<f64> = log_c.iter().map(|lc| (lc - lq) / q).collect();
    let c_sb: Vec<f64> = log_c.iter().map(|lc| (lc - l1q) / (1.0 - q)).collect();
    hevp_log_cdf(&c_hevp, rows, w, alpha) + sb_log_cdf(&c_sb, rows, &mm.sb, w, alpha)
}

pub fn f_mm_marginal(c: f64, site: usize, mm: &MmSpec) -> Result<f64> {
    let lc = log_positive(&[c])?;
    Ok(mm_log_cdf(&lc, &[site], mm).exp())
}

pub fn f_mm_joint(c: &[f64], mm: &MmSpec) -> Result<f64> {
    check_len(c, &mm.hevp.weights)?;
    let lc = log_positive(c)?;
    Ok(mm_log_cdf(&lc, &all_rows(&mm.hevp.weights), mm).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailIndex {
    pub value: f64,
    /// `q` sits exactly on `α/(1+α)`; `value` is the dependent-branch value.
    pub boundary: bool,
}

pub fn tail_index(kind: ModelKind, alpha: f64, q: f64) -> Result<TailIndex> {
    check_alpha_closed(alpha)?;
    let value = match kind {
        ModelKind::Hevp => 1.0,
        ModelKind::Sb => 1.0 / alpha,
        ModelKind::Mm => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::domain(format!("q must lie in [0,1], got {q}")));
            }
            let t = dependence_threshold(alpha);
            if q == t {
                return Ok(TailIndex {
                    value: 1.0 / q,
                    boundary: true,
                });
            }
            if q > t {
                1.0 / q
            } else {
                1.0 / (alpha * (1.0 - q))
            }
        }
    };
    Ok(TailIndex { value, boundary: false })
}

/// `α / (1 + α)`: the value of `q` separating the two dependence regimes.
#[inline]
pub fn dependence_threshold(alpha: f64) -> f64 {
    alpha / (1.0 + alpha)
}

/// `δ = I(q ≥ α/(1+α))`.
#[inline]
pub fn delta_indicator(q: f64, alpha: f64) -> u8 {
    u8::from(q >= dependence_threshold(alpha))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChiValue {
    Exact(f64),
    /// Only bounds are known (boundary case `q = α/(1+α)`).
    Interval(f64, f64),
}

pub fn chi_mm(i: usize, j: usize, mm: &MmSpec) -> ChiValue {
    let alpha = mm.hevp.alpha;
    let t = dependence_threshold(alpha);
    let ch = chi_hevp(i, j, &mm.hevp.weights, alpha);
    if mm.q < t {
        ChiValue::Exact(0.0)
    } else if mm.q > t {
        ChiValue::Exact(ch)
    } else {
        ChiValue::Interval(ch, 1.0)
    }
}

/// A fully specified residual process, for generic marginal and joint
/// evaluation at arbitrary subsets of weight-matrix rows.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualModel {
    Hevp(HevpSpec),
    Sb { alpha: f64, weights: WeightMatrix, atoms: SbAtoms },
    Mm(MmSpec),
}

impl ResidualModel {
    pub fn weights(&self) -> &WeightMatrix {
        match self {
            ResidualModel::Hevp(h) => &h.weights,
            ResidualModel::Sb { weights, .. } => weights,
            ResidualModel::Mm(m) => &m.hevp.weights,
        }
    }

    /// `ln P{X(s_i) < c_i, i ∈ rows}` from `ln c`.
    pub fn log_cdf(&self, log_c: &[f64], rows: &[usize]) -> f64 {
        match self {
            ResidualModel::Hevp(h) => hevp_log_cdf(log_c, rows, &h.weights, h.alpha),
            ResidualModel::Sb { alpha, weights, atoms } => sb_log_cdf(log_c, rows, atoms, weights, *alpha),
            ResidualModel::Mm(m) => mm_log_cdf(log_c, rows, m),
        }
    }

    pub fn marginal(&self, site: usize) -> MarginalCdf {
        MarginalCdf::new(self, site)
    }

    /// Finite-level dependence ratio `[1 − 2u + F(F⁻¹(u), F⁻¹(u))]/(1 − u)`.
    pub fn chi_u(&self, i: usize, j: usize, u: f64) -> Result<f64> {
        let ci = self.marginal(i).log_quantile(u)?;
        let cj = self.marginal(j).log_quantile(u)?;
        Ok(self.chi_u_at(i, j, u, ci, cj))
    }

    /// As [`chi_u`](Self::chi_u) with precomputed marginal log quantiles.
    pub fn chi_u_at(&self, i: usize, j: usize, u: f64, log_ci: f64, log_cj: f64) -> f64 {
        let lf = self.log_cdf(&[log_ci, log_cj], &[i, j]);
        // 1 − 2u + F = 2(1−u) + (F − 1)
        let r = (2.0 * (1.0 - u) + lf.exp_m1()) / (1.0 - u);
        r.clamp(0.0, 1.0)
    }
}

/// Marginal residual CDF at one site, reduced to `O(J)` work per evaluation.
#[derive(Debug, Clone)]
pub struct MarginalCdf {
    /// `q` of the HEVP factor, when present (1 for the pure HEVP).
    hevp_q: Option<f64>,
    /// Stick-breaking factor, when present.
    sb: Option<SbMarginal>,
    alpha: f64,
}

#[derive(Debug, Clone)]
struct SbMarginal {
    log_pi: Vec<f64>,
    /// `ln K_j`, `K_j = Σ_l ω_l(s)^{1/α} γ_lj`.
    log_k: Vec<f64>,
    /// Argument scale: `1 − q` inside the MM, 1 for the pure SB model.
    scale: f64,
}

impl MarginalCdf {
    fn new(model: &ResidualModel, site: usize) -> Self {
        let sb = |atoms: &SbAtoms, w: &WeightMatrix, alpha: f64, scale: f64| {
            let lw = w.log_row(site);
            let mut log_pi = Vec::new();
            let mut log_k = Vec::new();
            for (lg, &p) in atoms.log_gamma.iter().zip(&atoms.pi) {
                if p <= 0.0 {
                    continue;
                }
                log_pi.push(p.ln());
                log_k.push(log_theta_pow(lg, lw, alpha));
            }
            SbMarginal { log_pi, log_k, scale }
        };
        match model {
            ResidualModel::Hevp(h) => MarginalCdf {
                hevp_q: Some(1.0),
                sb: None,
                alpha: h.alpha,
            },
            ResidualModel::Sb { alpha, weights, atoms } => MarginalCdf {
                hevp_q: None,
                sb: Some(sb(atoms, weights, *alpha, 1.0)),
                alpha: *alpha,
            },
            ResidualModel::Mm(m) => {
                let alpha = m.hevp.alpha;
                let w = &m.hevp.weights;
                if m.q >= 1.0 - Q_EPS {
                    MarginalCdf { hevp_q: Some(1.0), sb: None, alpha }
                } else if m.q <= Q_EPS {
                    MarginalCdf { hevp_q: None, sb: Some(sb(&m.sb, w, alpha, 1.0)), alpha }
                } else {
                    MarginalCdf {
                        hevp_q: Some(m.q),
                        sb: Some(sb(&m.sb, w, alpha, 1.0 - m.q)),
                        alpha,
                    }
                }
            }
        }
    }

    /// `ln F(c)` from `ln c`.
    pub fn log_cdf(&self, log_c: f64) -> f64 {
        let mut out = 0.0;
        if let Some(q) = self.hevp_q {
            // F_HEVP((c/q)^{1/q}) = exp(−(c/q)^{−1/q})
            out -= (-(log_c - q.ln()) / q).exp();
        }
        if let Some(sb) = &self.sb {
            // F_SB(c') with ln c' = (ln c − ln r)/r, r = scale
            let r = sb.scale;
            let shift = (log_c - r.ln()) / (r * self.alpha);
            let mut m = f64::NEG_INFINITY;
            for (lp, lk) in sb.log_pi.iter().zip(&sb.log_k) {
                m = m.max(lp - (lk - shift).exp());
            }
            if m == f64::NEG_INFINITY {
                return m;
            }
            let s: f64 = sb
                .log_pi
                .iter()
                .zip(&sb.log_k)
                .map(|(lp, lk)| (lp - (lk - shift).exp() - m).exp())
                .sum();
            out += m + s.ln();
        }
        out
    }

    /// `ln F⁻¹(u)` by bracketed bisection on the log CDF.
    pub fn log_quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::domain(format!("level must lie in (0,1), got {u}")));
        }
        let target = u.ln();
        let guess = -(-target).ln();
        let (mut lo, mut hi) = (guess - 1.0, guess + 1.0);
        let mut step = 1.0;
        while self.log_cdf(lo) >= target {
            step *= 2.0;
            lo -= step;
            if lo < -1e5 {
                return Err(Error::Numerical("quantile bracket escaped below".into()));
            }
        }
        step = 1.0;
        while self.log_cdf(hi) < target {
            step *= 2.0;
            hi += step;
            if hi > 1e5 {
                return Err(Error::Numerical("quantile bracket escaped above".into()));
            }
        }
        while hi - lo > 1e-11 * (1.0 + lo.abs().max(hi.abs())) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.log_cdf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ps_sample;
    use crate::geometry::{grid, kernel_weights, KnotSet, Site};
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_knot(n: usize) -> WeightMatrix {
        WeightMatrix::from_rows(&vec![vec![1.0]; n]).unwrap()
    }

    fn grid_weights(nx: usize, tau: f64) -> WeightMatrix {
        let g = grid(nx, nx, 1.0, nx as f64, 1.0, nx as f64);
        kernel_weights(&g, &KnotSet::new(g.clone()).unwrap(), tau).unwrap()
    }

    fn random_atoms(j: usize, l: usize, alpha: f64, rng: &mut RngStream) -> SbAtoms {
        let gamma = (0..j).map(|_| (0..l).map(|_| ps_sample(alpha, rng).unwrap()).collect()).collect();
        let raw: Vec<f64> = (0..j).map(|_| rng.open01()).collect();
        let s: f64 = raw.iter().sum();
        SbAtoms::new(gamma, raw.iter().map(|x| x / s).collect()).unwrap()
    }

    #[test]
    fn theta_examples() {
        let t = theta_field(&[2.0], &one_knot(1), 0.5).unwrap();
        assert_abs_diff_eq!(t[0], 2f64.sqrt(), epsilon = 1e-15);
        let w = grid_weights(3, 1.0);
        let a = vec![1.7; 9];
        let t = theta_field(&a, &w, 0.4).unwrap();
        for i in 0..9 {
            let s: f64 = w.row(i).iter().map(|x| x.powf(1.0 / 0.4)).sum();
            assert_abs_diff_eq!(t[i], 1.7f64.powf(0.4) * s.powf(0.4), epsilon = 1e-12);
        }
        assert!(theta_field(&[0.0], &one_knot(1), 0.5).is_err());
    }

    #[test]
    fn theta_matches_naive_loop() {
        let mut rng = RngStream::new(5, 0);
        let knots = KnotSet::new(vec![Site::new(0.0, 0.0), Site::new(1.0, 0.5), Site::new(-0.3, 2.0)]).unwrap();
        let sites = vec![Site::new(0.2, 0.1), Site::new(2.0, 2.0), Site::new(-1.0, 0.0)];
        let w = kernel_weights(&sites, &knots, 0.8).unwrap();
        let a: Vec<f64> = (0..3).map(|_| 0.1 + 3.0 * rng.uniform()).collect();
        let alpha = 0.37;
        let t = theta_field(&a, &w, alpha).unwrap();
        for i in 0..3 {
            let mut s = 0.0;
            for l in 0..3 {
                s += a[l] * w.get(i, l).powf(1.0 / alpha);
            }
            assert!((t[i] - s.powf(alpha)).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_gev_examples() {
        let g = GevParams::new(0.4, 1.3, 0.2).unwrap();
        let c = hevp_conditional_gev(1.0, &g, 0.6);
        assert_abs_diff_eq!(c.mu, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(c.sigma, 0.6 * 1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(c.xi, 0.6 * 0.2, epsilon = 1e-15);
        assert_eq!(hevp_conditional_gev(1.0, &g, 1.0), g);
        let g = GevParams::new(0.1, 1.0, 0.1).unwrap();
        let c = hevp_conditional_gev(2.0, &g, 0.3);
        assert_abs_diff_eq!(c.mu, 0.817_734_625_362_931_3, epsilon = 1e-12);
        assert_abs_diff_eq!(c.sigma, 0.321_532_038_760_887_9, epsilon = 1e-12);
        assert_abs_diff_eq!(c.xi, 0.03, epsilon = 1e-15);
        let gumbel = GevParams::new(0.0, 2.0, 0.0).unwrap();
        let c = hevp_conditional_gev(3.0, &gumbel, 0.5);
        assert_abs_diff_eq!(c.mu, 2.0 * 3f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(c.sigma, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn hevp_joint_examples() {
        assert_abs_diff_eq!(f_hevp_joint(&[1.0], &one_knot(1), 0.3).unwrap(), (-1f64).exp(), epsilon = 1e-15);
        let w = grid_weights(3, 1.0);
        let c: Vec<f64> = (0..9).map(|i| 0.5 + i as f64).collect();
        let ind = (-c.iter().map(|x| 1.0 / x).sum::<f64>()).exp();
        assert_abs_diff_eq!(f_hevp_joint(&c, &w, 1.0).unwrap(), ind, epsilon = 1e-14);
        assert_abs_diff_eq!(f_hevp_joint(&[1.0, 1.0], &one_knot(2), 0.3).unwrap(), 0.291_958_265_486_496_6, epsilon = 1e-14);
        assert!(f_hevp_joint(&[1.0, 0.0], &one_knot(2), 0.3).is_err());
    }

    #[test]
    fn chi_hevp_examples() {
        assert_abs_diff_eq!(chi_hevp(0, 1, &one_knot(2), 0.3), 0.768_855_586_655_083_7, epsilon = 1e-14);
        let w = grid_weights(3, 1.0);
        assert_abs_diff_eq!(chi_hevp(0, 4, &w, 1.0), 0.0, epsilon = 1e-14);
        for &a in &[0.2, 0.5, 0.9] {
            assert_abs_diff_eq!(chi_hevp(3, 3, &w, a), 2.0 - 2f64.powf(a), epsilon = 1e-13);
        }
        assert!((chi_hevp(2, 2, &w, 1e-3) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sb_marginal_examples() {
        let atoms = SbAtoms::new(vec![vec![1.0]], vec![1.0]).unwrap();
        for &c in &[0.3, 1.0, 4.0] {
            let f = f_sb_marginal(c, 0, &atoms, &one_knot(1), 0.4).unwrap();
            assert_abs_diff_eq!(f, (-c.powf(-1.0 / 0.4)).exp(), epsilon = 1e-14);
        }
        let mut rng = RngStream::new(1, 0);
        let w = grid_weights(3, 1.0);
        let atoms = random_atoms(4, 9, 0.3, &mut rng);
        let mut prev = 0.0;
        for k in -40..60 {
            let c = 10f64.powf(k as f64 / 10.0);
            let f = f_sb_marginal(c, 2, &atoms, &w, 0.3).unwrap();
            assert!(f >= prev && (0.0..=1.0).contains(&f));
            prev = f;
        }
        assert!(f_sb_marginal(1e-4, 2, &atoms, &w, 0.3).unwrap() < 1e-10);
        assert!(f_sb_marginal(1e6, 2, &atoms, &w, 0.3).unwrap() > 1.0 - 1e-6);
    }

    #[test]
    fn sb_centering_monte_carlo() {
        let mut rng = RngStream::new(77, 0);
        let w = grid_weights(3, 1.0);
        let alpha = 0.4;
        let c = 1.7;
        let n = 10_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let atoms = random_atoms(1, 9, alpha, &mut rng);
                f_sb_marginal(c, 4, &atoms, &w, alpha).unwrap()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((m - (-1.0 / c).exp()).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn sb_joint_consistency() {
        let mut rng = RngStream::new(3, 0);
        let w = grid_weights(3, 1.2);
        let atoms = random_atoms(3, 9, 0.5, &mut rng);
        let w1 = w.select_rows(&[5]);
        let joint = f_sb_joint(&[2.2], &atoms, &w1, 0.5).unwrap();
        let marg = f_sb_marginal(2.2, 5, &atoms, &w, 0.5).unwrap();
        assert_abs_diff_eq!(joint, marg, epsilon = 1e-14);
        let unit = SbAtoms::new(vec![vec![1.0; 9]], vec![1.0]).unwrap();
        let c: Vec<f64> = (0..9).map(|i| 1.0 + 0.3 * i as f64).collect();
        let ind = (-c.iter().map(|x| 1.0 / x).sum::<f64>()).exp();
        assert_abs_diff_eq!(f_sb_joint(&c, &unit, &w, 1.0).unwrap(), ind, epsilon = 1e-14);
    }

    #[test]
    fn mm_boundaries_are_exact() {
        let mut rng = RngStream::new(8, 0);
        let w = grid_weights(3, 1.0);
        let atoms = random_atoms(3, 9, 0.3, &mut rng);
        let c: Vec<f64> = (0..9).map(|i| 0.4 + 0.5 * i as f64).collect();
        let hevp = HevpSpec::new(0.3, w.clone()).unwrap();
        let mm1 = MmSpec::new(1.0, hevp.clone(), atoms.clone()).unwrap();
        let mm0 = MmSpec::new(0.0, hevp, atoms.clone()).unwrap();
        assert!((f_mm_joint(&c, &mm1).unwrap() - f_hevp_joint(&c, &w, 0.3).unwrap()).abs() < 1e-12);
        assert!((f_mm_joint(&c, &mm0).unwrap() - f_sb_joint(&c, &atoms, &w, 0.3).unwrap()).abs() < 1e-12);
        assert!((f_mm_marginal(1.3, 2, &mm1).unwrap() - (-1.0 / 1.3f64).exp()).abs() < 1e-12);
        assert!((f_mm_marginal(1.3, 2, &mm0).unwrap() - f_sb_marginal(1.3, 2, &atoms, &w, 0.3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mm_marginal_is_product_form() {
        let mut rng = RngStream::new(18, 0);
        let w = grid_weights(3, 1.0);
        let atoms = random_atoms(2, 9, 0.3, &mut rng);
        let mm = MmSpec::new(0.4, HevpSpec::new(0.3, w.clone()).unwrap(), atoms.clone()).unwrap();
        let c = 2.5;
        let expect = (-1.0 / (c / 0.4f64).powf(1.0 / 0.4)).exp()
            * f_sb_marginal((c / 0.6f64).powf(1.0 / 0.6), 1, &atoms, &w, 0.3).unwrap();
        assert!((f_mm_marginal(c, 1, &mm).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn tail_index_examples() {
        for &a in &[0.1, 0.5, 1.0] {
            assert_eq!(tail_index(ModelKind::Hevp, a, 0.0).unwrap().value, 1.0);
        }
        assert_abs_diff_eq!(tail_index(ModelKind::Sb, 0.3, 0.0).unwrap().value, 10.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tail_index(ModelKind::Mm, 0.3, 0.5).unwrap().value, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tail_index(ModelKind::Mm, 0.3, 0.1).unwrap().value, 1.0 / (0.3 * 0.9), epsilon = 1e-14);
        let b = tail_index(ModelKind::Mm, 0.3, dependence_threshold(0.3)).unwrap();
        assert!(b.boundary);
        assert_abs_diff_eq!(b.value, 1.3 / 0.3, epsilon = 1e-12);
    }

    #[test]
    fn chi_mm_and_delta() {
        let atoms = SbAtoms::new(vec![vec![1.0]], vec![1.0]).unwrap();
        let mk = |q| MmSpec::new(q, HevpSpec::new(0.3, one_knot(2)).unwrap(), atoms.clone()).unwrap();
        assert_eq!(chi_mm(0, 1, &mk(0.1)), ChiValue::Exact(0.0));
        assert_eq!(delta_indicator(0.1, 0.3), 0);
        match chi_mm(0, 1, &mk(0.5)) {
            ChiValue::Exact(v) => assert_abs_diff_eq!(v, 0.768_855_586_655_083_7, epsilon = 1e-14),
            other => panic!("{other:?}"),
        }
        assert_eq!(delta_indicator(0.5, 0.3), 1);
        let t = dependence_threshold(0.3);
        assert_abs_diff_eq!(t, 0.230_769_230_769_230_75, epsilon = 1e-16);
        assert_eq!(delta_indicator(t, 0.3), 1);
        match chi_mm(0, 1, &mk(t)) {
            ChiValue::Interval(lo, hi) => {
                assert_abs_diff_eq!(lo, 0.768_855_586_655_083_7, epsilon = 1e-14);
                assert_eq!(hi, 1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn finite_level_chi_hevp_converges() {
        let w = grid_weights(3, 1.0);
        let alpha = 0.3;
        let model = ResidualModel::Hevp(HevpSpec::new(alpha, w.clone()).unwrap());
        for &(i, j) in &[(0, 1), (0, 4), (2, 6)] {
            let r = model.chi_u(i, j, 1.0 - 1e-6).unwrap();
            assert!((r - chi_hevp(i, j, &w, alpha)).abs() < 1e-3);
        }
    }

    #[test]
    fn finite_level_chi_sb_vanishes() {
        let mut rng = RngStream::new(21, 0);
        let w = grid_weights(3, 1.0);
        for _ in 0..5 {
            let atoms = random_atoms(5, 9, 0.3, &mut rng);
            let model = ResidualModel::Sb { alpha: 0.3, weights: w.clone(), atoms };
            assert!(model.chi_u(0, 1, 1.0 - 1e-6).unwrap() < 0.02);
            let mid = model.chi_u(0, 1, 0.5).unwrap();
            assert!((0.0..=1.0).contains(&mid));
            assert!(model.chi_u(0, 1, 0.99).unwrap() <= mid + 1e-12);
        }
    }

    #[test]
    fn marginal_inversion_matches_closed_form_hevp() {
        let w = grid_weights(3, 1.0);
        let model = ResidualModel::Hevp(HevpSpec::new(0.4, w).unwrap());
        for &u in &[0.01, 0.5, 0.9, 0.995, 1.0 - 1e-9] {
            let lc = model.marginal(3).log_quantile(u).unwrap();
            assert!((lc - (-(-u.ln()).ln())).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn hevp_positive_association(alpha in 0.05..1.0f64, tau in 0.3..3.0f64,
                                     c in prop::collection::vec(0.05..20.0f64, 4)) {
            let g = grid(2, 2, 0.0, 1.0, 0.0, 1.0);
            let w = kernel_weights(&g, &KnotSet::new(g.clone()).unwrap(), tau).unwrap();
            let joint = f_hevp_joint(&c, &w, alpha).unwrap();
            let prod: f64 = c.iter().map(|x| (-1.0 / x).exp()).product();
            prop_assert!(joint >= prod * (1.0 - 1e-12));
            prop_assert!((0.0..=1.0).contains(&joint));
        }

        #[test]
        fn joint_cdfs_monotone(alpha in 0.1..0.95f64, q in 0.0..1.0f64, seed in 0u64..1000,
                               c in prop::collection::vec(0.1..10.0f64, 4), bump in 0.0..5.0f64, k in 0usize..4) {
            let g = grid(2, 2, 0.0, 1.0, 0.0, 1.0);
            let w = kernel_weights(&g, &KnotSet::new(g.clone()).unwrap(), 1.0).unwrap();
            let mut rng = RngStream::new(seed, 0);
            let atoms = random_atoms(3, 4, alpha, &mut rng);
            let mm = MmSpec::new(q, HevpSpec::new(alpha, w.clone()).unwrap(), atoms.clone()).unwrap();
            let mut c2 = c.clone();
            c2[k] += bump;
            for (a, b) in [
                (f_hevp_joint(&c, &w, alpha).unwrap(), f_hevp_joint(&c2, &w, alpha).unwrap()),
                (f_sb_joint(&c, &atoms, &w, alpha).unwrap(), f_sb_joint(&c2, &atoms, &w, alpha).unwrap()),
                (f_mm_joint(&c, &mm).unwrap(), f_mm_joint(&c2, &mm).unwrap()),
            ] {
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!(a <= b + 1e-15);
            }
            let big = vec![1e12; 4];
            prop_assert!(f_mm_joint(&big, &mm).unwrap() > 1.0 - 1e-3);
        }
    }
}

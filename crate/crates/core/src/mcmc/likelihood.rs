//! Observation log-likelihood on the residual (unit Fréchet) scale.
//!
//! For the HEVP with `S = Σ_l A_l ω_l^{1/α}` the conditional law of `Y` is
//! `P(Y < y) = exp(−S x^{−1/α})`, where `x = (1 + ξ(y−μ)/σ)^{1/ξ}`. The
//! conditional GEV parameters never need to be formed: only `ln x`, `ln z`
//! and `ln S` enter, which stays finite for extreme latents.

use crate::distributions::{gev_logcdf, gev_logpdf, gev_reduce as reduce, GevParams, XI_EPS};
use crate::geometry::{kernel_weights, WeightMatrix};
use crate::models::{log_theta_pow, ModelKind, Q_EPS};
use crate::Result;

use super::state::{FitData, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Comp {
    A,
    G,
    Both,
}

/// Scalars shared by every observation term.
#[derive(Debug, Clone, Copy)]
pub struct LikParams {
    comp: Comp,
    inv_alpha: f64,
    ln_alpha: f64,
    ln_q: f64,
    ln_1mq: f64,
    inv_aq: f64,
    inv_a1q: f64,
    ln_aq: f64,
    ln_a1q: f64,
}

impl LikParams {
    pub fn new(kind: ModelKind, alpha: f64, q: f64) -> Self {
        let comp = match kind {
            ModelKind::Hevp => Comp::A,
            ModelKind::Sb => Comp::G,
            ModelKind::Mm if q >= 1.0 - Q_EPS => Comp::A,
            ModelKind::Mm if q <= Q_EPS => Comp::G,
            ModelKind::Mm => Comp::Both,
        };
        let ln_alpha = alpha.ln();
        let (ln_q, ln_1mq) = (q.ln(), (1.0 - q).ln());
        LikParams {
            comp,
            inv_alpha: 1.0 / alpha,
            ln_alpha,
            ln_q,
            ln_1mq,
            inv_aq: 1.0 / (alpha * q),
            inv_a1q: 1.0 / (alpha * (1.0 - q)),
            ln_aq: ln_alpha + ln_q,
            ln_a1q: ln_alpha + ln_1mq,
        }
    }

    pub fn uses_a(&self) -> bool {
        self.comp != Comp::G
    }

    pub fn uses_g(&self) -> bool {
        self.comp != Comp::A
    }

    /// Log density of one observation. `lz` is NaN off the support.
    #[inline]
    pub fn ll(&self, lz: f64, lx: f64, log_sigma: f64, ls_a: f64, ls_g: f64) -> f64 {
        if lz.is_nan() {
            return f64::NEG_INFINITY;
        }
        match self.comp {
            Comp::A => {
                let le = ls_a - lx * self.inv_alpha;
                -le.exp() + le - self.ln_alpha - log_sigma - lz
            }
            Comp::G => {
                let le = ls_g - lx * self.inv_alpha;
                -le.exp() + le - self.ln_alpha - log_sigma - lz
            }
            Comp::Both => {
                let lt = ls_a - (lx - self.ln_q) * self.inv_aq;
                let lh = ls_g - (lx - self.ln_1mq) * self.inv_a1q;
                let a = lt - self.ln_aq;
                let b = lh - self.ln_a1q;
                let m = a.max(b);
                -lt.exp() - lh.exp() + m + ((a - m).exp() + (b - m).exp()).ln() - log_sigma - lz
            }
        }
    }
}

/// `(ln z, ln x)` for every observation; `ln z` is NaN off the support.
pub fn residuals_into(fit: &FitData, mu: &[f64], log_sigma: &[f64], xi: &[f64], lz: &mut [f64], lx: &mut [f64]) {
    let n = fit.n_sites;
    for t in 0..fit.n_times {
        for i in 0..n {
            let k = t * n + i;
            let (a, b) = residual(fit.y[k], mu[i], log_sigma[i], xi[i]);
            lz[k] = a;
            lx[k] = b;
        }
    }
}

#[inline]
pub fn residual(y: f64, mu: f64, log_sigma: f64, xi: f64) -> (f64, f64) {
    match reduce(y, mu, log_sigma.exp(), xi) {
        Some(p) => p,
        None => (f64::NAN, f64::NAN),
    }
}

/// Derived quantities kept in step with the state.
#[derive(Debug, Clone)]
pub struct Caches {
    pub weights: WeightMatrix,
    pub lz: Vec<f64>,
    pub lx: Vec<f64>,
    /// `ln S` of the HEVP component per `(t, i)`.
    pub ls_a: Vec<f64>,
    /// `ln S` of each atom per `(j, i)`.
    pub ls_g: Vec<f64>,
    /// Per-observation log density (all zero when the data are ignored).
    pub ll: Vec<f64>,
}

pub fn ls_a_into(state: &ModelState, w: &WeightMatrix, out: &mut [f64]) {
    let (n, l) = (w.n_sites(), state.n_knots);
    for t in 0..state.n_times {
        let la = &state.log_a[t * l..(t + 1) * l];
        for i in 0..n {
            out[t * n + i] = log_theta_pow(la, w.log_row(i), state.alpha);
        }
    }
}

pub fn ls_g_into(state: &ModelState, w: &WeightMatrix, out: &mut [f64]) {
    let (n, l) = (w.n_sites(), state.n_knots);
    for j in 0..state.n_atoms {
        let lg = &state.log_gamma[j * l..(j + 1) * l];
        for i in 0..n {
            out[j * n + i] = log_theta_pow(lg, w.log_row(i), state.alpha);
        }
    }
}

/// Fill `ll` from residual and `ln S` caches.
#[allow(clippy::too_many_arguments)]
pub fn ll_into(
    state: &ModelState,
    p: &LikParams,
    n: usize,
    lz: &[f64],
    lx: &[f64],
    ls_a: &[f64],
    ls_g: &[f64],
    out: &mut [f64],
) {
    for t in 0..state.n_times {
        let gj = if p.uses_g() { state.labels[t] } else { 0 };
        for i in 0..n {
            let k = t * n + i;
            let sa = if p.uses_a() { ls_a[k] } else { 0.0 };
            let sg = if p.uses_g() { ls_g[gj * n + i] } else { 0.0 };
            out[k] = p.ll(lz[k], lx[k], state.surface.log_sigma[i], sa, sg);
        }
    }
}

impl Caches {
    pub fn build(fit: &FitData, state: &ModelState, use_data: bool) -> Result<Self> {
        let weights = kernel_weights(&fit.sites, &fit.knots, state.tau)?;
        let mut c = Caches {
            weights,
            lz: vec![0.0; fit.y.len()],
            lx: vec![0.0; fit.y.len()],
            ls_a: vec![0.0; if state.kind.has_latent_a() { fit.y.len() } else { 0 }],
            ls_g: vec![0.0; state.n_atoms * fit.n_sites],
            ll: vec![0.0; fit.y.len()],
        };
        c.refresh(fit, state, use_data);
        Ok(c)
    }

    /// Recompute everything except the weights from the state.
    pub fn refresh(&mut self, fit: &FitData, state: &ModelState, use_data: bool) {
        if !use_data {
            self.ll.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let s = &state.surface;
        residuals_into(fit, &s.mu, &s.log_sigma, &s.xi, &mut self.lz, &mut self.lx);
        if state.kind.has_latent_a() {
            ls_a_into(state, &self.weights, &mut self.ls_a);
        }
        if state.kind.has_atoms() {
            ls_g_into(state, &self.weights, &mut self.ls_g);
        }
        let p = LikParams::new(state.kind, state.alpha, state.q);
        ll_into(state, &p, fit.n_sites, &self.lz, &self.lx, &self.ls_a, &self.ls_g, &mut self.ll);
    }

    pub fn total(&self) -> f64 {
        self.ll.iter().sum()
    }
}

/// Full log-likelihood of the data given every latent in `state`.
pub fn loglik(state: &ModelState, fit: &FitData) -> Result<f64> {
    Ok(Caches::build(fit, state, true)?.total())
}

/// Conditional GEV parameters of the max-stable factor with exponent `e`
/// (`q` for the HEVP part of the MM, `1 − q` for the SB part, 1 otherwise):
/// `μ* = μ + σ/ξ (θ^{eξ} e^ξ − 1)`, `σ* = α e σ θ^{eξ} e^ξ`, `ξ* = α e ξ`.
pub fn conditional_params(gev: &GevParams, log_theta: f64, alpha: f64, e: f64) -> GevParams {
    let lk = e * log_theta + e.ln();
    if gev.xi.abs() < XI_EPS {
        GevParams { mu: gev.mu + gev.sigma * lk, sigma: alpha * e * gev.sigma, xi: 0.0 }
    } else {
        let k = (gev.xi * lk).exp();
        GevParams {
            mu: gev.mu + gev.sigma * (gev.xi * lk).exp_m1() / gev.xi,
            sigma: alpha * e * gev.sigma * k,
            xi: alpha * e * gev.xi,
        }
    }
}

/// Log-likelihood through explicit conditional GEV densities; the MM uses
/// the density `F̃ f̂ + F̂ f̃` of the maximum of two independent GEV variables.
/// Slow; used to cross-check [`loglik`].
pub fn loglik_reference(state: &ModelState, fit: &FitData) -> Result<f64> {
    let w = kernel_weights(&fit.sites, &fit.knots, state.tau)?;
    let n = fit.n_sites;
    let l = state.n_knots;
    let a = state.alpha;
    let mut total = 0.0;
    for t in 0..fit.n_times {
        for i in 0..n {
            let gev = state.surface.params(i);
            let y = fit.get(t, i);
            let theta_a = || a * log_theta_pow(&state.log_a[t * l..(t + 1) * l], w.log_row(i), a);
            let theta_g = || {
                let j = state.labels[t];
                a * log_theta_pow(&state.log_gamma[j * l..(j + 1) * l], w.log_row(i), a)
            };
            let v = match state.kind {
                ModelKind::Hevp => gev_logpdf(y, &conditional_params(&gev, theta_a(), a, 1.0)),
                ModelKind::Sb => gev_logpdf(y, &conditional_params(&gev, theta_g(), a, 1.0)),
                ModelKind::Mm => {
                    let q = state.q;
                    if q >= 1.0 - Q_EPS {
                        gev_logpdf(y, &conditional_params(&gev, theta_a(), a, 1.0))
                    } else if q <= Q_EPS {
                        gev_logpdf(y, &conditional_params(&gev, theta_g(), a, 1.0))
                    } else {
                        let pt = conditional_params(&gev, theta_a(), a, q);
                        let ph = conditional_params(&gev, theta_g(), a, 1.0 - q);
                        let x = gev_logcdf(y, &pt)? + gev_logpdf(y, &ph);
                        let z = gev_logcdf(y, &ph)? + gev_logpdf(y, &pt);
                        let m = x.max(z);
                        if m == f64::NEG_INFINITY {
                            m
                        } else {
                            m + ((x - m).exp() + (z - m).exp()).ln()
                        }
                    }
                }
            };
            total += v;
        }
    }
    Ok(total)
}

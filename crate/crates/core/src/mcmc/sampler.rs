use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    categorical_sample_log, ps_aux_log_c, ps_aux_logdensity_lg, truncated_normal_logpdf, truncated_normal_sample,
};
use crate::geometry::{kernel_weights, KnotSet};
use crate::gp::{diameter, GevSurface, GpHyper, GpPrecision, SurfaceMode};
use crate::models::{log_theta_pow, ModelKind};
use crate::rng::RngStream;
use crate::simulate::Dataset;
use crate::{Error, Result};

use super::config::ChainConfig;
use super::likelihood::{ll_into, ls_a_into, ls_g_into, residual, residuals_into, Caches, LikParams};
use super::samples::{Draw, PosteriorSamples};
use super::state::{stick_weights, FitData, ModelState};

/// Stream id of the chain's random numbers.
const CHAIN_STREAM: u64 = 16;
const ANNEAL_START: f64 = 0.2;
const LOG_STEP_MIN: f64 = -9.21; // ln 1e-4
const LOG_STEP_MAX: f64 = 3.91; // ln 50
const LOG_STEP_MAX_UNIT: f64 = 2.30; // ln 10

/// Proposal scales on the log scale, one per scalar MH target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    /// Constant mode: `[μ, log σ, ξ]`. GP mode: `k * n + i`.
    pub gev: Vec<f64>,
    /// `(ln variance, ln range)` per GEV field.
    pub gp_hyper: Vec<f64>,
    pub log_tau: f64,
    pub logit_alpha: f64,
    pub logit_alpha_joint: f64,
    pub q: f64,
    pub log_a: Vec<f64>,
    pub b: Vec<f64>,
    pub log_gamma: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl StepSizes {
    fn new(cfg: &ChainConfig, n: usize, tl: usize, jl: usize) -> Self {
        let s = &cfg.steps;
        let gev = match cfg.surface {
            SurfaceMode::Constant => s.gev.iter().map(|v| v.ln()).collect(),
            SurfaceMode::Gp => (0..3).flat_map(|k| vec![s.gev[k].ln(); n]).collect(),
        };
        StepSizes {
            gev,
            gp_hyper: vec![s.gp_log_hyper.ln(); 6],
            log_tau: s.log_tau.ln(),
            logit_alpha: s.logit_alpha.ln(),
            logit_alpha_joint: s.logit_alpha.ln(),
            q: s.q.ln(),
            log_a: vec![s.log_latent.ln(); tl],
            b: vec![s.aux.ln(); tl],
            log_gamma: vec![s.log_latent.ln(); jl],
            lambda: vec![s.aux.ln(); jl],
        }
    }
}

/// Accepted and proposed move counts per block.
pub type Counters = BTreeMap<String, (u64, u64)>;

/// Everything needed to continue a chain exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ChainConfig,
    pub fit: FitData,
    pub state: ModelState,
    pub steps: StepSizes,
    pub rng: RngStream,
    pub iteration: usize,
    pub draws: Vec<Draw>,
    pub counters: Counters,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| Error::Io(format!("checkpoint encoding: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        bincode::deserialize(bytes).map_err(|e| Error::Data(format!("corrupt checkpoint: {e}")))
    }
}

/// Metropolis-within-Gibbs sampler for one chain.
pub struct Sampler {
    cfg: ChainConfig,
    fit: FitData,
    state: ModelState,
    caches: Caches,
    steps: StepSizes,
    rng: RngStream,
    iteration: usize,
    draws: Vec<Draw>,
    counters: Counters,
    prec: Option<Vec<GpPrecision>>,
    diameter: f64,
    scratch: Scratch,
    /// Sweeps of likelihood tempering; only pilot chains set this.
    anneal: usize,
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    lz: Vec<f64>,
    lx: Vec<f64>,
    ls: Vec<f64>,
    ls2: Vec<f64>,
    ll: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Gumbel method-of-moments fit `(μ, log σ)`.
fn gumbel_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 { x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let sigma = ((6.0 * v).sqrt() / std::f64::consts::PI).max(1e-3);
    (m - 0.577_215_664_901_532_9 * sigma, sigma.ln())
}

fn sample_var(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

impl Sampler {
    pub fn new(data: &Dataset, knots: Option<KnotSet>, cfg: &ChainConfig) -> Result<Self> {
        let fit = FitData::new(data, knots)?;
        Self::from_fit(fit, cfg)
    }

    pub fn from_fit(fit: FitData, cfg: &ChainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.uses_pilots() {
            return Self::from_pilots(fit, cfg);
        }
        Self::start(fit, cfg, CHAIN_STREAM)
    }

    fn start(fit: FitData, cfg: &ChainConfig, stream: u64) -> Result<Self> {
        let mut rng = RngStream::new(cfg.seed, stream);
        let state = initial_state(&fit, cfg, &mut rng)?;
        let n = fit.n_sites;
        let steps = StepSizes::new(cfg, n, state.log_a.len(), state.log_gamma.len());
        let mut s = Sampler {
            cfg: cfg.clone(),
            diameter: diameter(&fit.sites),
            caches: Caches::build(&fit, &state, !cfg.prior_only)?,
            fit,
            state,
            steps,
            rng,
            iteration: 0,
            draws: Vec::new(),
            counters: Counters::new(),
            prec: None,
            scratch: Scratch::default(),
            anneal: 0,
        };
        s.fix_initial_support()?;
        s.rebuild()?;
        Ok(s)
    }

    /// Pilot chains on separate streams, each tempering the likelihood over
    /// its first half. The pilot with the highest mean log-likelihood over
    /// its second half hands its state and step sizes to a fresh chain.
    fn from_pilots(fit: FitData, cfg: &ChainConfig) -> Result<Self> {
        let len = cfg.pilot;
        let pilots = (0..cfg.starts)
            .into_par_iter()
            .map(|j| {
                let pc = ChainConfig { iterations: len + 1, burn_in: len, starts: 1, ..cfg.clone() };
                let mut p = Self::start(fit.clone(), &pc, CHAIN_STREAM + 1 + j as u64)?;
                p.anneal = len / 2;
                let mut score = 0.0;
                for it in 0..len {
                    p.step()?;
                    if 2 * it >= len {
                        score += p.caches.total();
                    }
                }
                Ok((score, p.state, p.steps))
            })
            .collect::<Result<Vec<_>>>()?;
        let (_, state, steps) = pilots
            .into_iter()
            .reduce(|a, b| if b.0 > a.0 { b } else { a })
            .expect("at least two pilots");
        let mut s = Self::start(fit, cfg, CHAIN_STREAM)?;
        s.steps = steps;
        s.set_state(state)?;
        Ok(s)
    }

    /// Replace the observations (same sites and times); caches are rebuilt.
    pub fn set_observations(&mut self, y: Vec<f64>) -> Result<()> {
        if y.len() != self.fit.y.len() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("replacement observations must be finite and keep the layout".into()));
        }
        self.fit.y = y;
        self.rebuild()
    }

    /// Overwrite the state; caches are rebuilt.
    pub fn set_state(&mut self, state: ModelState) -> Result<()> {
        state.validate()?;
        self.state = state;
        self.rebuild()
    }

    pub fn resume(cp: Checkpoint) -> Result<Self> {
        cp.state.validate()?;
        let mut s = Sampler {
            diameter: diameter(&cp.fit.sites),
            caches: Caches::build(&cp.fit, &cp.state, !cp.config.prior_only)?,
            cfg: cp.config,
            fit: cp.fit,
            state: cp.state,
            steps: cp.steps,
            rng: cp.rng,
            iteration: cp.iteration,
            draws: cp.draws,
            counters: cp.counters,
            prec: None,
            scratch: Scratch::default(),
            anneal: 0,
        };
        s.rebuild()?;
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            fit: self.fit.clone(),
            state: self.state.clone(),
            steps: self.steps.clone(),
            rng: self.rng.clone(),
            iteration: self.iteration,
            draws: self.draws.clone(),
            counters: self.counters.clone(),
        }
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn fit(&self) -> &FitData {
        &self.fit
    }

    pub fn caches(&self) -> &Caches {
        &self.caches
    }

    pub fn steps(&self) -> &StepSizes {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut StepSizes {
        &mut self.steps
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn rng_mut(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    fn use_data(&self) -> bool {
        !self.cfg.prior_only
    }

    /// Recompute every cache from the state.
    fn rebuild(&mut self) -> Result<()> {
        self.caches = Caches::build(&self.fit, &self.state, self.use_data())?;
        if self.state.surface.mode == SurfaceMode::Gp {
            let hs = self.state.gp.as_ref().ok_or_else(|| Error::Numerical("GP surface without hyperparameters".into()))?;
            self.prec = Some(hs.iter().map(|h| GpPrecision::new(&self.fit.sites, h)).collect::<Result<_>>()?);
        }
        let len = self.fit.y.len();
        let sc = &mut self.scratch;
        sc.lz.resize(len, 0.0);
        sc.lx.resize(len, 0.0);
        sc.ll.resize(len, 0.0);
        sc.ls.resize(len.max(self.state.n_atoms * self.fit.n_sites), 0.0);
        sc.ls2.resize(len.max(self.state.n_atoms * self.fit.n_sites), 0.0);
        Ok(())
    }

    /// Pull ξ toward zero until every observation is inside the support.
    fn fix_initial_support(&mut self) -> Result<()> {
        if !self.use_data() {
            return Ok(());
        }
        for _ in 0..60 {
            if self.caches.total().is_finite() {
                return Ok(());
            }
            for v in self.state.surface.xi.iter_mut() {
                *v *= 0.5;
            }
            self.caches.refresh(&self.fit, &self.state, true);
        }
        if self.caches.total().is_finite() {
            return Ok(());
        }
        let bad = self.caches.ll.iter().position(|v| !v.is_finite()).unwrap_or(0);
        Err(Error::Numerical(format!(
            "initial log-likelihood is not finite (first bad observation: time {}, site {}, value {})",
            bad / self.fit.n_sites,
            bad % self.fit.n_sites,
            self.fit.y[bad]
        )))
    }

    fn count(&mut self, block: &str, acc: bool) {
        let e = self.counters.entry(block.to_string()).or_insert((0, 0));
        e.0 += acc as u64;
        e.1 += 1;
    }

    fn gain(&self) -> Option<f64> {
        (self.cfg.adapt && self.iteration < self.cfg.burn_in).then(|| ((self.iteration + 1) as f64).powf(-0.6))
    }

    fn adapt(&self, log_step: &mut f64, acc: bool, cap: f64) {
        if let Some(g) = self.gain() {
            *log_step = (*log_step + g * (acc as u8 as f64 - self.cfg.target_accept)).clamp(LOG_STEP_MIN, cap);
        }
    }

    /// Power on the likelihood: rises geometrically from `ANNEAL_START` to 1
    /// over the first `anneal` sweeps of a pilot chain, 1 otherwise.
    pub fn heat(&self) -> f64 {
        let k = self.anneal;
        if self.iteration >= k {
            1.0
        } else {
            ANNEAL_START.powf(1.0 - self.iteration as f64 / k as f64)
        }
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        let u = self.rng.open01();
        log_ratio.is_finite() && u.ln() < log_ratio || log_ratio == f64::INFINITY
    }

    /// One full sweep in the fixed block order.
    pub fn step(&mut self) -> Result<()> {
        self.rebuild()?;
        let b = self.cfg.blocks;
        if b.gev {
            match self.state.surface.mode {
                SurfaceMode::Constant => self.update_gev_constant(),
                SurfaceMode::Gp => {
                    self.update_gev_gp();
                    self.update_gp_hyper()?;
                }
            }
        }
        if b.tau {
            self.update_tau();
        }
        if b.alpha {
            self.update_alpha();
        }
        if (b.latent || b.aux) && self.state.kind.has_latent_a() {
            self.update_a_b()?;
        }
        if self.state.kind.has_atoms() {
            if b.atoms || b.aux {
                self.update_gamma_lambda()?;
            }
            if b.labels {
                self.update_labels()?;
            }
            if b.sticks {
                self.update_sticks();
            }
        }
        if b.q && self.state.kind == ModelKind::Mm {
            self.update_q()?;
        }
        if self.cfg.validate {
            self.check_coherence(1e-8)?;
        }
        self.store();
        self.iteration += 1;
        Ok(())
    }

    /// Largest absolute gap between the incremental caches and a rebuild.
    pub fn cache_gap(&self) -> Result<f64> {
        let fresh = Caches::build(&self.fit, &self.state, self.use_data())?;
        let gap = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).fold(0.0f64, |m, (x, y)| {
                if x == y {
                    m
                } else {
                    m.max((x - y).abs())
                }
            })
        };
        let mut g = gap(&fresh.ll, &self.caches.ll);
        if self.use_data() {
            g = g.max(gap(&fresh.ls_a, &self.caches.ls_a)).max(gap(&fresh.ls_g, &self.caches.ls_g));
        }
        Ok(g)
    }

    fn check_coherence(&self, tol: f64) -> Result<()> {
        self.state.validate()?;
        if self.use_data() && !self.caches.total().is_finite() {
            return Err(Error::Numerical("accepted state has non-finite likelihood".into()));
        }
        let g = self.cache_gap()?;
        if !(g <= tol) {
            return Err(Error::Numerical(format!("likelihood caches drifted by {g:e}")));
        }
        Ok(())
    }

    fn store(&mut self) {
        let it = self.iteration;
        if it < self.cfg.burn_in || (it - self.cfg.burn_in + 1) % self.cfg.thin != 0 {
            return;
        }
        let s = &self.state;
        self.draws.push(Draw {
            iteration: it,
            alpha: s.alpha,
            tau: s.tau,
            q: s.q,
            loglik: self.caches.total(),
            mu: s.surface.mu.clone(),
            log_sigma: s.surface.log_sigma.clone(),
            xi: s.surface.xi.clone(),
            gp: s.gp.clone(),
            log_gamma: s.log_gamma.clone(),
            pi: s.pi.clone(),
        });
    }

    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        while self.iteration < iteration.min(self.cfg.iterations) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<PosteriorSamples> {
        self.run_until(self.cfg.iterations)?;
        Ok(self.into_samples())
    }

    pub fn into_samples(self) -> PosteriorSamples {
        let acceptance = self
            .counters
            .iter()
            .map(|(k, (a, n))| (k.clone(), if *n > 0 { *a as f64 / *n as f64 } else { 0.0 }))
            .collect();
        PosteriorSamples {
            kind: self.state.kind,
            config: self.cfg,
            sites: self.fit.sites,
            knots: self.fit.knots.sites().to_vec(),
            n_times: self.fit.n_times,
            n_atoms: self.state.n_atoms,
            draws: self.draws,
            acceptance,
        }
    }

    fn lik_params(&self) -> LikParams {
        LikParams::new(self.state.kind, self.state.alpha, self.state.q)
    }

    /// Log density of observation `k = t·n + i` with residuals `(lz, lx)`.
    #[inline]
    fn obs_ll(&self, p: &LikParams, t: usize, i: usize, lz: f64, lx: f64, log_sigma: f64) -> f64 {
        let n = self.fit.n_sites;
        let k = t * n + i;
        let sa = if p.uses_a() { self.caches.ls_a[k] } else { 0.0 };
        let sg = if p.uses_g() { self.caches.ls_g[self.state.labels[t] * n + i] } else { 0.0 };
        p.ll(lz, lx, log_sigma, sa, sg)
    }

    fn gev_prior(&self, k: usize, v: f64) -> f64 {
        let p = &self.cfg.priors;
        match k {
            0 => p.log_mu(v),
            1 => p.log_log_sigma(v),
            _ => p.log_xi(v),
        }
    }

    /// Random-walk updates of the three constant GEV parameters.
    pub fn update_gev_constant(&mut self) {
        let n = self.fit.n_sites;
        let p = self.lik_params();
        for k in 0..3 {
            let cur = self.state.surface.field(k)[0];
            let mut ls = self.steps.gev[k];
            let cand = cur + ls.exp() * self.rng.std_normal();
            let mut lr = self.gev_prior(k, cand) - self.gev_prior(k, cur);
            let mut surf = self.state.surface.clone();
            surf.field_mut(k).iter_mut().for_each(|v| *v = cand);
            if self.use_data() && lr.is_finite() {
                let mut sc = std::mem::take(&mut self.scratch);
                residuals_into(&self.fit, &surf.mu, &surf.log_sigma, &surf.xi, &mut sc.lz, &mut sc.lx);
                let mut tot = 0.0;
                for t in 0..self.fit.n_times {
                    for i in 0..n {
                        let q = t * n + i;
                        sc.ll[q] = self.obs_ll(&p, t, i, sc.lz[q], sc.lx[q], surf.log_sigma[i]);
                        tot += sc.ll[q];
                    }
                }
                lr += self.heat() * (tot - self.caches.total());
                self.scratch = sc;
            }
            let acc = self.accept(lr);
            if acc {
                self.state.surface = surf;
                if self.use_data() {
                    std::mem::swap(&mut self.caches.lz, &mut self.scratch.lz);
                    std::mem::swap(&mut self.caches.lx, &mut self.scratch.lx);
                    std::mem::swap(&mut self.caches.ll, &mut self.scratch.ll);
                }
            }
            self.adapt(&mut ls, acc, LOG_STEP_MAX);
            self.steps.gev[k] = ls;
            self.count("gev", acc);
        }
    }

    /// Site-wise random-walk updates of GP surfaces.
    pub fn update_gev_gp(&mut self) {
        let (n, nt) = (self.fit.n_sites, self.fit.n_times);
        let p = self.lik_params();
        let prec = self.prec.take().expect("GP precision cached");
        let mut col = vec![(0.0, 0.0, 0.0); nt];
        for k in 0..3 {
            for i in 0..n {
                let cur = self.state.surface.field(k)[i];
                let mut ls = self.steps.gev[k * n + i];
                let d = ls.exp() * self.rng.std_normal();
                let mut lr = prec[k].delta(self.state.surface.field(k), i, d);
                let mut par = [self.state.surface.mu[i], self.state.surface.log_sigma[i], self.state.surface.xi[i]];
                par[k] = cur + d;
                if self.use_data() {
                    let mut diff = 0.0;
                    for (t, c) in col.iter_mut().enumerate() {
                        let q = t * n + i;
                        let (lz, lx) = residual(self.fit.y[q], par[0], par[1], par[2]);
                        let v = self.obs_ll(&p, t, i, lz, lx, par[1]);
                        *c = (lz, lx, v);
                        diff += v - self.caches.ll[q];
                    }
                    lr += self.heat() * diff;
                }
                let acc = self.accept(lr);
                if acc {
                    self.state.surface.field_mut(k)[i] = cur + d;
                    if self.use_data() {
                        for (t, c) in col.iter().enumerate() {
                            let q = t * n + i;
                            self.caches.lz[q] = c.0;
                            self.caches.lx[q] = c.1;
                            self.caches.ll[q] = c.2;
                        }
                    }
                }
                self.adapt(&mut ls, acc, LOG_STEP_MAX);
                self.steps.gev[k * n + i] = ls;
                self.count("gev", acc);
            }
        }
        self.prec = Some(prec);
    }

    /// Gibbs update of the mean coefficients and log-scale MH on variance
    /// and range of each GP surface.
    pub fn update_gp_hyper(&mut self) -> Result<()> {
        let sites = self.fit.sites.clone();
        let n = sites.len();
        let mut prec = self.prec.take().expect("GP precision cached");
        let mut hs = self.state.gp.clone().expect("GP hyperparameters");
        let x = DMatrix::from_fn(n, 3, |i, c| match c {
            0 => 1.0,
            1 => sites[i].x,
            _ => sites[i].y,
        });
        for k in 0..3 {
            let f = DVector::from_column_slice(self.state.surface.field(k));
            // β | f ~ N(P⁻¹ XᵀQf, P⁻¹) with P = XᵀQX + I/sd²
            let qx = &prec[k].precision * &x;
            let sd = self.cfg.priors.sd(k);
            let pm = x.transpose() * &qx + DMatrix::identity(3, 3) / (sd * sd);
            let rhs = qx.transpose() * &f;
            let chol = pm
                .cholesky()
                .ok_or_else(|| Error::Numerical("posterior precision of GP mean is not positive definite".into()))?;
            let m = chol.solve(&rhs);
            let z = DVector::from_fn(3, |_, _| self.rng.std_normal());
            let e = chol.l().transpose().solve_upper_triangular(&z).expect("triangular solve");
            let beta = m + e;
            hs[k].beta = [beta[0], beta[1], beta[2]];
            prec[k].mean = crate::gp::mean_vector(&sites, &hs[k]);

            for which in 0..2 {
                let mut ls = self.steps.gp_hyper[2 * k + which];
                let step = ls.exp() * self.rng.std_normal();
                let mut h2 = hs[k];
                if which == 0 {
                    h2.variance *= step.exp();
                } else {
                    h2.range *= step.exp();
                }
                let fv = self.state.surface.field(k);
                let (acc, newp) = match GpPrecision::new(&sites, &h2) {
                    Ok(p2) if h2.variance.is_finite() && h2.range.is_finite() && h2.variance > 0.0 && h2.range > 0.0 => {
                        let lr = p2.logpdf(fv) - prec[k].logpdf(fv)
                            + self.cfg.gp_prior.log_density(&h2, self.diameter)
                            - self.cfg.gp_prior.log_density(&hs[k], self.diameter)
                            + step;
                        (self.accept(lr), Some(p2))
                    }
                    _ => (false, None),
                };
                if acc {
                    hs[k] = h2;
                    prec[k] = newp.expect("accepted precision");
                }
                self.adapt(&mut ls, acc, LOG_STEP_MAX);
                self.steps.gp_hyper[2 * k + which] = ls;
                self.count("gp_hyper", acc);
            }
        }
        self.state.gp = Some(hs);
        self.prec = Some(prec);
        Ok(())
    }

    /// Full recompute of `ln S` and `ll` for a candidate `(α, τ, q)` into scratch.
    /// Returns the candidate total and the candidate weights.
    fn candidate_ll(&mut self, alpha: f64, tau: f64, q: f64) -> Option<(f64, Option<crate::geometry::WeightMatrix>)> {
        let w_new = if tau != self.state.tau {
            match kernel_weights(&self.fit.sites, &self.fit.knots, tau) {
                Ok(w) => Some(w),
                Err(_) => return None,
            }
        } else {
            None
        };
        if !self.use_data() {
            return Some((0.0, w_new));
        }
        let mut st = self.state.clone();
        st.alpha = alpha;
        st.tau = tau;
        st.q = q;
        let recompute_s = alpha != self.state.alpha || w_new.is_some();
        let tot = self.candidate_total(&st, w_new.as_ref(), recompute_s);
        Some((tot, w_new))
    }

    fn candidate_total(&mut self, st: &ModelState, w_new: Option<&crate::geometry::WeightMatrix>, recompute_s: bool) -> f64 {
        let w = w_new.unwrap_or(&self.caches.weights);
        let mut sc = std::mem::take(&mut self.scratch);
        let n = self.fit.n_sites;
        if recompute_s {
            if st.kind.has_latent_a() {
                ls_a_into(st, w, &mut sc.ls[..self.fit.y.len()]);
            }
            if st.kind.has_atoms() {
                ls_g_into(st, w, &mut sc.ls2[..st.n_atoms * n]);
            }
        }
        let p = LikParams::new(st.kind, st.alpha, st.q);
        {
            let (ls_a, ls_g) = if recompute_s {
                (&sc.ls[..], &sc.ls2[..])
            } else {
                (&self.caches.ls_a[..], &self.caches.ls_g[..])
            };
            let mut out = std::mem::take(&mut sc.ll);
            ll_into(st, &p, n, &self.caches.lz, &self.caches.lx, ls_a, ls_g, &mut out);
            sc.ll = out;
        }
        let tot = sc.ll.iter().sum();
        self.scratch = sc;
        tot
    }

    /// Adopt the scratch buffers filled by [`Self::candidate_ll`].
    fn adopt_candidate(&mut self, recompute_s: bool) {
        if !self.use_data() {
            return;
        }
        let n = self.fit.n_sites;
        std::mem::swap(&mut self.caches.ll, &mut self.scratch.ll);
        if recompute_s {
            let len = self.fit.y.len();
            if self.state.kind.has_latent_a() {
                self.caches.ls_a.copy_from_slice(&self.scratch.ls[..len]);
            }
            if self.state.kind.has_atoms() {
                let m = self.state.n_atoms * n;
                self.caches.ls_g.copy_from_slice(&self.scratch.ls2[..m]);
            }
        }
    }

    /// Log-scale random walk on the kernel bandwidth.
    pub fn update_tau(&mut self) {
        let cur = self.state.tau;
        let mut ls = self.steps.log_tau;
        let step = ls.exp() * self.rng.std_normal();
        let cand = cur * step.exp();
        let pr = self.cfg.priors;
        let mut acc = false;
        if cand > 0.0 && cand.is_finite() {
            if let Some((tot, w)) = self.candidate_ll(self.state.alpha, cand, self.state.q) {
                let lr = self.heat() * (tot - self.caches.total()) + pr.log_tau(cand) - pr.log_tau(cur) + step;
                acc = self.accept(lr);
                if acc {
                    self.state.tau = cand;
                    if let Some(w) = w {
                        self.caches.weights = w;
                    }
                    self.adopt_candidate(true);
                }
            }
        }
        self.adapt(&mut ls, acc, LOG_STEP_MAX);
        self.steps.log_tau = ls;
        self.count("tau", acc);
    }

    /// Prior `Σ ln p(latent, aux | α)` over every positive-stable latent.
    pub fn latent_prior(&self, alpha: f64) -> f64 {
        let s = &self.state;
        let mut tot = 0.0;
        if s.kind.has_latent_a() {
            for (la, b) in s.log_a.iter().zip(&s.b) {
                tot += ps_aux_logdensity_lg(*la, *b, alpha);
            }
        }
        if s.kind.has_atoms() {
            for (lg, l) in s.log_gamma.iter().zip(&s.lambda) {
                tot += ps_aux_logdensity_lg(*lg, *l, alpha);
            }
        }
        tot
    }

    /// Logit-scale random walk on α, followed by a joint move of α and the
    /// positive stable latents.
    pub fn update_alpha(&mut self) {
        let cur = self.state.alpha;
        let mut ls = self.steps.logit_alpha;
        let cand = sigmoid(logit(cur) + ls.exp() * self.rng.std_normal());
        let mut acc = false;
        if cand > 0.0 && cand < 1.0 {
            if let Some((tot, _)) = self.candidate_ll(cand, self.state.tau, self.state.q) {
                let pr = &self.cfg.priors;
                let lr = self.heat() * (tot - self.caches.total()) + self.latent_prior(cand) - self.latent_prior(cur)
                    + pr.log_alpha(cand)
                    - pr.log_alpha(cur)
                    + (cand * (1.0 - cand)).ln()
                    - (cur * (1.0 - cur)).ln();
                acc = self.accept(lr);
                if acc {
                    self.state.alpha = cand;
                    self.adopt_candidate(true);
                }
            }
        }
        self.adapt(&mut ls, acc, LOG_STEP_MAX);
        self.steps.logit_alpha = ls;
        self.count("alpha", acc);
        if self.cfg.blocks.alpha_joint && (self.state.kind.has_latent_a() || self.state.kind.has_atoms()) {
            self.update_alpha_joint();
        }
    }

    /// Moves α together with every latent, holding each latent's conditional
    /// quantile given its auxiliary fixed. Given `B`, `e = c(B) A^{−α/(1−α)}`
    /// is standard exponential, so the latent prior nearly cancels and α is
    /// no longer pinned by hundreds of latents.
    pub fn update_alpha_joint(&mut self) {
        let cur = self.state.alpha;
        let mut ls = self.steps.logit_alpha_joint;
        let cand = sigmoid(logit(cur) + ls.exp() * self.rng.std_normal());
        let mut acc = false;
        if cand > 1e-6 && cand < 1.0 - 1e-9 {
            let mut st = self.state.clone();
            st.alpha = cand;
            let (r0, r1) = (cur / (1.0 - cur), cand / (1.0 - cand));
            let mut lr = 0.0;
            let mut ok = true;
            let mut move_all = |lat: &mut [f64], aux: &[f64]| {
                for (x, &b) in lat.iter_mut().zip(aux) {
                    let le = ps_aux_log_c(b, cur) - r0 * *x;
                    let y = (ps_aux_log_c(b, cand) - le) / r1;
                    if !y.is_finite() {
                        ok = false;
                        return;
                    }
                    lr += ps_aux_logdensity_lg(y, b, cand) + y - ps_aux_logdensity_lg(*x, b, cur) - *x + r0.ln() - r1.ln();
                    *x = y;
                }
            };
            if st.kind.has_latent_a() {
                let b = st.b.clone();
                move_all(&mut st.log_a, &b);
            }
            if st.kind.has_atoms() {
                let l = st.lambda.clone();
                move_all(&mut st.log_gamma, &l);
            }
            if ok && lr.is_finite() {
                let pr = &self.cfg.priors;
                lr += pr.log_alpha(cand) - pr.log_alpha(cur) + (cand * (1.0 - cand)).ln() - (cur * (1.0 - cur)).ln();
                if self.use_data() {
                    lr += self.heat() * (self.candidate_total(&st, None, true) - self.caches.total());
                }
                acc = self.accept(lr);
                if acc {
                    self.state.alpha = cand;
                    self.state.log_a = st.log_a;
                    self.state.log_gamma = st.log_gamma;
                    self.adopt_candidate(true);
                }
            }
        }
        self.adapt(&mut ls, acc, LOG_STEP_MAX);
        self.steps.logit_alpha_joint = ls;
        self.count("alpha_joint", acc);
    }

    /// New `ln S` of the sites after one latent of a row moves from `old` to
    /// `new`. `row` holds the latent row with `new` already written in.
    fn shifted_ls(&self, cur_ls: &[f64], row: &[f64], l: usize, old: f64, new: f64, out: &mut [f64]) {
        let a = self.state.alpha;
        let inv = 1.0 / a;
        let e = (new - old).exp_m1();
        let w = &self.caches.weights;
        for (i, o) in out.iter_mut().enumerate() {
            let lw = w.log_row(i)[l];
            let share = (old + inv * lw - cur_ls[i]).exp();
            let r = e * share;
            *o = if r > -0.5 && r.is_finite() && cur_ls[i].is_finite() {
                cur_ls[i] + r.ln_1p()
            } else {
                log_theta_pow(row, w.log_row(i), a)
            };
        }
    }

    /// Log acceptance ratio of moving `ln A_{tl}` to `cand`; fills the
    /// candidate `ln S` and log densities of row `t`.
    fn a_ratio(&mut self, t: usize, l: usize, cand: f64, new_ls: &mut [f64], new_ll: &mut [f64]) -> f64 {
        let (n, l_k) = (self.fit.n_sites, self.state.n_knots);
        let idx = t * l_k + l;
        let (la, b, alpha) = (self.state.log_a[idx], self.state.b[idx], self.state.alpha);
        // log-normal walk: the Jacobian turns the density in A into one in ln A
        let mut lr = ps_aux_logdensity_lg(cand, b, alpha) + cand - ps_aux_logdensity_lg(la, b, alpha) - la;
        if self.use_data() && lr.is_finite() {
            let p = self.lik_params();
            self.state.log_a[idx] = cand;
            let row = &self.state.log_a[t * l_k..(t + 1) * l_k];
            self.shifted_ls(&self.caches.ls_a[t * n..(t + 1) * n], row, l, la, cand, new_ls);
            self.state.log_a[idx] = la;
            let mut diff = 0.0;
            for i in 0..n {
                let q = t * n + i;
                let sg = if p.uses_g() { self.caches.ls_g[self.state.labels[t] * n + i] } else { 0.0 };
                new_ll[i] = p.ll(self.caches.lz[q], self.caches.lx[q], self.state.surface.log_sigma[i], new_ls[i], sg);
                diff += new_ll[i] - self.caches.ll[q];
            }
            lr += self.heat() * diff;
        }
        lr
    }

    /// Log acceptance ratio of the move `ln A_{tl} → cand`.
    pub fn latent_a_log_ratio(&mut self, t: usize, l: usize, cand: f64) -> f64 {
        let n = self.fit.n_sites;
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        self.a_ratio(t, l, cand, &mut a, &mut b)
    }

    /// Per-entry MH for the HEVP latents `A` (log-normal walk) and their
    /// auxiliaries `B` (truncated-normal proposals, prior-only target).
    pub fn update_a_b(&mut self) -> Result<()> {
        let (n, l_k) = (self.fit.n_sites, self.state.n_knots);
        let mut new_ls = vec![0.0; n];
        let mut new_ll = vec![0.0; n];
        for t in 0..self.state.n_times {
            for l in 0..l_k {
                let idx = t * l_k + l;
                if self.cfg.blocks.latent {
                    let mut ls = self.steps.log_a[idx];
                    let cand = self.state.log_a[idx] + ls.exp() * self.rng.std_normal();
                    let lr = self.a_ratio(t, l, cand, &mut new_ls, &mut new_ll);
                    let acc = self.accept(lr);
                    if acc {
                        self.state.log_a[idx] = cand;
                        if self.use_data() {
                            self.caches.ls_a[t * n..(t + 1) * n].copy_from_slice(&new_ls);
                            self.caches.ll[t * n..(t + 1) * n].copy_from_slice(&new_ll);
                        }
                    }
                    self.adapt(&mut ls, acc, LOG_STEP_MAX);
                    self.steps.log_a[idx] = ls;
                    self.count("latent_a", acc);
                }
                if self.cfg.blocks.aux {
                    let acc = self.update_aux(idx, true)?;
                    self.count("aux_b", acc);
                }
            }
        }
        Ok(())
    }

    /// Truncated-normal MH on one auxiliary variable.
    fn update_aux(&mut self, idx: usize, hevp: bool) -> Result<bool> {
        let alpha = self.state.alpha;
        let (lat, cur, mut ls) = if hevp {
            (self.state.log_a[idx], self.state.b[idx], self.steps.b[idx])
        } else {
            (self.state.log_gamma[idx], self.state.lambda[idx], self.steps.lambda[idx])
        };
        let s = ls.exp();
        let cand = truncated_normal_sample(cur, s, 0.0, 1.0, &mut self.rng)?;
        let lr = ps_aux_logdensity_lg(lat, cand, alpha) - ps_aux_logdensity_lg(lat, cur, alpha)
            + truncated_normal_logpdf(cur, cand, s, 0.0, 1.0)
            - truncated_normal_logpdf(cand, cur, s, 0.0, 1.0);
        let acc = self.accept(lr);
        self.adapt(&mut ls, acc, LOG_STEP_MAX_UNIT);
        if hevp {
            if acc {
                self.state.b[idx] = cand;
            }
            self.steps.b[idx] = ls;
        } else {
            if acc {
                self.state.lambda[idx] = cand;
            }
            self.steps.lambda[idx] = ls;
        }
        Ok(acc)
    }

    /// Per-entry MH for the atoms `γ` and their auxiliaries `λ`. The
    /// likelihood of an atom involves only the times assigned to it.
    pub fn update_gamma_lambda(&mut self) -> Result<()> {
        let (n, l_k, nj) = (self.fit.n_sites, self.state.n_knots, self.state.n_atoms);
        let p = self.lik_params();
        let alpha = self.state.alpha;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); nj];
        for (t, &g) in self.state.labels.iter().enumerate() {
            members[g].push(t);
        }
        let mut new_ls = vec![0.0; n];
        let mut new_ll: Vec<f64> = Vec::new();
        for j in 0..nj {
            for l in 0..l_k {
                let idx = j * l_k + l;
                if !self.cfg.blocks.atoms {
                    if self.cfg.blocks.aux {
                        let acc = self.update_aux(idx, false)?;
                        self.count("aux_lambda", acc);
                    }
                    continue;
                }
                let lg = self.state.log_gamma[idx];
                let lam = self.state.lambda[idx];
                let mut ls = self.steps.log_gamma[idx];
                let cand = lg + ls.exp() * self.rng.std_normal();
                let mut lr = ps_aux_logdensity_lg(cand, lam, alpha) + cand - ps_aux_logdensity_lg(lg, lam, alpha) - lg;
                self.state.log_gamma[idx] = cand;
                if self.use_data() && lr.is_finite() {
                    let row = &self.state.log_gamma[j * l_k..(j + 1) * l_k];
                    self.shifted_ls(&self.caches.ls_g[j * n..(j + 1) * n], row, l, lg, cand, &mut new_ls);
                    if p.uses_g() {
                        new_ll.clear();
                        let mut diff = 0.0;
                        for &t in &members[j] {
                            for (i, &sg) in new_ls.iter().enumerate() {
                                let q = t * n + i;
                                let sa = if p.uses_a() { self.caches.ls_a[q] } else { 0.0 };
                                let v = p.ll(self.caches.lz[q], self.caches.lx[q], self.state.surface.log_sigma[i], sa, sg);
                                diff += v - self.caches.ll[q];
                                new_ll.push(v);
                            }
                        }
                        lr += self.heat() * diff;
                    }
                }
                let acc = self.accept(lr);
                if acc {
                    if self.use_data() {
                        self.caches.ls_g[j * n..(j + 1) * n].copy_from_slice(&new_ls);
                        if p.uses_g() {
                            for (m, &t) in members[j].iter().enumerate() {
                                self.caches.ll[t * n..(t + 1) * n].copy_from_slice(&new_ll[m * n..(m + 1) * n]);
                            }
                        }
                    }
                } else {
                    self.state.log_gamma[idx] = lg;
                }
                self.adapt(&mut ls, acc, LOG_STEP_MAX);
                self.steps.log_gamma[idx] = ls;
                self.count("atoms", acc);

                if self.cfg.blocks.aux {
                    let acc = self.update_aux(idx, false)?;
                    self.count("aux_lambda", acc);
                }
            }
        }
        Ok(())
    }

    /// Unnormalized log probabilities of each atom label for time `t`.
    pub fn label_log_weights(&self, t: usize) -> Vec<f64> {
        let n = self.fit.n_sites;
        let p = self.lik_params();
        let h = self.heat();
        (0..self.state.n_atoms)
            .map(|j| {
                let w = self.state.pi[j].ln();
                let mut ll = 0.0;
                if self.use_data() && p.uses_g() && w > f64::NEG_INFINITY {
                    for i in 0..n {
                        let q = t * n + i;
                        let sa = if p.uses_a() { self.caches.ls_a[q] } else { 0.0 };
                        ll += p.ll(
                            self.caches.lz[q],
                            self.caches.lx[q],
                            self.state.surface.log_sigma[i],
                            sa,
                            self.caches.ls_g[j * n + i],
                        );
                    }
                }
                w + h * ll
            })
            .collect()
    }

    /// Gibbs update of the cluster labels.
    pub fn update_labels(&mut self) -> Result<()> {
        let n = self.fit.n_sites;
        let p = self.lik_params();
        for t in 0..self.state.n_times {
            let lw = self.label_log_weights(t);
            let g = categorical_sample_log(&lw, &mut self.rng)?;
            self.state.labels[t] = g;
            if self.use_data() && p.uses_g() {
                for i in 0..n {
                    let q = t * n + i;
                    let sa = if p.uses_a() { self.caches.ls_a[q] } else { 0.0 };
                    self.caches.ll[q] = p.ll(
                        self.caches.lz[q],
                        self.caches.lx[q],
                        self.state.surface.log_sigma[i],
                        sa,
                        self.caches.ls_g[g * n + i],
                    );
                }
            }
        }
        Ok(())
    }

    /// Conjugate Beta update of the stick variables; `v_J` stays at 1.
    pub fn update_sticks(&mut self) {
        let nj = self.state.n_atoms;
        let mut counts = vec![0usize; nj];
        for &g in &self.state.labels {
            counts[g] += 1;
        }
        let mut beyond = self.state.n_times;
        for j in 0..nj - 1 {
            beyond -= counts[j];
            self.state.v[j] = self.rng.beta(1.0 + counts[j] as f64, self.cfg.stick_concentration + beyond as f64);
        }
        self.state.v[nj - 1] = 1.0;
        self.state.pi = stick_weights(&self.state.v);
    }

    /// Truncated-normal MH on the mixing parameter.
    pub fn update_q(&mut self) -> Result<()> {
        let cur = self.state.q;
        let mut ls = self.steps.q;
        let s = ls.exp();
        let cand = truncated_normal_sample(cur, s, 0.0, 1.0, &mut self.rng)?;
        let mut acc = false;
        if let Some((tot, _)) = self.candidate_ll(self.state.alpha, self.state.tau, cand) {
            let pr = &self.cfg.priors;
            let lr = self.heat() * (tot - self.caches.total()) + pr.log_q(cand) - pr.log_q(cur)
                + truncated_normal_logpdf(cur, cand, s, 0.0, 1.0)
                - truncated_normal_logpdf(cand, cur, s, 0.0, 1.0);
            acc = self.accept(lr);
            if acc {
                self.state.q = cand;
                self.adopt_candidate(false);
            }
        }
        self.adapt(&mut ls, acc, LOG_STEP_MAX_UNIT);
        self.steps.q = ls;
        self.count("q", acc);
        Ok(())
    }
}

/// Starting state: moment-matched GEV surfaces, α = 0.5, τ = half the
/// median knot spacing, unit latents, uniform labels, sticks from the prior.
pub fn initial_state(fit: &FitData, cfg: &ChainConfig, rng: &mut RngStream) -> Result<ModelState> {
    let (n, nt, l) = (fit.n_sites, fit.n_times, fit.n_knots());
    let kind = cfg.model;
    let init = &cfg.init;
    let column = |i: usize| (0..nt).map(|t| fit.get(t, i)).collect::<Vec<_>>();
    let (surface, gp) = match cfg.surface {
        SurfaceMode::Constant => {
            let (mu, lsig) = gumbel_moments(&fit.y);
            let s = GevSurface::constant(
                n,
                init.mu.unwrap_or(mu),
                init.log_sigma.unwrap_or(lsig),
                init.xi.unwrap_or(0.0),
            );
            (s, None)
        }
        SurfaceMode::Gp => {
            let mut mu = Vec::with_capacity(n);
            let mut lsig = Vec::with_capacity(n);
            for i in 0..n {
                let (m, s) = gumbel_moments(&column(i));
                mu.push(init.mu.unwrap_or(m));
                lsig.push(init.log_sigma.unwrap_or(s));
            }
            let xi = vec![init.xi.unwrap_or(0.0); n];
            let range = diameter(&fit.sites) / 4.0;
            let hs = [&mu, &lsig, &xi]
                .iter()
                .map(|f| {
                    let m = f.iter().sum::<f64>() / n as f64;
                    GpHyper::new([m, 0.0, 0.0], sample_var(f).max(0.05), range, cfg.gp_prior.smoothness)
                })
                .collect::<Result<Vec<_>>>()?;
            (GevSurface { mu, log_sigma: lsig, xi, mode: SurfaceMode::Gp }, Some(hs))
        }
    };
    let tau = init.tau.unwrap_or_else(|| {
        let m = fit.knots.median_spacing();
        if m > 0.0 && m.is_finite() {
            m / 2.0
        } else {
            1.0
        }
    });
    let q = match kind {
        ModelKind::Hevp => 1.0,
        ModelKind::Sb => 0.0,
        ModelKind::Mm => init.q.unwrap_or(0.5),
    };
    let nj = if kind.has_atoms() { cfg.n_atoms.unwrap_or(nt) } else { 0 };
    let (log_a, b) = if kind.has_latent_a() { (vec![0.0; nt * l], vec![0.5; nt * l]) } else { (vec![], vec![]) };
    let (log_gamma, lambda, labels, v) = if kind.has_atoms() {
        let labels = (0..nt).map(|_| rng.below(nj)).collect();
        let mut v: Vec<f64> = (0..nj).map(|_| rng.beta(1.0, cfg.stick_concentration)).collect();
        v[nj - 1] = 1.0;
        (vec![0.0; nj * l], vec![0.5; nj * l], labels, v)
    } else {
        (vec![], vec![], vec![], vec![])
    };
    let pi = stick_weights(&v);
    let st = ModelState {
        kind,
        surface,
        gp,
        alpha: init.alpha.unwrap_or(0.5),
        tau,
        q,
        log_a,
        b,
        log_gamma,
        lambda,
        labels,
        v,
        pi,
        n_times: nt,
        n_knots: l,
        n_atoms: nj,
    };
    st.validate()?;
    Ok(st)
}

/// Run one chain from scratch.
pub fn run_chain(cfg: &ChainConfig, data: &Dataset, knots: Option<KnotSet>) -> Result<PosteriorSamples> {
    Sampler::new(data, knots, cfg)?.run()
}

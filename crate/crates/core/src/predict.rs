//! Posterior predictive quantiles, tail-dependence estimates, MMSE scores
//! and k-fold cross-validation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::GevParams;
use crate::geometry::{kernel_weights, KnotSet, Site};
use crate::gp::gp_conditional;
use crate::mcmc::{run_chain, ChainConfig, Draw, PosteriorSamples};
use crate::models::{HevpSpec, MmSpec, ModelKind, ResidualModel, SbAtoms};
use crate::rng::RngStream;
use crate::simulate::Dataset;
use crate::stats::quantile_sorted;
use crate::{Error, Result};

/// Joint exceedance count below which an empirical χ is flagged.
pub const MIN_JOINT_EXCEEDANCES: usize = 5;

/// Posterior mean and sd of pointwise quantiles; `mean[i * K + k]` is site
/// `i` at level `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    pub sites: Vec<Site>,
    pub levels: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl QuantileGrid {
    pub fn mean_at(&self, site: usize, level: usize) -> f64 {
        self.mean[site * self.levels.len() + level]
    }

    pub fn sd_at(&self, site: usize, level: usize) -> f64 {
        self.sd[site * self.levels.len() + level]
    }

    /// Means at one level, one per site.
    pub fn level_means(&self, level: usize) -> Vec<f64> {
        (0..self.sites.len()).map(|i| self.mean_at(i, level)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiEstimate {
    pub i: usize,
    pub j: usize,
    pub u: f64,
    pub estimate: f64,
    /// Fewer than five joint exceedances behind an empirical estimate.
    pub low_count: bool,
}

/// Levels must lie strictly inside (0,1) and be strictly increasing.
pub fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::domain("no quantile levels"));
    }
    if let Some(u) = levels.iter().find(|u| !(**u > 0.0 && **u < 1.0)) {
        return Err(Error::domain(format!("level must lie in (0,1), got {u}")));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain("levels must be strictly increasing"));
    }
    Ok(())
}

/// All pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn site_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Residual process of one draw, evaluated at `sites`.
pub fn draw_residual(samples: &PosteriorSamples, draw: &Draw, sites: &[Site]) -> Result<ResidualModel> {
    let knots = KnotSet::new(samples.knots.clone())?;
    let w = kernel_weights(sites, &knots, draw.tau)?;
    let atoms = || {
        let l = samples.knots.len();
        let rows = draw.log_gamma.chunks(l).map(|c| c.to_vec()).collect();
        SbAtoms::from_log(rows, draw.pi.clone())
    };
    Ok(match samples.kind {
        ModelKind::Hevp => ResidualModel::Hevp(HevpSpec::new(draw.alpha, w)?),
        ModelKind::Sb => ResidualModel::Sb { alpha: draw.alpha, weights: w, atoms: atoms()? },
        ModelKind::Mm => ResidualModel::Mm(MmSpec::new(draw.q, HevpSpec::new(draw.alpha, w)?, atoms()?)?),
    })
}

/// GEV parameters of one draw at `sites`; GP surfaces are kriged to their
/// conditional mean.
pub fn draw_gev(samples: &PosteriorSamples, draw: &Draw, sites: &[Site]) -> Result<Vec<GevParams>> {
    let fields = [&draw.mu, &draw.log_sigma, &draw.xi];
    let values: Vec<Vec<f64>> = match &draw.gp {
        None => fields.iter().map(|f| vec![f[0]; sites.len()]).collect(),
        Some(hyper) => fields
            .iter()
            .zip(hyper)
            .map(|(f, h)| gp_conditional(sites, f, &samples.sites, h).map(|(m, _)| m))
            .collect::<Result<_>>()?,
    };
    Ok((0..sites.len())
        .map(|i| GevParams { mu: values[0][i], sigma: values[1][i].exp(), xi: values[2][i] })
        .collect())
}

/// Quantiles of one draw, row-major `sites × levels`.
pub fn draw_quantiles(samples: &PosteriorSamples, draw: &Draw, sites: &[Site], levels: &[f64]) -> Result<Vec<f64>> {
    let model = draw_residual(samples, draw, sites)?;
    let gev = draw_gev(samples, draw, sites)?;
    let mut out = Vec::with_capacity(sites.len() * levels.len());
    for (i, g) in gev.iter().enumerate() {
        let m = model.marginal(i);
        for &u in levels {
            out.push(g.from_frechet_log(m.log_quantile(u)?));
        }
    }
    Ok(out)
}

fn mean_sd(per_draw: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = per_draw.len() as f64;
    let mut mean = vec![0.0; width];
    for d in per_draw {
        mean.iter_mut().zip(d).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; width];
    for d in per_draw {
        var.iter_mut().zip(d.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let denom = (n - 1.0).max(1.0);
    (mean, var.into_iter().map(|s| (s / denom).sqrt()).collect())
}

fn need_draws(samples: &PosteriorSamples) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::domain("no stored draws"));
    }
    Ok(())
}

pub fn predict_quantiles(samples: &PosteriorSamples, new_sites: &[Site], levels: &[f64]) -> Result<QuantileGrid> {
    check_levels(levels)?;
    need_draws(samples)?;
    if new_sites.is_empty() {
        return Err(Error::domain("no prediction sites"));
    }
    let per_draw: Vec<Vec<f64>> = samples
        .draws
        .par_iter()
        .map(|d| draw_quantiles(samples, d, new_sites, levels))
        .collect::<Result<_>>()?;
    let (mean, sd) = mean_sd(&per_draw, new_sites.len() * levels.len());
    Ok(QuantileGrid { sites: new_sites.to_vec(), levels: levels.to_vec(), mean, sd })
}

/// Average ranks, 1-based.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            r[i] = avg;
        }
        k = e + 1;
    }
    r
}

/// Rank-based `P̂(F̂_i > u, F̂_j > u) / P̂(F̂_j > u)` with `F̂ = rank/(T+1)`.
pub fn empirical_chi(data: &Dataset, i: usize, j: usize, u: f64) -> Result<ChiEstimate> {
    Ok(empirical_chi_levels(data, i, j, &[u])?[0])
}

/// [`empirical_chi`] at several levels, ranking each column once.
pub fn empirical_chi_levels(data: &Dataset, i: usize, j: usize, levels: &[f64]) -> Result<Vec<ChiEstimate>> {
    let n = data.n_sites();
    if i >= n || j >= n {
        return Err(Error::domain(format!("site pair ({i}, {j}) out of range for {n} sites")));
    }
    if data.n_times < 20 {
        return Err(Error::domain(format!("empirical dependence needs at least 20 times, got {}", data.n_times)));
    }
    let t1 = (data.n_times + 1) as f64;
    let fi: Vec<f64> = average_ranks(&data.column(i)).into_iter().map(|r| r / t1).collect();
    let fj: Vec<f64> = average_ranks(&data.column(j)).into_iter().map(|r| r / t1).collect();
    levels
        .iter()
        .map(|&u| {
            if !(u > 0.0 && u < 1.0) {
                return Err(Error::domain(format!("level must lie in (0,1), got {u}")));
            }
            let marg = fj.iter().filter(|&&v| v > u).count();
            let joint = fi.iter().zip(&fj).filter(|(a, b)| **a > u && **b > u).count();
            let estimate = if marg == 0 { 0.0 } else { joint as f64 / marg as f64 };
            Ok(ChiEstimate { i, j, u, estimate, low_count: joint < MIN_JOINT_EXCEEDANCES })
        })
        .collect()
}

/// Finite-level χ of one draw for every pair of `sites` (outer: levels,
/// inner: [`site_pairs`] order).
pub fn draw_chi(samples: &PosteriorSamples, draw: &Draw, sites: &[Site], levels: &[f64]) -> Result<Vec<Vec<f64>>> {
    let model = draw_residual(samples, draw, sites)?;
    let pairs = site_pairs(sites.len());
    levels
        .iter()
        .map(|&u| {
            let lq: Vec<f64> = (0..sites.len()).map(|i| model.marginal(i).log_quantile(u)).collect::<Result<_>>()?;
            Ok(pairs.iter().map(|&(i, j)| model.chi_u_at(i, j, u, lq[i], lq[j])).collect())
        })
        .collect()
}

/// Posterior mean of the finite-level χ for every pair of `sites`.
pub fn model_chi_pairs(samples: &PosteriorSamples, sites: &[Site], levels: &[f64]) -> Result<Vec<Vec<f64>>> {
    need_draws(samples)?;
    for &u in levels {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::domain(format!("level must lie in (0,1), got {u}")));
        }
    }
    let per_draw: Vec<Vec<Vec<f64>>> =
        samples.draws.par_iter().map(|d| draw_chi(samples, d, sites, levels)).collect::<Result<_>>()?;
    let n = per_draw.len() as f64;
    let m = site_pairs(sites.len()).len();
    let mut out = vec![vec![0.0; m]; levels.len()];
    for d in &per_draw {
        for (o, v) in out.iter_mut().zip(d) {
            o.iter_mut().zip(v).for_each(|(a, b)| *a += b / n);
        }
    }
    Ok(out)
}

/// Posterior mean finite-level χ between fitted sites `i` and `j`.
pub fn model_chi(samples: &PosteriorSamples, i: usize, j: usize, u: f64) -> Result<ChiEstimate> {
    let n = samples.sites.len();
    if i >= n || j >= n {
        return Err(Error::domain(format!("site pair ({i}, {j}) out of range for {n} sites")));
    }
    let sites = [samples.sites[i], samples.sites[j]];
    let estimate = model_chi_pairs(samples, &sites, &[u])?[0][0];
    Ok(ChiEstimate { i, j, u, estimate, low_count: false })
}

fn check_shapes(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<()> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(Error::domain("estimates and truths must have the same nonzero number of datasets"));
    }
    for (b, (e, t)) in estimates.iter().zip(truths).enumerate() {
        if e.is_empty() || e.len() != t.len() {
            return Err(Error::domain(format!("dataset {b}: {} estimates against {} truths", e.len(), t.len())));
        }
    }
    Ok(())
}

fn mean_sq(e: &[f64], t: &[f64], denom: f64) -> f64 {
    e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / denom
}

/// `(1/B) Σ_b (1/n) Σ_i (Q̂ − Q)²`; outer index is the dataset, inner the site.
pub fn mmse_quantiles(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    check_shapes(estimates, truths)?;
    let b = estimates.len() as f64;
    Ok(estimates.iter().zip(truths).map(|(e, t)| mean_sq(e, t, e.len() as f64)).sum::<f64>() / b)
}

/// `(1/B) Σ_b (1/m) Σ_{i<j} (χ̂ − χ)²` with `m = n(n−1)/2`; inner vectors
/// hold the pairs of one dataset and must have a triangular length.
pub fn mmse_chi(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    check_shapes(estimates, truths)?;
    for e in estimates {
        let m = e.len();
        let n = ((1.0 + (1.0 + 8.0 * m as f64).sqrt()) / 2.0).round() as usize;
        if n * (n - 1) / 2 != m {
            return Err(Error::domain(format!("{m} is not a pair count n(n-1)/2")));
        }
    }
    let b = estimates.len() as f64;
    Ok(estimates.iter().zip(truths).map(|(e, t)| mean_sq(e, t, e.len() as f64)).sum::<f64>() / b)
}

/// Random site folds of near-equal size.
pub fn make_folds(n_sites: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::config("evaluation.folds", "need at least 2 folds"));
    }
    if n_sites / k < 2 {
        return Err(Error::config(
            "evaluation.folds",
            format!("{k} folds over {n_sites} sites leave a fold with fewer than 2 sites"),
        ));
    }
    let mut idx: Vec<usize> = (0..n_sites).collect();
    let mut rng = RngStream::new(seed, 0xcf);
    for i in (1..n_sites).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    let mut folds = vec![Vec::new(); k];
    for (r, i) in idx.into_iter().enumerate() {
        folds[r % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Empirical quantile of every site at every level (outer: levels).
pub fn empirical_quantiles(data: &Dataset, levels: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_levels(levels)?;
    let cols: Vec<Vec<f64>> = (0..data.n_sites())
        .map(|i| {
            let mut c = data.column(i);
            c.sort_by(f64::total_cmp);
            c
        })
        .collect();
    Ok(levels.iter().map(|&u| cols.iter().map(|c| quantile_sorted(c, u)).collect()).collect())
}

/// Empirical χ of every site pair (outer: levels, inner: [`site_pairs`]).
pub fn empirical_chi_pairs(data: &Dataset, levels: &[f64]) -> Result<Vec<Vec<f64>>> {
    let pairs = site_pairs(data.n_sites());
    let per_pair: Vec<Vec<ChiEstimate>> =
        pairs.iter().map(|&(i, j)| empirical_chi_levels(data, i, j, levels)).collect::<Result<_>>()?;
    Ok((0..levels.len()).map(|k| per_pair.iter().map(|p| p[k].estimate).collect()).collect())
}

/// MMSE rows per model, one entry per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub models: Vec<ModelKind>,
    pub quantile_levels: Vec<f64>,
    pub chi_levels: Vec<f64>,
    pub mmse_quantiles: Vec<Vec<f64>>,
    pub mmse_chi: Vec<Vec<f64>>,
}

/// Score fitted quantiles and χ against truths, collected per dataset.
/// `q_est[b][k]` holds the site values of dataset `b` at level `k`.
pub fn score_levels(q_est: &[Vec<Vec<f64>>], q_true: &[Vec<Vec<f64>>], levels: usize) -> Result<Vec<f64>> {
    (0..levels)
        .map(|k| {
            let e: Vec<Vec<f64>> = q_est.iter().map(|b| b[k].clone()).collect();
            let t: Vec<Vec<f64>> = q_true.iter().map(|b| b[k].clone()).collect();
            mmse_quantiles(&e, &t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvSettings {
    pub models: Vec<ModelKind>,
    pub folds: usize,
    pub quantile_levels: Vec<f64>,
    pub chi_levels: Vec<f64>,
    pub seed: u64,
}

/// k-fold cross-validation over sites: fit on k−1 folds, predict the
/// held-out fold, score against its empirical quantiles and χ.
pub fn cross_validate(data: &Dataset, cv: &CvSettings, cfg: &ChainConfig) -> Result<ScoreTable> {
    check_levels(&cv.quantile_levels)?;
    check_levels(&cv.chi_levels)?;
    let folds = make_folds(data.n_sites(), cv.folds, cv.seed)?;
    let mut truths_q = Vec::new();
    let mut truths_chi = Vec::new();
    let mut splits = Vec::new();
    for f in &folds {
        let train: Vec<usize> = (0..data.n_sites()).filter(|i| !f.contains(i)).collect();
        let held = data.select_sites(f);
        truths_q.push(empirical_quantiles(&held, &cv.quantile_levels)?);
        truths_chi.push(empirical_chi_pairs(&held, &cv.chi_levels)?);
        splits.push((data.select_sites(&train), held));
    }
    let mut table = ScoreTable {
        models: cv.models.clone(),
        quantile_levels: cv.quantile_levels.clone(),
        chi_levels: cv.chi_levels.clone(),
        mmse_quantiles: Vec::new(),
        mmse_chi: Vec::new(),
    };
    for &kind in &cv.models {
        let mut c = cfg.clone();
        c.model = kind;
        let mut est_q = Vec::new();
        let mut est_chi = Vec::new();
        for (train, held) in &splits {
            let samples = run_chain(&c, train, None)?;
            let grid = predict_quantiles(&samples, &held.sites, &cv.quantile_levels)?;
            est_q.push((0..cv.quantile_levels.len()).map(|k| grid.level_means(k)).collect::<Vec<_>>());
            est_chi.push(model_chi_pairs(&samples, &held.sites, &cv.chi_levels)?);
        }
        table.mmse_quantiles.push(score_levels(&est_q, &truths_q, cv.quantile_levels.len())?);
        table.mmse_chi.push(
            (0..cv.chi_levels.len())
                .map(|k| {
                    let e: Vec<Vec<f64>> = est_chi.iter().map(|b| b[k].clone()).collect();
                    let t: Vec<Vec<f64>> = truths_chi.iter().map(|b| b[k].clone()).collect();
                    mmse_chi(&e, &t)
                })
                .collect::<Result<_>>()?,
        );
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn pairs_are_lexicographic() {
        assert_eq!(site_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(site_pairs(1).is_empty());
    }
}

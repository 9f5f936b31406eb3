//! Sites, knots and the normalized Gaussian kernel basis.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub x: f64,
    pub y: f64,
}

impl Site {
    pub fn new(x: f64, y: f64) -> Self {
        Site { x, y }
    }

    pub fn dist2(&self, other: &Site) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &Site) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Regular `nx × ny` grid covering `[x0, x1] × [y0, y1]`, x varying fastest.
pub fn grid(nx: usize, ny: usize, x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<Site> {
    let step = |lo: f64, hi: f64, k: usize, n: usize| {
        if n == 1 {
            lo
        } else {
            lo + (hi - lo) * k as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(Site::new(step(x0, x1, i, nx), step(y0, y1, j, ny)));
        }
    }
    out
}

/// Local equirectangular projection of (lon, lat) degrees to planar km,
/// centred on the mean location.
pub fn project_lonlat(lonlat: &[(f64, f64)]) -> Vec<Site> {
    const EARTH_RADIUS_KM: f64 = 6371.0;
    if lonlat.is_empty() {
        return Vec::new();
    }
    let n = lonlat.len() as f64;
    let lon0 = lonlat.iter().map(|p| p.0).sum::<f64>() / n;
    let lat0 = lonlat.iter().map(|p| p.1).sum::<f64>() / n;
    let coslat = lat0.to_radians().cos();
    lonlat
        .iter()
        .map(|&(lon, lat)| {
            Site::new(
                EARTH_RADIUS_KM * (lon - lon0).to_radians() * coslat,
                EARTH_RADIUS_KM * (lat - lat0).to_radians(),
            )
        })
        .collect()
}

/// Ordered, duplicate-free set of spatial knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    knots: Vec<Site>,
}

impl KnotSet {
    pub fn new(knots: Vec<Site>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::domain("knot set must contain at least one knot"));
        }
        for (i, k) in knots.iter().enumerate() {
            if !k.is_finite() {
                return Err(Error::domain(format!("knot {i} has non-finite coordinates")));
            }
            if knots[..i].iter().any(|o| o == k) {
                return Err(Error::domain(format!("knot {i} duplicates an earlier knot")));
            }
        }
        Ok(KnotSet { knots })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.knots
    }

    /// Median pairwise distance between distinct knots (0 for a single knot).
    pub fn median_spacing(&self) -> f64 {
        let mut d = Vec::new();
        for i in 0..self.knots.len() {
            for j in 0..i {
                d.push(self.knots[i].dist(&self.knots[j]));
            }
        }
        if d.is_empty() {
            return 0.0;
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        if m % 2 == 1 {
            d[m / 2]
        } else {
            0.5 * (d[m / 2 - 1] + d[m / 2])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    bandwidth: f64,
}

impl KernelConfig {
    pub fn new(bandwidth: f64) -> Result<Self> {
        check_bandwidth(bandwidth)?;
        Ok(KernelConfig { bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

fn check_bandwidth(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("kernel bandwidth must be positive, got {tau}")));
    }
    Ok(())
}

fn log_kernel(s: &Site, v: &Site, tau: f64) -> f64 {
    let tau2 = tau * tau;
    -(2.0 * PI * tau2).ln() - s.dist2(v) / (2.0 * tau2)
}

/// Isotropic bivariate Gaussian kernel `K(s | v, τ)`.
pub fn gaussian_kernel(s: &Site, v: &Site, tau: f64) -> Result<f64> {
    check_bandwidth(tau)?;
    Ok(log_kernel(s, v, tau).exp())
}

/// Kernel basis weights, one row per site, one column per knot.
///
/// Rows are nonnegative and sum to one. Both `w` and `ln w` are kept; the
/// log form is exact even where `w` underflows to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    l: usize,
    w: Vec<f64>,
    log_w: Vec<f64>,
}

impl WeightMatrix {
    /// Build directly from a row-major table (mainly for tests and toy models).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::domain("weight matrix needs at least one row"));
        }
        let l = rows[0].len();
        if l == 0 {
            return Err(Error::domain("weight matrix needs at least one column"));
        }
        let mut w = Vec::with_capacity(n * l);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != l {
                return Err(Error::domain(format!("row {i} has {} columns, expected {l}", r.len())));
            }
            let s: f64 = r.iter().sum();
            if r.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!("row {i} is not on the simplex")));
            }
            w.extend_from_slice(r);
        }
        let log_w = w.iter().map(|x| x.ln()).collect();
        Ok(WeightMatrix { n, l, w, log_w })
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    pub fn n_knots(&self) -> usize {
        self.l
    }

    pub fn get(&self, site: usize, knot: usize) -> f64 {
        self.w[site * self.l + knot]
    }

    pub fn row(&self, site: usize) -> &[f64] {
        &self.w[site * self.l..(site + 1) * self.l]
    }

    pub fn log_row(&self, site: usize) -> &[f64] {
        &self.log_w[site * self.l..(site + 1) * self.l]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    /// Restrict to a subset of rows.
    pub fn select_rows(&self, idx: &[usize]) -> WeightMatrix {
        let mut w = Vec::with_capacity(idx.len() * self.l);
        let mut log_w = Vec::with_capacity(idx.len() * self.l);
        for &i in idx {
            w.extend_from_slice(self.row(i));
            log_w.extend_from_slice(self.log_row(i));
        }
        WeightMatrix {
            n: idx.len(),
            l: self.l,
            w,
            log_w,
        }
    }
}

/// Normalized kernel weights `ω_l(s_i) = K(s_i|v_l,τ) / Σ_j K(s_i|v_j,τ)`.
pub fn kernel_weights(sites: &[Site], knots: &KnotSet, tau: f64) -> Result<WeightMatrix> {
    check_bandwidth(tau)?;
    if sites.is_empty() {
        return Err(Error::domain("no sites supplied"));
    }
    let l = knots.len();
    let n = sites.len();
    let mut w = vec![0.0; n * l];
    let mut log_w = vec![0.0; n * l];
    let mut buf = vec![0.0; l];
    for (i, s) in sites.iter().enumerate() {
        for (b, v) in buf.iter_mut().zip(knots.sites()) {
            *b = log_kernel(s, v, tau);
        }
        let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::DegenerateRow { site: i });
        }
        let z: f64 = buf.iter().map(|b| (b - m).exp()).sum();
        let log_z = m + z.ln();
        for (k, b) in buf.iter().enumerate() {
            let lw = b - log_z;
            log_w[i * l + k] = lw;
            w[i * l + k] = lw.exp();
        }
    }
    Ok(WeightMatrix { n, l, w, log_w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn kernel_values() {
        let o = Site::new(0.0, 0.0);
        assert_abs_diff_eq!(gaussian_kernel(&o, &o, 1.0).unwrap(), 0.159_154_943_091_895_35, epsilon = 1e-15);
        let k = gaussian_kernel(&o, &Site::new(0.6, 0.8), 1.0).unwrap();
        assert_abs_diff_eq!(k, (-0.5f64).exp() / (2.0 * PI), epsilon = 1e-15);
        // (1/(50π)) e^{-1/2}
        let k = gaussian_kernel(&o, &Site::new(3.0, 4.0), 5.0).unwrap();
        assert_abs_diff_eq!(k, 0.003_861_294_105_202_156, epsilon = 1e-15);
        assert!(gaussian_kernel(&o, &o, 0.0).is_err());
        assert!(gaussian_kernel(&o, &o, -1.0).is_err());
    }

    #[test]
    fn single_knot_rows_are_one() {
        let knots = KnotSet::new(vec![Site::new(10.0, -3.0)]).unwrap();
        let sites = grid(4, 3, 0.0, 1.0, 0.0, 1.0);
        let w = kernel_weights(&sites, &knots, 0.7).unwrap();
        for i in 0..sites.len() {
            assert_eq!(w.row(i), &[1.0]);
        }
    }

    #[test]
    fn equidistant_knots_split_evenly() {
        let knots = KnotSet::new(vec![Site::new(-1.0, 0.0), Site::new(1.0, 0.0)]).unwrap();
        let w = kernel_weights(&[Site::new(0.0, 5.0)], &knots, 1.0).unwrap();
        assert_abs_diff_eq!(w.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.get(0, 1), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn seven_by_seven_grid_rows_on_simplex() {
        let g = grid(7, 7, 1.0, 7.0, 1.0, 7.0);
        let knots = KnotSet::new(g.clone()).unwrap();
        let w = kernel_weights(&g, &knots, 1.0).unwrap();
        for i in 0..49 {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn far_sites_do_not_underflow() {
        let knots = KnotSet::new(vec![Site::new(0.0, 0.0), Site::new(1.0, 0.0)]).unwrap();
        let w = kernel_weights(&[Site::new(1e4, 0.0)], &knots, 0.01).unwrap();
        assert_eq!(w.get(0, 1), 1.0);
        assert_eq!(w.get(0, 0), 0.0);
        assert!(w.log_row(0)[0].is_finite());
    }

    #[test]
    fn non_finite_site_is_degenerate() {
        let knots = KnotSet::new(vec![Site::new(0.0, 0.0)]).unwrap();
        let err = kernel_weights(&[Site::new(f64::NAN, 0.0)], &knots, 1.0).unwrap_err();
        assert_eq!(err, Error::DegenerateRow { site: 0 });
    }

    #[test]
    fn duplicate_knots_rejected() {
        assert!(KnotSet::new(vec![Site::new(0.0, 0.0), Site::new(0.0, 0.0)]).is_err());
        assert!(KnotSet::new(vec![]).is_err());
    }

    fn pts(n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), n)
    }

    proptest! {
        #[test]
        fn rows_nonnegative_and_normalized(s in pts(6), k in pts(4), tau in 0.05..5.0f64) {
            let sites: Vec<Site> = s.iter().map(|&(x, y)| Site::new(x, y)).collect();
            let knots: Vec<Site> = k.iter().map(|&(x, y)| Site::new(x, y)).collect();
            prop_assume!(KnotSet::new(knots.clone()).is_ok());
            let w = kernel_weights(&sites, &KnotSet::new(knots).unwrap(), tau).unwrap();
            for i in 0..sites.len() {
                prop_assert!(w.row(i).iter().all(|&x| x >= 0.0));
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn knot_permutation_permutes_columns(s in pts(5), k in pts(4), tau in 0.2..3.0f64) {
            let sites: Vec<Site> = s.iter().map(|&(x, y)| Site::new(x, y)).collect();
            let knots: Vec<Site> = k.iter().map(|&(x, y)| Site::new(x, y)).collect();
            prop_assume!(KnotSet::new(knots.clone()).is_ok());
            let perm = [2usize, 0, 3, 1];
            let permuted: Vec<Site> = perm.iter().map(|&p| knots[p]).collect();
            let a = kernel_weights(&sites, &KnotSet::new(knots).unwrap(), tau).unwrap();
            let b = kernel_weights(&sites, &KnotSet::new(permuted).unwrap(), tau).unwrap();
            for i in 0..sites.len() {
                for (c, &p) in perm.iter().enumerate() {
                    prop_assert!((b.get(i, c) - a.get(i, p)).abs() < 1e-14);
                }
            }
        }

        #[test]
        fn translation_invariant(s in pts(5), k in pts(3), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let sites: Vec<Site> = s.iter().map(|&(x, y)| Site::new(x, y)).collect();
            let knots: Vec<Site> = k.iter().map(|&(x, y)| Site::new(x, y)).collect();
            prop_assume!(KnotSet::new(knots.clone()).is_ok());
            let shift = |v: &[Site]| v.iter().map(|p| Site::new(p.x + dx, p.y + dy)).collect::<Vec<_>>();
            let a = kernel_weights(&sites, &KnotSet::new(knots.clone()).unwrap(), 1.0).unwrap();
            let b = kernel_weights(&shift(&sites), &KnotSet::new(shift(&knots)).unwrap(), 1.0).unwrap();
            for i in 0..sites.len() {
                for l in 0..3 {
                    prop_assert!((a.get(i, l) - b.get(i, l)).abs() < 1e-9);
                }
            }
        }
    }
}

//! CSV readers and writers for datasets, prediction sites, posterior
//! samples, quantile grids and score tables.
//!
//! Every float is written with 17 significant digits so values round-trip.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::geometry::Site;
use crate::mcmc::PosteriorSamples;
use crate::models::dependence_threshold;
use crate::predict::{QuantileGrid, ScoreTable};
use crate::simulate::Dataset;
use crate::{Error, Result};

/// Round-trip float formatting.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn line_err(line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("line {line}: {msg}"))
}

fn columns(headers: &csv::StringRecord, want: &[&str], optional: &[&str]) -> Result<Vec<Option<usize>>> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut out = Vec::new();
    for name in want {
        match find(name) {
            Some(i) => out.push(Some(i)),
            None => return Err(Error::Data(format!("line 1: missing column `{name}`"))),
        }
    }
    out.extend(optional.iter().map(|n| find(n)));
    Ok(out)
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, line: u64) -> Result<&'a str> {
    rec.get(i).map(str::trim).ok_or_else(|| line_err(line, format!("missing field {}", i + 1)))
}

fn parse_f64(rec: &csv::StringRecord, i: usize, name: &str, line: u64) -> Result<f64> {
    let s = field(rec, i, line)?;
    let v: f64 = s.parse().map_err(|_| line_err(line, format!("`{name}` is not a number: `{s}`")))?;
    if !v.is_finite() {
        return Err(line_err(line, format!("`{name}` must be finite, got `{s}`")));
    }
    Ok(v)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(r)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn records<R: Read>(rdr: &mut csv::Reader<R>) -> impl Iterator<Item = Result<csv::StringRecord>> + '_ {
    rdr.records().map(|r| {
        r.map_err(|e| match e.position() {
            Some(p) => line_err(p.line(), e),
            None => Error::Data(e.to_string()),
        })
    })
}

/// Long-format dataset: `site_id,x,y,t,value`, one row per (site, time).
pub fn write_dataset<W: Write>(w: W, data: &Dataset) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["site_id", "x", "y", "t", "value"])?;
    for (i, s) in data.sites.iter().enumerate() {
        for t in 0..data.n_times {
            wr.write_record([
                i.to_string(),
                fmt_f64(s.x),
                fmt_f64(s.y),
                t.to_string(),
                fmt_f64(data.get(t, i)),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Read a long-format dataset. Sites keep their order of first appearance
/// and times are sorted; every (site, time) must occur exactly once.
pub fn read_dataset<R: Read>(r: R, tag: &str) -> Result<Dataset> {
    let mut rdr = reader(r);
    let cols = columns(&rdr.headers()?.clone(), &["site_id", "x", "y", "t", "value"], &[])?;
    let [c_id, c_x, c_y, c_t, c_v] = [cols[0], cols[1], cols[2], cols[3], cols[4]].map(|c| c.unwrap());
    let mut site_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut sites: Vec<(Site, u64)> = Vec::new();
    let mut times: BTreeMap<i64, ()> = BTreeMap::new();
    let mut rows = Vec::new();
    for rec in records(&mut rdr) {
        let rec = rec?;
        let line = record_line(&rec);
        let id = field(&rec, c_id, line)?.to_string();
        if id.is_empty() {
            return Err(line_err(line, "empty `site_id`"));
        }
        let x = parse_f64(&rec, c_x, "x", line)?;
        let y = parse_f64(&rec, c_y, "y", line)?;
        let ts = field(&rec, c_t, line)?;
        let t: i64 = ts.parse().map_err(|_| line_err(line, format!("`t` is not an integer: `{ts}`")))?;
        let v = parse_f64(&rec, c_v, "value", line)?;
        let next = site_index.len();
        let i = *site_index.entry(id.clone()).or_insert(next);
        if i == sites.len() {
            sites.push((Site::new(x, y), line));
        } else if sites[i].0 != Site::new(x, y) {
            return Err(line_err(
                line,
                format!("site `{id}` has coordinates ({x}, {y}), first given as ({}, {}) on line {}", sites[i].0.x, sites[i].0.y, sites[i].1),
            ));
        }
        times.insert(t, ());
        rows.push((i, t, v, line));
    }
    if rows.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    let t_index: BTreeMap<i64, usize> = times.keys().enumerate().map(|(k, &t)| (t, k)).collect();
    let (n, nt) = (sites.len(), t_index.len());
    let mut y = vec![f64::NAN; n * nt];
    let mut seen = vec![0u64; n * nt];
    for (i, t, v, line) in rows {
        let k = t_index[&t] * n + i;
        if seen[k] != 0 {
            return Err(line_err(line, format!("duplicate observation for site {i} at t = {t} (first on line {})", seen[k])));
        }
        seen[k] = line;
        y[k] = v;
    }
    if let Some(k) = seen.iter().position(|&l| l == 0) {
        let t = *t_index.iter().find(|(_, &v)| v == k / n).unwrap().0;
        let id = site_index.iter().find(|(_, &v)| v == k % n).unwrap().0;
        return Err(Error::Data(format!("missing observation for site `{id}` at t = {t}")));
    }
    Dataset::new(sites.into_iter().map(|(s, _)| s).collect(), y, nt, tag)
}

/// Prediction sites: a CSV with `x` and `y` columns (other columns ignored).
pub fn read_sites<R: Read>(r: R) -> Result<Vec<Site>> {
    let mut rdr = reader(r);
    let cols = columns(&rdr.headers()?.clone(), &["x", "y"], &[])?;
    let (cx, cy) = (cols[0].unwrap(), cols[1].unwrap());
    let mut out = Vec::new();
    for rec in records(&mut rdr) {
        let rec = rec?;
        let line = record_line(&rec);
        out.push(Site::new(parse_f64(&rec, cx, "x", line)?, parse_f64(&rec, cy, "y", line)?));
    }
    if out.is_empty() {
        return Err(Error::Data("site file has no rows".into()));
    }
    Ok(out)
}

pub fn write_sites<W: Write>(w: W, sites: &[Site]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x", "y"])?;
    for s in sites {
        wr.write_record([fmt_f64(s.x), fmt_f64(s.y)])?;
    }
    wr.flush()?;
    Ok(())
}

const GP_FIELDS: [&str; 3] = ["mu", "log_sigma", "xi"];

/// One row per stored draw: scalars, then the GEV fields, GP hyperparameters
/// (GP mode), `ln γ` and stick weights.
pub fn write_samples<W: Write>(w: W, s: &PosteriorSamples) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let n = s.sites.len();
    let l = s.knots.len();
    let gp = s.draws.first().is_some_and(|d| d.gp.is_some());
    let mut head: Vec<String> = ["iteration", "alpha", "tau", "q", "delta", "loglik"].map(String::from).to_vec();
    for f in GP_FIELDS {
        head.extend((0..n).map(|i| format!("{f}_{i}")));
    }
    if gp {
        for f in GP_FIELDS {
            for h in ["beta0", "beta1", "beta2", "variance", "range"] {
                head.push(format!("gp_{f}_{h}"));
            }
        }
    }
    let j = s.draws.first().map_or(0, |d| d.pi.len());
    if s.draws.first().is_some_and(|d| !d.log_gamma.is_empty()) {
        for a in 0..j {
            head.extend((0..l).map(|k| format!("log_gamma_{a}_{k}")));
        }
    }
    head.extend((0..j).map(|a| format!("pi_{a}")));
    wr.write_record(&head)?;
    for d in &s.draws {
        let mut row = vec![
            d.iteration.to_string(),
            fmt_f64(d.alpha),
            fmt_f64(d.tau),
            fmt_f64(d.q),
            ((d.q >= dependence_threshold(d.alpha)) as u8).to_string(),
            fmt_f64(d.loglik),
        ];
        for f in [&d.mu, &d.log_sigma, &d.xi] {
            row.extend(f.iter().map(|v| fmt_f64(*v)));
        }
        if let Some(hs) = &d.gp {
            for h in hs {
                row.extend([h.beta[0], h.beta[1], h.beta[2], h.variance, h.range].map(fmt_f64));
            }
        }
        row.extend(d.log_gamma.iter().map(|v| fmt_f64(*v)));
        row.extend(d.pi.iter().map(|v| fmt_f64(*v)));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// `x,y,level,mean,sd`, site-major.
pub fn write_grid<W: Write>(w: W, g: &QuantileGrid) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x", "y", "level", "mean", "sd"])?;
    for (i, s) in g.sites.iter().enumerate() {
        for (k, &u) in g.levels.iter().enumerate() {
            wr.write_record([s.x, s.y, u, g.mean_at(i, k), g.sd_at(i, k)].map(fmt_f64))?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// `model,metric,level,mmse` with metric `quantile` or `chi`.
pub fn write_scores<W: Write>(w: W, t: &ScoreTable) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["model", "metric", "level", "mmse"])?;
    for (m, kind) in t.models.iter().enumerate() {
        for (metric, levels, vals) in
            [("quantile", &t.quantile_levels, &t.mmse_quantiles[m]), ("chi", &t.chi_levels, &t.mmse_chi[m])]
        {
            for (u, v) in levels.iter().zip(vals) {
                wr.write_record([kind.name().to_string(), metric.to_string(), fmt_f64(*u), fmt_f64(*v)])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

/// `block,rate`.
pub fn write_acceptance<W: Write>(w: W, rates: &BTreeMap<String, f64>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["block", "rate"])?;
    for (b, r) in rates {
        wr.write_record([b.clone(), fmt_f64(*r)])?;
    }
    wr.flush()?;
    Ok(())
}

use std::collections::BTreeMap;

use proptest::prelude::*;
use spex_core::geometry::Site;
use spex_core::io::*;
use spex_core::mcmc::{run_chain, ChainConfig};
use spex_core::models::ModelKind;
use spex_core::predict::{QuantileGrid, ScoreTable};
use spex_core::simulate::{sim_hevp, Dataset, GridSpec, SimConfig};
use spex_core::Error;

fn small() -> Dataset {
    let cfg = SimConfig { grid: GridSpec::square(2), replicates: 3, seed: 1, ..SimConfig::default() };
    sim_hevp(&cfg).unwrap().data
}

fn to_string(f: impl FnOnce(&mut Vec<u8>) -> spex_core::Result<()>) -> String {
    let mut buf = Vec::new();
    f(&mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn data_err(text: &str) -> String {
    match read_dataset(text.as_bytes(), "t") {
        Err(Error::Data(m)) => m,
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn dataset_round_trips_exactly() {
    let d = small();
    let text = to_string(|b| write_dataset(b, &d));
    assert_eq!(text.lines().count(), 1 + 4 * 3);
    assert!(text.starts_with("site_id,x,y,t,value\n"));
    let back = read_dataset(text.as_bytes(), &d.tag).unwrap();
    assert_eq!(back, d);
}

#[test]
fn rows_may_come_in_any_order() {
    let text = "site_id,x,y,t,value\nb,1,0,1,4\na,0,0,1,2\nb,1,0,0,3\na,0,0,0,1\n";
    let d = read_dataset(text.as_bytes(), "t").unwrap();
    assert_eq!(d.sites, vec![Site::new(1.0, 0.0), Site::new(0.0, 0.0)]);
    assert_eq!(d.n_times, 2);
    assert_eq!(d.y, vec![3.0, 1.0, 4.0, 2.0]);
}

#[test]
fn malformed_rows_report_their_line() {
    let m = data_err("site_id,x,y,t,value\na,0,0,0,1\na,0,0,1,oops\n");
    assert!(m.contains("line 3"), "{m}");
    let m = data_err("site_id,x,y,t,value\na,0,0,0,1\na,0,0,1,NaN\n");
    assert!(m.contains("line 3") && m.contains("finite"), "{m}");
    let m = data_err("site_id,x,y,t,value\na,0,0,0,1\na,0,0\n");
    assert!(m.contains("line 3"), "{m}");
    let m = data_err("site_id,x,y,t,value\na,0,0,0,1\na,0,0,0.5,2\n");
    assert!(m.contains("line 3") && m.contains("integer"), "{m}");
}

#[test]
fn inconsistent_or_sparse_data_is_rejected() {
    let m = data_err("site_id,x,y,t,value\na,0,0,0,1\na,0,1,1,2\n");
    assert!(m.contains("line 3") && m.contains("line 2"), "{m}");
    let m = data_err("site_id,x,y,t,value\na,0,0,0,1\na,0,0,0,2\n");
    assert!(m.contains("duplicate"), "{m}");
    let m = data_err("site_id,x,y,t,value\na,0,0,0,1\nb,1,0,1,2\n");
    assert!(m.contains("missing observation"), "{m}");
    let m = data_err("site_id,x,y,value\na,0,0,1\n");
    assert!(m.contains("`t`"), "{m}");
    let m = data_err("site_id,x,y,t,value\n");
    assert!(m.contains("no rows"), "{m}");
}

#[test]
fn sites_file() {
    let s = read_sites("id,x,y\n0,1.5,2\n1,-3,4e-1\n".as_bytes()).unwrap();
    assert_eq!(s, vec![Site::new(1.5, 2.0), Site::new(-3.0, 0.4)]);
    assert!(matches!(read_sites("x,y\n".as_bytes()), Err(Error::Data(_))));
    let text = to_string(|b| write_sites(b, &s));
    assert_eq!(read_sites(text.as_bytes()).unwrap(), s);
}

#[test]
fn samples_csv_layout() {
    let d = small();
    let cfg = ChainConfig { model: ModelKind::Mm, iterations: 20, burn_in: 10, thin: 2, seed: 3, ..ChainConfig::default() };
    let s = run_chain(&cfg, &d, None).unwrap();
    let text = to_string(|b| write_samples(b, &s));
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&head[..6], &["iteration", "alpha", "tau", "q", "delta", "loglik"]);
    let j = s.n_atoms;
    assert_eq!(head.len(), 6 + 3 * 4 + j * 4 + j);
    assert!(head.contains(&"log_gamma_0_3") && head.contains(&format!("pi_{}", j - 1).as_str()));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), s.len());
    let first: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(first.len(), head.len());
    assert_eq!(first[1].parse::<f64>().unwrap(), s.draws[0].alpha);
}

#[test]
fn grid_and_scores() {
    let g = QuantileGrid {
        sites: vec![Site::new(0.0, 1.0), Site::new(2.0, 3.0)],
        levels: vec![0.5, 0.9],
        mean: vec![1.0, 2.0, 3.0, 4.0],
        sd: vec![0.1, 0.2, 0.3, 0.4],
    };
    let text = to_string(|b| write_grid(b, &g));
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows[2], vec![2.0, 3.0, 0.5, 3.0, 0.3]);
    let t = ScoreTable {
        models: vec![ModelKind::Hevp],
        quantile_levels: vec![0.5],
        chi_levels: vec![0.9],
        mmse_quantiles: vec![vec![0.25]],
        mmse_chi: vec![vec![0.0]],
    };
    let text = to_string(|b| write_scores(b, &t));
    assert_eq!(text.lines().nth(2).unwrap(), format!("hevp,chi,{},{}", fmt_f64(0.9), fmt_f64(0.0)));
    let mut r = BTreeMap::new();
    r.insert("alpha".to_string(), 0.4);
    assert_eq!(to_string(|b| write_acceptance(b, &r)).lines().count(), 2);
}

proptest! {
    #[test]
    fn floats_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn datasets_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 6), x in -10.0f64..10.0) {
        let sites = vec![Site::new(x, 0.0), Site::new(x + 1.0, 1.0 / 3.0)];
        let d = Dataset::new(sites, vals, 3, "p").unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        prop_assert_eq!(read_dataset(buf.as_slice(), "p").unwrap(), d);
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spex_cli::manifest::{sha256_hex, RunManifest};
use tempfile::TempDir;

fn spex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spex")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = spex(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn fails(args: &[&str], code: i32, needle: &str) {
    let o = spex(args);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.contains(needle), "{args:?}: `{needle}` not in {err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn digest(path: &Path) -> String {
    sha256_hex(&std::fs::read(path).unwrap())
}

const SMALL: &str = r#"
[model]
kind = "mm"
n_atoms = 4

[mcmc]
iterations = 60
burn_in = 20
thin = 2

[simulation]
setting = "ms"
replicates = 20
grid = { nx = 3, ny = 3, x0 = 0.0, x1 = 2.0, y0 = 0.0, y1 = 2.0 }

[evaluation]
mode = "in_sample"
models = ["hevp", "sb"]
quantile_levels = [0.5, 0.9]
chi_levels = [0.5]
"#;

/// Simulate the small dataset; returns (config, data.csv).
fn small_data(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, "small.toml", SMALL);
    let out = dir.join("sim");
    ok(&["simulate", "--config", p(&cfg), "--seed", "5", "--out", p(&out)]);
    (cfg, out.join("data.csv"))
}

#[test]
fn simulate_defaults_and_determinism() {
    let d = TempDir::new().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["simulate", "--seed", "1", "--out", p(&a)]);
    ok(&["simulate", "--seed", "1", "--out", p(&b)]);
    let text = std::fs::read_to_string(a.join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 49 * 50);
    assert_eq!(digest(&a.join("data.csv")), digest(&b.join("data.csv")));
    let m = RunManifest::load(&a.join("manifest.toml")).unwrap();
    assert_eq!(m.seed, Some(1));
    assert_eq!(m.config.simulation.seed, 1);
    assert_eq!(m.outputs[0].sha256, digest(&a.join("data.csv")));
    let c = d.path().join("c");
    ok(&["simulate", "--seed", "2", "--out", p(&c)]);
    assert_ne!(digest(&a.join("data.csv")), digest(&c.join("data.csv")));
}

#[test]
fn configuration_errors_exit_2_with_field_path() {
    let d = TempDir::new().unwrap();
    let out = d.path().join("o");
    let bad = write_config(d.path(), "bad.toml", "[simulation]\nreplicates = 0\n");
    fails(&["simulate", "--config", p(&bad), "--seed", "1", "--out", p(&out)], 2, "simulation.replicates");
    let unknown = write_config(d.path(), "unknown.toml", "[mcmc]\nsweeps = 10\n");
    fails(&["simulate", "--config", p(&unknown), "--seed", "1", "--out", p(&out)], 2, "mcmc.sweeps");
    let setting = write_config(d.path(), "setting.toml", "[simulation]\nsetting = \"nope\"\n");
    fails(&["simulate", "--config", p(&setting), "--seed", "1", "--out", p(&out)], 2, "simulation.setting");
    // the seed is mandatory
    fails(&["simulate", "--out", p(&out)], 2, "--seed");
    fails(&["fit", "--out", p(&out)], 2, "--seed");
}

#[test]
fn data_errors_exit_3_with_line_numbers() {
    let d = TempDir::new().unwrap();
    let out = d.path().join("o");
    let bad = d.path().join("bad.csv");
    std::fs::write(&bad, "site_id,x,y,t,value\n0,0,0,0,1.0\n0,0,0,1,abc\n").unwrap();
    fails(&["fit", "--data", p(&bad), "--seed", "1", "--out", p(&out)], 3, "line 3");
    std::fs::write(&bad, "site_id,x,y,t,value\n0,0,0,0,1.0\n0,0,0,1,NaN\n").unwrap();
    fails(&["fit", "--data", p(&bad), "--seed", "1", "--out", p(&out)], 3, "line 3");
    fails(&["fit", "--seed", "1", "--out", p(&out)], 2, "data.path");
}

#[test]
fn fit_predict_and_resume() {
    let d = TempDir::new().unwrap();
    let (cfg, data) = small_data(d.path());
    let full = d.path().join("full");
    ok(&["fit", "--config", p(&cfg), "--data", p(&data), "--seed", "9", "--out", p(&full)]);
    for f in ["samples.csv", "samples.bin", "checkpoint.bin", "acceptance.csv", "summary.csv", "manifest.toml"] {
        assert!(full.join(f).exists(), "{f}");
    }
    let samples = std::fs::read_to_string(full.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 20);
    let summary = std::fs::read_to_string(full.join("summary.csv")).unwrap();
    assert!(summary.contains("prob_delta,"));

    // interrupted and resumed
    let part = d.path().join("part");
    ok(&["fit", "--config", p(&cfg), "--data", p(&data), "--seed", "9", "--stop-after", "33", "--out", p(&part)]);
    assert!(part.join("checkpoint.bin").exists() && !part.join("samples.csv").exists());
    let rest = d.path().join("rest");
    let cp = part.join("checkpoint.bin");
    ok(&["fit", "--config", p(&cfg), "--seed", "9", "--resume", p(&cp), "--out", p(&rest)]);
    assert_eq!(digest(&full.join("samples.csv")), digest(&rest.join("samples.csv")));
    assert_eq!(digest(&full.join("samples.bin")), digest(&rest.join("samples.bin")));
    // a resumed chain must keep its seed
    fails(&["fit", "--config", p(&cfg), "--seed", "10", "--resume", p(&cp), "--out", p(&rest)], 2, "--resume");

    // prediction at the fitted sites with the default levels
    let sites = d.path().join("sim").join("sites.csv");
    let pred = d.path().join("pred");
    let bin = full.join("samples.bin");
    ok(&["predict", "--samples", p(&bin), "--sites", p(&sites), "--out", p(&pred)]);
    let grid = std::fs::read_to_string(pred.join("grid.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        grid.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 9 * 3);
    assert_eq!(rows[..3].iter().map(|r| r[2]).collect::<Vec<_>>(), vec![0.5, 0.95, 0.99]);
    for site in rows.chunks(3) {
        assert!(site[0][3] < site[1][3] && site[1][3] < site[2][3]);
    }
    let pred2 = d.path().join("pred2");
    ok(&["predict", "--samples", p(&bin), "--sites", p(&sites), "--levels", "0.1,0.9", "--out", p(&pred2)]);
    assert_eq!(std::fs::read_to_string(pred2.join("grid.csv")).unwrap().lines().count(), 1 + 18);

    // errors
    fails(&["predict", "--samples", p(&bin), "--sites", p(&sites), "--levels", "0.9,1.0", "--out", p(&pred2)], 2, "level");
    let empty = d.path().join("empty.csv");
    std::fs::write(&empty, "x,y\n").unwrap();
    fails(&["predict", "--samples", p(&bin), "--sites", p(&empty), "--out", p(&pred2)], 3, "no rows");
    let sb = write_config(d.path(), "sb.toml", "[model]\nkind = \"sb\"\n");
    fails(&["predict", "--config", p(&sb), "--samples", p(&bin), "--sites", p(&sites), "--out", p(&pred2)], 2, "model.kind");
}

#[test]
fn evaluate_in_sample_and_cv() {
    let d = TempDir::new().unwrap();
    let (cfg, data) = small_data(d.path());
    let out = d.path().join("eval");
    ok(&["evaluate", "--config", p(&cfg), "--data", p(&data), "--seed", "3", "--out", p(&out)]);
    let scores = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines[0], "model,metric,level,mmse");
    assert_eq!(lines.len(), 1 + 2 * (2 + 1));
    assert!(lines[1].starts_with("hevp,quantile,") && lines[4].starts_with("sb,quantile,"));
    for l in &lines[1..] {
        assert!(l.rsplit(',').next().unwrap().parse::<f64>().unwrap() >= 0.0);
    }
    let cv = write_config(d.path(), "cv.toml", &SMALL.replace("mode = \"in_sample\"", "mode = \"cv\"\nfolds = 5"));
    let out = d.path().join("cv");
    fails(&["evaluate", "--config", p(&cv), "--data", p(&data), "--seed", "3", "--out", p(&out)], 2, "evaluation.folds");
    let cv = write_config(d.path(), "cv.toml", &SMALL.replace("mode = \"in_sample\"", "mode = \"cv\""));
    ok(&["evaluate", "--config", p(&cv), "--data", p(&data), "--seed", "3", "--out", p(&out)]);
    assert_eq!(std::fs::read_to_string(out.join("scores.csv")).unwrap().lines().count(), 7);
}

#[test]
fn replay_and_thread_count_give_identical_outputs() {
    let d = TempDir::new().unwrap();
    let (cfg, data) = small_data(d.path());
    let a = d.path().join("a");
    ok(&["--threads", "1", "fit", "--config", p(&cfg), "--data", p(&data), "--seed", "4", "--out", p(&a)]);
    let b = d.path().join("b");
    ok(&["--threads", "4", "fit", "--config", p(&cfg), "--data", p(&data), "--seed", "4", "--out", p(&b)]);
    let c = d.path().join("c");
    ok(&["replay", p(&a.join("manifest.toml")), "--out", p(&c)]);
    for f in ["samples.csv", "samples.bin", "checkpoint.bin", "acceptance.csv", "summary.csv"] {
        assert_eq!(digest(&a.join(f)), digest(&b.join(f)), "{f}");
        assert_eq!(digest(&a.join(f)), digest(&c.join(f)), "{f}");
    }
    let ma = RunManifest::load(&a.join("manifest.toml")).unwrap();
    let mc = RunManifest::load(&c.join("manifest.toml")).unwrap();
    assert_eq!(ma.config, mc.config);
    assert_eq!(ma.inputs, mc.inputs);

    // replay refuses changed inputs
    std::fs::write(&data, std::fs::read_to_string(&data).unwrap().replacen(",0,", ",0.0,", 1)).unwrap();
    fails(&["replay", p(&a.join("manifest.toml")), "--out", p(&c)], 3, "changed");
}

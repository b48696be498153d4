use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sample20() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/sample20.csv")
}

fn detgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detgp"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(o: &Output) -> serde_json::Value {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(o));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn ml_zero_mean_matches_reference_fit() {
    let v = json(&detgp(&["ml", "--input", sample20().to_str().unwrap(), "--zero-mean"]));
    let sigma2 = v["sigma2"].as_f64().unwrap();
    let ell = v["ell"].as_f64().unwrap();
    let eta = v["eta"].as_f64().unwrap();
    assert!((sigma2 / 34.42 - 1.0).abs() < 0.05, "{sigma2}");
    assert!((ell / 0.035 - 1.0).abs() < 0.05, "{ell}");
    assert!((eta.log10() - 3.82e-6f64.log10()).abs() < 1.0, "{eta}");
    assert_eq!(v["beta"].as_array().unwrap().len(), 0);
}

#[test]
fn fit_summary_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("grid.json");
    let input = sample20();
    let args = ["fit", "--input", input.to_str().unwrap(), "--tol", "1e-3"];
    let mut with_grid = args.to_vec();
    with_grid.extend(["--grid-out", grid.to_str().unwrap()]);
    let first = detgp(&with_grid);
    let second = detgp(&args);
    assert_eq!(first.stdout, second.stdout);
    let v = json(&first);
    assert_eq!(v["n"], 20);
    assert_eq!(v["p"], 1);
    let margs = v["marginals"].as_array().unwrap();
    let names: Vec<&str> = margs.iter().map(|m| m["parameter"].as_str().unwrap()).collect();
    assert_eq!(names, ["ell", "eta", "sigma2", "beta1"]);
    let ell_median = margs[0]["median"].as_f64().unwrap();
    assert!((ell_median - 0.117).abs() < 0.002, "{ell_median}");
    for m in margs {
        let (lo, med, hi) = (m["lower"].as_f64().unwrap(), m["median"].as_f64().unwrap(), m["upper"].as_f64().unwrap());
        assert!(lo < m["p25"].as_f64().unwrap() && m["p25"].as_f64().unwrap() < med);
        assert!(med < m["p75"].as_f64().unwrap() && m["p75"].as_f64().unwrap() < hi);
    }

    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(&grid).unwrap()).unwrap();
    assert_eq!(dump["grid"]["dim"], 2);
    assert!(!dump["grid"]["records"].as_array().unwrap().is_empty());
    let total: f64 = dump["quadrature"]
        .as_array()
        .unwrap()
        .iter()
        .map(|q| q["weight"].as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-10);
}

#[test]
fn predict_writes_bounds_around_mean() {
    let dir = TempDir::new().unwrap();
    let locs = write(&dir, "locs.csv", "x1\n0.537\n0.1234\n");
    let out = dir.path().join("pred.csv");
    let o = detgp(&[
        "predict",
        "--input",
        sample20().to_str().unwrap(),
        "--locations",
        &locs,
        "--tol",
        "1e-3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,mean,sd,lower,upper"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r[3] < r[1] && r[1] < r[4]);
        assert!(r[2] > 0.0);
    }
}

#[test]
fn predict_with_no_locations_is_header_only() {
    let dir = TempDir::new().unwrap();
    let locs = write(&dir, "empty.csv", "x1\n");
    let o = detgp(&["predict", "--input", sample20().to_str().unwrap(), "--locations", &locs]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "x1,mean,sd,lower,upper\n");
}

#[test]
fn predict_rejects_observed_location() {
    let dir = TempDir::new().unwrap();
    let locs = write(&dir, "locs.csv", "x1\n0\n");
    let o = detgp(&["predict", "--input", sample20().to_str().unwrap(), "--locations", &locs, "--tol", "1e-2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn predict_rejects_mismatched_columns() {
    let dir = TempDir::new().unwrap();
    let locs = write(&dir, "locs.csv", "x1,x2\n0.3,0.1\n");
    let o = detgp(&["predict", "--input", sample20().to_str().unwrap(), "--locations", &locs]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("coordinate columns"), "{}", stderr(&o));
}

#[test]
fn marginal_grid_is_monotone() {
    let o = detgp(&[
        "marginal",
        "--input",
        sample20().to_str().unwrap(),
        "--parameter",
        "ell",
        "--points",
        "51",
        "--tol",
        "1e-3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("value,density,cdf"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 51);
    for w in rows.windows(2) {
        assert!(w[0][0] < w[1][0]);
        assert!(w[0][2] <= w[1][2] + 1e-12);
    }
    assert!(rows.iter().all(|r| r[1] >= 0.0));
    assert!(rows[0][2] < 0.01 && rows[50][2] > 0.99);
}

#[test]
fn marginal_rejects_unknown_parameter_before_fitting() {
    let o = detgp(&["marginal", "--input", sample20().to_str().unwrap(), "--parameter", "beta2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = detgp(&["marginal", "--input", sample20().to_str().unwrap(), "--parameter", "kappa"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_flags_exit_with_config_status() {
    let input = sample20();
    let input = input.to_str().unwrap();
    for bad in [
        vec!["fit", "--input", input, "--tol=0"],
        vec!["fit", "--input", input, "--eps", "1.5"],
        vec!["fit", "--input", input, "--alpha", "1"],
        vec!["fit", "--input", input, "--gamma", "3"],
        vec!["fit", "--input", input, "--out", "/no/such/dir/out.json"],
        vec!["fit"],
        vec!["frobnicate"],
        vec!["coverage", "--suite", "gp"],
        vec!["coverage", "--suite", "normal", "--n-sims", "0"],
    ] {
        let o = detgp(&bad);
        assert_eq!(o.status.code(), Some(2), "{bad:?}: {}", stderr(&o));
    }
}

#[test]
fn bad_input_files_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let cases = [
        ("empty.csv", "", "empty"),
        ("dup.csv", "x1,y\n0,1\n0.5,2\n0,3\n", "lines 2 and 4"),
        ("parse.csv", "x1,y\n0,1\n0.5,oops\n", "line 3, column y"),
        ("nan.csv", "x1,y\n0,1\n0.5,inf\n", "not finite"),
        ("small.csv", "x1,y\n0,1\n", "do not exceed"),
        ("header.csv", "s,y\n0,1\n1,2\n", "unrecognized column"),
    ];
    for (name, text, needle) in cases {
        let path = write(&dir, name, text);
        let o = detgp(&["ml", "--input", &path]);
        assert_eq!(o.status.code(), Some(2), "{name}");
        assert!(stderr(&o).contains(needle), "{name}: {}", stderr(&o));
        assert!(stderr(&o).contains(name), "{name}: {}", stderr(&o));
    }
    let o = detgp(&["ml", "--input", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.csv"));
}

#[test]
fn regressor_columns_feed_the_design() {
    let dir = TempDir::new().unwrap();
    let sample = detgp(&["sample", "--grid-side", "4", "--ell", "0.4", "--eta", "0.1", "--seed", "3"]);
    assert_eq!(sample.status.code(), Some(0));
    let text = stdout(&sample);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,x2,y"));
    let mut with_r = String::from("x1,x2,r1,r2,y\n");
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        with_r.push_str(&format!("{},{},1,{},{}\n", f[0], f[1], f[0], f[2]));
    }
    let path = write(&dir, "reg.csv", &with_r);
    let v = json(&detgp(&["ml", "--input", &path, "--gamma", "1"]));
    assert_eq!(v["beta"].as_array().unwrap().len(), 2);
}

#[test]
fn sample_is_seed_deterministic() {
    let a = detgp(&["sample", "--n", "8", "--ell", "0.2", "--eta", "0.1", "--seed", "5"]);
    let b = detgp(&["sample", "--n", "8", "--ell", "0.2", "--eta", "0.1", "--seed", "5"]);
    let c = detgp(&["sample", "--n", "8", "--ell", "0.2", "--eta", "0.1", "--seed", "6"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(stdout(&a).lines().count(), 9);
}

#[test]
fn normal_coverage_table() {
    let args = ["coverage", "--suite", "normal", "--n-sims", "500", "--seed", "4"];
    let a = detgp(&args);
    let b = detgp(&[&args[..], &["--threads", "1"]].concat());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().count(), 6);
    for l in text.lines().skip(1) {
        let cov: f64 = l.rsplit(',').nth(1).unwrap().parse().unwrap();
        assert!((0.85..=1.0).contains(&cov), "{l}");
    }
}

#[test]
fn prediction_coverage_single_cell() {
    let o = detgp(&[
        "coverage", "--suite", "prediction", "--ell", "0.2", "--eta", "0.1", "--n-sims", "4", "--tol", "1e-2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("ell,eta,replicates,bayes_coverage,ml_coverage,bayes_failures,ml_failures")
    );
    assert!(lines.next().unwrap().starts_with("0.2,0.1,4,"));
}

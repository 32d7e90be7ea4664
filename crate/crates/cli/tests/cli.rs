use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use vineshap::explain::{Explainer, FnPredictor, TrainingData, VineRatioEstimator, VineSet};
use vineshap::{FitMode, FitOptions, ShapMethod};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vineshap"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, b: &str, r: &str, n: usize, seed: u64) -> PathBuf {
    let out = p(dir, name);
    ok(&[
        "simulate",
        "--p",
        "0.5",
        "--b",
        b,
        "--r",
        r,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    out
}

fn records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn read_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect()
}

#[test]
fn simulate_is_deterministic_and_handles_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let grid_b = "2,4,6,2,4,6,2,4,6,6";
    let grid_r = "1,3,5,1,3,5,1,3,5,5";
    let a = simulate(dir.path(), "a.csv", grid_b, grid_r, 50, 7);
    let b = simulate(dir.path(), "b.csv", grid_b, grid_r, 50, 7);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let rows = read_rows(&a);
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.len() == 10 && r.iter().all(|&x| x > 0.0)));
    let empty = simulate(dir.path(), "e.csv", "2,4", "1,3", 0, 1);
    assert_eq!(std::fs::read_to_string(empty).unwrap(), "x1,x2\n");
    let bad = run(&["simulate", "--p", "-1", "--b", "2", "--r", "1", "--n", "3", "--out", s(&p(dir.path(), "x.csv"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn fit_bundle_shapes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let two = simulate(dir.path(), "two.csv", "2,4", "1,3", 200, 1);
    let out = p(dir.path(), "two.json");
    ok(&["fit", s(&two), "--method", "vine-parametric", "--shap", "condsim", "--out", s(&out)]);
    let bundle: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let vine = &bundle["model"]["vine"];
    assert_eq!(vine["plan"]["orders"].as_array().unwrap().len(), 1);
    let pairs = vine["vines"][0]["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].as_array().unwrap().len(), 1);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(p(dir.path(), "two.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["features"], 2);
    assert_eq!(manifest["rows"], 200);

    let three = simulate(dir.path(), "three.csv", "2,4,6", "1,3,5", 300, 2);
    let a = p(dir.path(), "a.json");
    let b = p(dir.path(), "b.json");
    for path in [&a, &b] {
        ok(&["fit", s(&three), "--method", "vine-parametric", "--shap", "condsim", "--seed", "5", "--out", s(path)]);
    }
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    let bundle: Value = serde_json::from_slice(&text).unwrap();
    assert_eq!(bundle["model"]["vine"]["plan"]["orders"].as_array().unwrap().len(), 2);
    for method in ["vine-nonparametric", "gaussian", "gaussian-copula", "independence"] {
        ok(&["fit", s(&three), "--method", method, "--grid-size", "16", "--out", s(&p(dir.path(), "m.json"))]);
    }
}

#[test]
fn fit_reports_bad_cells_and_limits() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n3,oops\n").unwrap();
    let out = run(&["fit", s(&bad), "--out", s(&p(dir.path(), "o.json"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 2") && err.contains("'b'") && err.contains("oops"), "{err}");

    let wide = p(dir.path(), "wide.csv");
    let header: Vec<String> = (0..21).map(|j| format!("c{j}")).collect();
    let mut text = header.join(",") + "\n";
    for i in 0..40 {
        text += &(0..21).map(|j| ((i * 31 + j * 17) % 23).to_string()).collect::<Vec<_>>().join(",");
        text += "\n";
    }
    std::fs::write(&wide, text).unwrap();
    let out = run(&["fit", s(&wide), "--method", "gaussian", "--out", s(&p(dir.path(), "w.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("21 features"));

    let missing = run(&["fit", "/nonexistent/file.csv", "--out", s(&p(dir.path(), "o.json"))]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/file.csv"));
    assert_eq!(run(&["fit", s(&bad), "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["fit", s(&bad), "--shap", "kernel", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn explain_records() {
    let dir = tempfile::tempdir().unwrap();
    let train = simulate(dir.path(), "train.csv", "2,4,6", "1,3,5", 400, 3);
    let test = simulate(dir.path(), "test.csv", "2,4,6", "1,3,5", 5, 4);
    let bundle = p(dir.path(), "m.json");
    ok(&["fit", s(&train), "--method", "vine-parametric", "--shap", "ratio", "--seed", "2", "--out", s(&bundle)]);

    let out = p(dir.path(), "const.jsonl");
    ok(&["explain", s(&bundle), s(&test), "--predictor", "const:3.25", "--k", "100", "--out", s(&out)]);
    let recs = records(&out);
    assert_eq!(recs.len(), 5);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r["row_id"], i);
        assert_eq!(r["phi0"], 3.25);
        assert!(floats(&r["phi"]).iter().all(|p| p.abs() < 1e-12));
        assert_eq!(r["method"], "vine-ratio-parametric");
        assert_eq!(r["k"], 100);
        assert_eq!(r["features"].as_array().unwrap().len(), 3);
    }

    let lin = p(dir.path(), "lin.jsonl");
    ok(&[
        "explain",
        s(&bundle),
        s(&test),
        "--predictor",
        "linear:1,2,-1,0.5",
        "--k",
        "200",
        "--diagnostics",
        "--out",
        s(&lin),
    ]);
    let rows = read_rows(&test);
    for (r, x) in records(&lin).iter().zip(&rows) {
        let g = 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2];
        let total = r["phi0"].as_f64().unwrap() + floats(&r["phi"]).iter().sum::<f64>();
        assert!((total - g).abs() < 1e-8);
        assert!(r["diagnostics"].is_array());
    }

    // a child process gives the same answers as the built-in predictor
    let child = p(dir.path(), "child.jsonl");
    ok(&[
        "explain",
        s(&bundle),
        s(&test),
        "--predictor",
        "cmd:awk -F, 'NR>1 {printf \"%.17g\\n\", 1 + 2*$1 - $2 + 0.5*$3}'",
        "--k",
        "200",
        "--diagnostics",
        "--out",
        s(&child),
    ]);
    for (a, b) in records(&lin).iter().zip(records(&child)) {
        for (x, y) in floats(&a["phi"]).iter().zip(floats(&b["phi"])) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    let broken = run(&["explain", s(&bundle), s(&test), "--predictor", "cmd:echo 1", "--k", "10", "--out", s(&child)]);
    assert_eq!(broken.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("protocol violation"));

    let other = p(dir.path(), "other.csv");
    std::fs::write(&other, "x1,x2,z\n1,2,3\n").unwrap();
    let mismatch = run(&["explain", s(&bundle), s(&other), "--predictor", "const:1", "--out", s(&child)]);
    assert_eq!(mismatch.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("'x3'"));
}

#[test]
fn independence_and_vine_explanations_differ() {
    let dir = tempfile::tempdir().unwrap();
    let train = simulate(dir.path(), "train.csv", "2,4,6", "1,3,5", 500, 8);
    let test = simulate(dir.path(), "test.csv", "2,4,6", "1,3,5", 3, 9);
    let pred = "burr:0.5:2,4,6:1,3,5";
    let mut phis = Vec::new();
    for method in ["independence", "vine-parametric"] {
        let bundle = p(dir.path(), &format!("{method}.json"));
        let out = p(dir.path(), &format!("{method}.jsonl"));
        ok(&["fit", s(&train), "--method", method, "--shap", "ratio", "--out", s(&bundle)]);
        ok(&["explain", s(&bundle), s(&test), "--predictor", pred, "--k", "300", "--out", s(&out)]);
        let recs = records(&out);
        for r in &recs {
            let total = r["phi0"].as_f64().unwrap() + floats(&r["phi"]).iter().sum::<f64>();
            assert!((total - r["prediction"].as_f64().unwrap()).abs() < 1e-8);
        }
        phis.push(recs.iter().map(|r| floats(&r["phi"])).collect::<Vec<_>>());
    }
    assert_ne!(phis[0], phis[1]);
}

#[test]
fn bundle_roundtrip_matches_in_process_explanation() {
    let dir = tempfile::tempdir().unwrap();
    let train = simulate(dir.path(), "train.csv", "2,4,6", "1,3,5", 300, 10);
    let test = simulate(dir.path(), "test.csv", "2,4,6", "1,3,5", 4, 11);
    let bundle = p(dir.path(), "m.json");
    let out = p(dir.path(), "e.jsonl");
    ok(&["fit", s(&train), "--method", "vine-parametric", "--shap", "ratio", "--seed", "21", "--out", s(&bundle)]);
    ok(&[
        "explain",
        s(&bundle),
        s(&test),
        "--predictor",
        "linear:0,1,1,1",
        "--k",
        "150",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);

    let data = TrainingData::new(read_rows(&train)).unwrap();
    let mode = FitMode::Parametric(FitOptions::default());
    let vines = VineSet::fit_default(&data, ShapMethod::Ratio, &mode, 21).unwrap();
    let est = VineRatioEstimator::new(vines, data.clone(), "vine").unwrap();
    let g = FnPredictor(|x: &[f64]| 0.0 + 1.0 * x[0] + 1.0 * x[1] + 1.0 * x[2]);
    let ex = Explainer::with_training(&est, &g, data.rows(), 150).unwrap();
    let direct = ex.explain_all(&read_rows(&test), 3).unwrap();
    for (r, e) in records(&out).iter().zip(&direct) {
        assert_eq!(floats(&r["phi"]), e.phi);
        assert_eq!(r["phi0"].as_f64().unwrap(), e.phi0);
    }
}

#[test]
fn bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "bench.conf");
    std::fs::write(&cfg, "p=1\nM=3\nn_train=150\nn_test=2\nreps=1\nK=50\nK_oracle=1000\nmethods=independence,gaussian,vine-condsim-parametric\nseed=4\n").unwrap();
    let a = p(dir.path(), "a");
    let b = p(dir.path(), "b");
    ok(&["--threads", "2", "bench", s(&cfg), "--out", s(&a)]);
    ok(&["bench", s(&cfg), "--out", s(&b)]);
    for f in ["results.csv", "summary.csv", "manifest.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let results = std::fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 3);
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3);
    assert!(std::fs::read_to_string(a.join("timings.csv")).unwrap().starts_with("method,repetition,seconds"));

    std::fs::write(&cfg, "p=1\nshape=3\n").unwrap();
    let out = run(&["bench", s(&cfg), "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'shape'"));
}

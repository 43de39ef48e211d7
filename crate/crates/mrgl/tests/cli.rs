use mrgl::basis::{assemble_design, BasisFamily, ComponentKind, ResolutionScheme};
use mrgl::cli::read_dataset;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn mrgl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrgl")).current_dir(dir).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn scenario(dir: &Path, extra: Value) -> String {
    let mut v = json!({ "n": 80, "p": 3, "s0": 2, "alpha": 1.5, "sigma": 0.5, "seed": 17 });
    for (k, val) in extra.as_object().unwrap() {
        v[k] = val.clone();
    }
    write_json(&dir.join("scenario.json"), &v);
    "scenario.json".into()
}

fn fitted_column(path: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap()[0].parse().unwrap()).collect()
}

#[test]
fn simulation_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), json!({}));
    fs::create_dir_all(dir.path().join("a")).unwrap();
    fs::create_dir_all(dir.path().join("b")).unwrap();
    let a = ok(&mrgl(dir.path(), &["simulate", "--scenario", &sc, "--out", "a"]));
    let b = ok(&mrgl(dir.path(), &["simulate", "--scenario", &sc, "--out", "b"]));
    assert_eq!(a, b);
    for f in ["data.csv", "truth.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
    let c = ok(&mrgl(dir.path(), &["simulate", "--scenario", &sc, "--seed", "18", "--out", "a"]));
    assert_ne!(a, c);
}

#[test]
fn noiseless_and_null_scenarios() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), json!({ "sigma": 0.0 }));
    ok(&mrgl(dir.path(), &["simulate", "--scenario", &sc]));
    let d = read_dataset(&dir.path().join("data.csv")).unwrap();
    assert_eq!(d.y, d.f_star);

    let sc = scenario(dir.path(), json!({ "s0": 0 }));
    ok(&mrgl(dir.path(), &["simulate", "--scenario", &sc]));
    let d = read_dataset(&dir.path().join("data.csv")).unwrap();
    assert!(d.f_star.unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn zero_response_gives_an_empty_fit() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), json!({}));
    ok(&mrgl(dir.path(), &["simulate", "--scenario", &sc]));
    let d = read_dataset(&dir.path().join("data.csv")).unwrap();
    mrgl::cli::write_dataset(&dir.path().join("zero.csv"), &d.x, Some(&DVector::zeros(80)), None).unwrap();
    let summary: Value =
        serde_json::from_str(&ok(&mrgl(dir.path(), &["fit", "--data", "zero.csv", "--sigma", "1"]))).unwrap();
    assert_eq!(summary["active_set"], json!([]));
    assert!(fitted_column(&dir.path().join("fitted.csv")).iter().all(|v| *v == 0.0));
}

#[test]
fn refitting_gives_identical_output_and_predictions_match() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), json!({}));
    ok(&mrgl(dir.path(), &["simulate", "--scenario", &sc]));
    ok(&mrgl(dir.path(), &["fit", "--data", "data.csv", "--scenario", &sc]));
    let first = fs::read(dir.path().join("fit.json")).unwrap();
    ok(&mrgl(dir.path(), &["fit", "--data", "data.csv", "--scenario", &sc]));
    assert_eq!(first, fs::read(dir.path().join("fit.json")).unwrap());

    ok(&mrgl(dir.path(), &["predict", "--fit", "fit.json", "--data", "data.csv"]));
    let fitted = fitted_column(&dir.path().join("fitted.csv"));
    let pred = fitted_column(&dir.path().join("predictions.csv"));
    for (a, b) in fitted.iter().zip(&pred) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}

#[test]
fn unpenalized_single_group_is_least_squares() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), json!({ "p": 1, "s0": 1, "n": 40, "eps": 0.5 }));
    ok(&mrgl(dir.path(), &["simulate", "--scenario", &sc]));
    write_json(&dir.path().join("levels.json"), &json!({ "lambda": { "1:2": 0.0 } }));
    ok(&mrgl(
        dir.path(),
        &[
            "fit",
            "--data",
            "data.csv",
            "--sigma",
            "0.5",
            "--eps",
            "0.5",
            "--k-star",
            "2",
            "--k-max",
            "2",
            "--schedule",
            "levels.json",
        ],
    ));
    let d = read_dataset(&dir.path().join("data.csv")).unwrap();
    let y = d.y.unwrap();
    let scheme = ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric], 2, 2).unwrap();
    let u: DMatrix<f64> = assemble_design(&d.x, BasisFamily::Fourier, &scheme).unwrap().block(0).clone();
    let coef = u.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let ls = &u * coef;
    let fitted = fitted_column(&dir.path().join("fitted.csv"));
    for (a, b) in fitted.iter().zip(ls.iter()) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}

fn rate_config(dir: &Path, name: &str, s0: usize, replicates: usize) -> String {
    write_json(
        &dir.join(name),
        &json!({
            "scenario": { "p": 2, "s0": s0, "alpha": 1.5, "sigma": 0.5, "seed": 3 },
            "n_grid": [32, 64, 128],
            "replicates": replicates,
            "target_exponent": -0.75,
            "seed": 5,
            "alpha_star": 1.5,
        }),
    );
    name.into()
}

#[test]
fn null_truth_rate_study_is_flagged_degenerate() {
    let dir = TempDir::new().unwrap();
    let cfg = rate_config(dir.path(), "null.json", 0, 3);
    let out: Value = serde_json::from_str(&ok(&mrgl(dir.path(), &["rates", "--config", &cfg]))).unwrap();
    assert_eq!(out["degenerate"], json!(true));
    assert_eq!(out["slope"], Value::Null);
}

#[test]
fn more_replicates_shrink_the_slope_error() {
    let dir = TempDir::new().unwrap();
    let few = rate_config(dir.path(), "few.json", 1, 4);
    let many = rate_config(dir.path(), "many.json", 1, 16);
    let a: Value = serde_json::from_str(&ok(&mrgl(dir.path(), &["rates", "--config", &few]))).unwrap();
    let b: Value = serde_json::from_str(&ok(&mrgl(dir.path(), &["rates", "--config", &many]))).unwrap();
    let (sa, sb) = (a["stderr"].as_f64().unwrap(), b["stderr"].as_f64().unwrap());
    assert!(sb < sa, "{sb} >= {sa}");
    let report = read_json(&dir.path().join("rates.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(mrgl(dir.path(), &["simulate"]).status.code(), Some(2));
    assert_eq!(mrgl(dir.path(), &["simulate", "--scenario", "missing.json"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), "{ \"p\": 2, ").unwrap();
    let out = mrgl(dir.path(), &["simulate", "--scenario", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
    assert_eq!(mrgl(dir.path(), &["fit"]).status.code(), Some(2));
}

//! End-to-end CLI checks: exit codes on bad input and a small
//! simulate -> fit -> predict round trip producing every artifact.

use std::path::Path;
use std::process::{Command, Output};

fn conngraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conngraph"))
        .args(args)
        .output()
        .expect("spawn conngraph")
}

fn expect_ok(args: &[&str]) {
    let out = conngraph(args);
    assert!(
        out.status.success(),
        "conngraph {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_input_exits_2() {
    let out = conngraph(&[
        "fit",
        "--edges",
        "/nonexistent/edges.csv",
        "--covariates",
        "/nonexistent/covariates.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:"), "stderr: {err}");
}

#[test]
fn invalid_config_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "not_a_key = 1\n").unwrap();
    let out = conngraph(&[
        "--config",
        cfg.to_str().unwrap(),
        "simulate",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn fit_and_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();

    expect_ok(&[
        "simulate", "--out", &p("data"), "--regions", "5", "--subjects", "12", "--seed", "3",
    ]);
    for f in ["edges.csv", "covariates.csv", "truth.json"] {
        assert!(Path::new(&p("data")).join(f).exists(), "missing data/{f}");
    }

    expect_ok(&[
        "--threads", "1", "fit",
        "--edges", &p("data/edges.csv"),
        "--covariates", &p("data/covariates.csv"),
        "--out", &p("fit"),
        "--basis-size", "5", "--burn-in", "150", "--samples", "150", "--seed", "9",
    ]);
    for f in ["effects.csv", "edge_plot.json", "trace.csv", "checkpoint.json"] {
        assert!(Path::new(&p("fit")).join(f).exists(), "missing fit/{f}");
    }

    // score the training cohort itself; just exercises the pipeline
    expect_ok(&[
        "predict",
        "--checkpoint", &p("fit/checkpoint.json"),
        "--edges", &p("data/edges.csv"),
        "--covariates", &p("data/covariates.csv"),
        "--out", &p("fit"),
    ]);
    let report = std::fs::read_to_string(Path::new(&p("fit")).join("prediction.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["length_mse"].as_f64().unwrap().is_finite());
    assert!(v["n_length_cells"].as_u64().unwrap() > 0);
}

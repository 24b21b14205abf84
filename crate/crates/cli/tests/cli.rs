use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rtip(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtip"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&rtip(&["simulate", "--system", "saddle", "--runs", "100", "--seed", "1"], &a));
    ok(&rtip(&["--threads", "2", "simulate", "--system", "saddle", "--runs", "100", "--seed", "1"], &b));
    let obs = |d: &Path| fs::read(d.join("observables.f64")).unwrap();
    assert_eq!(obs(&a), obs(&b));
    assert_eq!(obs(&a).len(), 100 * 1200 * 8);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn unknown_flag_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtip(&["simulate", "--bogus"], &dir.path().join("x"));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn failures_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prep");
    let o = rtip(&["preprocess", "--store", "/nonexistent/store"], &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[io]"), "{err}");
    assert!(!out.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

    let store = dir.path().join("store");
    ok(&rtip(&["simulate", "--runs", "300", "--seed", "2"], &store));
    let o = rtip(&["preprocess", "--store", store.to_str().unwrap()], &out);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[insufficient_rows]"));
    assert!(!out.exists());
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 3, "windw": 10}"#).unwrap();
    let o = rtip(&["--config", cfg.to_str().unwrap(), "reproduce"], &dir.path().join("r"));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[invalid_config]"));
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).to_str().unwrap().to_string();
    let common = ["--scale", "smoke", "--seed", "5"];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(&common).map(|x| x.to_string()).collect() };
    let run = |cmd: Vec<String>, out: &str| {
        let args: Vec<&str> = cmd.iter().map(String::as_str).collect();
        ok(&rtip(&args, &p(out)));
    };

    run(with(&["simulate"]), "store");
    run(with(&["preprocess", "--store", &s("store")]), "prep");
    assert!(p("prep/segments/test/lead_010/segments.f64").is_file());
    assert!(p("prep/envelope.csv").is_file());
    run(with(&["csd", "--store", &s("store")]), "csd");
    assert!(p("csd/report_csd_autocorr_saddle.csv").is_file());
    run(with(&["train", "--store", &s("store")]), "models");
    assert!(p("models/lead_050/weights.f64").is_file());
    run(with(&["predict", "--store", &s("store"), "--models", &s("models")]), "pred");
    let timeline = fs::read_to_string(p("pred/report_timeline_saddle.csv")).unwrap();
    assert_eq!(timeline.lines().count(), 4);
    run(with(&["explain", "--store", &s("store"), "--models", &s("models"), "--maps", "2"]), "lrp");
    assert_eq!(fs::read_dir(p("lrp/maps")).unwrap().count(), 2);
    run(with(&["evaluate", "--store", &s("store"), "--models", &s("models")]), "eval");
    assert!(p("eval/report_ks_saddle.csv").is_file());
    run(with(&["sweep", "--kind", "rate", "--models", &s("models"), "--values", "1.0,1.25", "--runs", "1500", "--pairs", "40"]), "rate");
    let grid = fs::read_to_string(p("rate/report_forcing_rate_saddle.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 2 * 3);
    run(with(&["sweep", "--kind", "delay", "--models", &s("models"), "--store", &s("store")]), "delay");
}

#[test]
fn smoke_reproduce_emits_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    ok(&rtip(&["reproduce", "--scale", "smoke", "--seed", "1"], &out));
    for kind in ["lead_time", "timeline", "ks", "delay_quantile", "forcing_rate", "noise_magnitude", "csd_variance", "csd_autocorr", "lrp"] {
        assert!(out.join(format!("report_{kind}_saddle.csv")).is_file(), "{kind}");
    }
    let prov: serde_json::Value = serde_json::from_slice(&fs::read(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config"]["seed"], 1);
    assert!(!fs::read_to_string(out.join("provenance.json")).unwrap().contains("unix"));
}

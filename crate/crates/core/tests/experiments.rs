use std::path::PathBuf;

use dnggb::experiment::{run, ExperimentConfig, ExperimentError, RunOptions};
use serde_json::{json, Value};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(experiment: Value) -> ExperimentConfig {
    let v = json!({
        "schema_version": 1,
        "solution": { "name": "pulsating_circular_string", "R": 1.0 },
        "grid": { "n_tau": 65, "n_sigma": 16, "tau_min": 0.1, "tau_max": 0.9 },
        "action": { "tension": 1.0, "gb_coupling": 0.0 },
        "experiment": experiment,
    });
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 9);
}

#[test]
fn report_has_the_documented_keys() {
    // The D = 2 reduction tolerances assume the acceptance grid.
    let mut cfg = config(json!({ "kind": "eom", "n_seeds": 1 }));
    cfg.grid.n_tau = 129;
    cfg.grid.n_sigma = 32;
    let r = run(&cfg, RunOptions::default()).unwrap();
    let v: Value = serde_json::from_str(&r.to_json()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["schema_version", "config", "results", "tolerances", "pass", "timings_ms"] {
        assert!(keys.contains(&k), "{k}");
    }
    assert_eq!(v["config"]["experiment"]["kind"], "eom");
    assert!(v["tolerances"]["eom_residual"].as_f64().unwrap() > 0.0);
    assert!(r.pass, "{}", r.results);
}

#[test]
fn timings_only_on_request() {
    let cfg = config(json!({ "kind": "geometry" }));
    assert!(run(&cfg, RunOptions::default()).unwrap().timings_ms.is_empty());
    assert!(run(&cfg, RunOptions { timings: true }).unwrap().timings_ms.contains_key("total"));
}

#[test]
fn csv_dump_lists_active_points() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(json!({ "kind": "geometry" }));
    cfg.solution = serde_json::from_value(json!({ "name": "rotating_folded_string", "A": 1.0 })).unwrap();
    cfg.output.csv = Some(dir.path().join("g.csv"));
    cfg.output.report = Some(dir.path().join("g.json"));
    run(&cfg, RunOptions::default()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "tau,sigma,K[0],G[00],G[01],G[10],G[11],R");
    let rows = lines.count();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(rows as u64, report["results"]["active_points"].as_u64().unwrap());
    assert!(rows < 65 * 16);
}

#[test]
fn seed_changes_random_checks_only_through_the_seed() {
    let mut a = config(json!({ "kind": "linearize", "n_seeds": 1, "betas": [0.3] }));
    let b = a.clone();
    let ra = run(&a, RunOptions::default()).unwrap().to_json();
    assert_eq!(ra, run(&b, RunOptions::default()).unwrap().to_json());
    a.seed = 99;
    assert_ne!(ra, run(&a, RunOptions::default()).unwrap().to_json());
}

#[test]
fn collapsed_window_is_a_numerical_error() {
    let mut cfg = config(json!({ "kind": "geometry" }));
    cfg.grid.tau_min = 1.562;
    cfg.grid.tau_max = 1.579;
    let e = run(&cfg, RunOptions::default()).unwrap_err();
    assert!(matches!(e, ExperimentError::Numerical(_)), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn omega_sweep_reports_delta_column() {
    let cfg = config(json!({
        "kind": "omega",
        "first": { "kind": "translation", "c": [0.0, 1.0, 0.0] },
        "second": { "kind": "boost", "axis": 1 },
    }));
    let r = run(&cfg, RunOptions::default()).unwrap();
    let rows = r.results["betas"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].get("delta_omega").is_none());
    for row in &rows[1..] {
        assert!(row["abs_delta_omega"].as_f64().is_some());
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dnggb"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn config(kind: &str, extra: &str) -> String {
    format!(
        r#"{{
  "schema_version": 1,
  "solution": {{ "name": "pulsating_circular_string", "R": 1.0 }},
  "grid": {{ "n_tau": 65, "n_sigma": 16, "tau_min": 0.1, "tau_max": 0.9 }},
  "action": {{ "tension": 1.0, "gb_coupling": 0.0 }},
  "experiment": {{ "kind": "{kind}"{extra} }}
}}"#
    )
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn list_solutions_names_both_families() {
    let out = run(&["list-solutions"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("pulsating_circular_string"));
    assert!(text.contains("rotating_folded_string"));
}

#[test]
fn validate_accepts_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.json", &config("geometry", ""));
    assert_eq!(run(&["validate", "--config", good.to_str().unwrap()]).status.code(), Some(0));
    let bad = write(dir.path(), "bad.json", &config("geometry", r#", "bogus": 1"#));
    let out = run(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    let missing = dir.path().join("nope.json");
    assert_eq!(run(&["validate", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn run_writes_report_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.json", &config("geometry", ""));
    let report = dir.path().join("r.json");
    let out = run(&["run", "--config", cfg.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"pass\": true"));
    assert!(text.contains("\"timings_ms\": {}"));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &config("linearize", r#", "n_seeds": 1"#));
    let a = run(&["run", "--config", cfg.to_str().unwrap(), "--seed", "5"]);
    let b = run(&["run", "--config", cfg.to_str().unwrap(), "--seed", "5"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let c = run(&["run", "--config", cfg.to_str().unwrap(), "--seed", "6"]);
    assert_ne!(a.stdout, c.stdout);
    assert!(String::from_utf8_lossy(&c.stdout).contains("\"seed\": 6"));
}

#[test]
fn tolerance_failure_exits_one() {
    // The Gauss-Bonnet coupling leaves ω unchanged, so the sweep's
    // contribution check fails.
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "first": { "kind": "translation", "c": [0.0, 1.0, 0.0] }, "second": { "kind": "boost", "axis": 1 }"#;
    let cfg = write(dir.path(), "o.json", &config("omega", extra));
    let out = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"pass\": false"));
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = config("geometry", "").replace("\"tau_min\": 0.1, \"tau_max\": 0.9", "\"tau_min\": 1.562, \"tau_max\": 1.579");
    let cfg = write(dir.path(), "n.json", &text);
    let out = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn timings_flag_records_total() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.json", &config("geometry", ""));
    let out = run(&["run", "--config", cfg.to_str().unwrap(), "--timings"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"total\""));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use vrof_core::config::ExperimentConfig;
use vrof_core::io::read_signal;

fn vrof(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vrof"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    vrof(&args)
}

const CONSTANT: &str = r#"{
  "interval": {"a": 0, "b": 2},
  "grid_cells": 64,
  "channels": 2,
  "lambda": 0.1,
  "anisotropy": {"kind": "l1"},
  "profile": {"kind": "identity"},
  "datum": {"kind": "piecewise_constant", "base": [0.25, -1.5], "pieces": []}
}"#;

const MIXED: &str = r#"{
  "interval": {"a": 0, "b": 1},
  "grid_cells": 256,
  "channels": 2,
  "lambda": 0.05,
  "anisotropy": {"kind": "euclidean"},
  "profile": {"kind": "identity"},
  "datum": {
    "kind": "mixed",
    "piecewise": {"kind": "random_piecewise_constant", "breaks": 5, "amplitude": 1},
    "smooth": {"kind": "smooth_fourier", "modes": 3, "amplitude": 0.3}
  },
  "seed": 5,
  "verify": {"instances": 2, "refinement": [128, 256]},
  "sweep": {"lambdas": [0.02, 0.1], "seeds": [1, 2]}
}"#;

#[test]
fn constant_datum_is_its_own_solution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONSTANT);
    let out = dir.path().join("out");
    for method in ["pd", "continuation"] {
        let body = CONSTANT.replace(r#""profile""#, &format!(r#""solver": {{"method": "{method}"}}, "profile""#));
        let cfg_m = write_config(dir.path(), &format!("{method}.json"), &body);
        let (code, err) = run("solve", &cfg_m, &out, &[]);
        assert_eq!(code, 0, "{err}");
        let u = read_signal(&out.join("solution.csv"), None).unwrap();
        let h = read_signal(&out.join("datum.csv"), None).unwrap();
        assert_eq!(u.channels(), 2);
        assert!(u.l2_distance(&h).unwrap() <= 1e-10, "{method}");
        assert!(u.values().chunks(2).all(|v| (v[0] - 0.25).abs() <= 1e-10 && (v[1] + 1.5).abs() <= 1e-10));
    }
    assert_eq!(run("solve", &cfg, &out, &[]).0, 0);
    assert_eq!(fs::read_to_string(out.join("atoms.json")).unwrap().trim(), "[]");
}

#[test]
fn verify_homogeneous_battery_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "v.json", MIXED);
    let out = dir.path().join("out");
    let (code, err) = run("verify", &cfg, &out, &["--jobs", "2"]);
    assert_eq!(code, 0, "{err}");
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("theorem,window_lo,window_hi,lhs,rhs,ratio,slack,pass\n"));
    // 2 grids x 2 instances x 16 dyadic windows, plus k-sweep and classifier rows
    assert!(report.lines().filter(|l| l.contains("/homogeneous,")).count() >= 64);
    assert!(report.lines().skip(1).all(|l| l.ends_with(",true")));
    let refinement = fs::read_to_string(out.join("refinement.csv")).unwrap();
    assert_eq!(refinement.lines().count(), 3);
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["theorem"], "homogeneous");
    assert_eq!(diag["instances"].as_array().unwrap().len(), 4);
}

#[test]
fn malformed_anisotropy_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &CONSTANT.replace(r#""kind": "l1""#, r#""kind": "l7""#));
    let (code, err) = run("solve", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code, 1);
    assert!(err.contains("config::load"), "{err}");
    assert!(err.contains("anisotropy"), "{err}");
    assert!(err.contains("l7"), "{err}");
}

#[test]
fn unknown_fields_and_bad_values_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let extra = CONSTANT.replace(r#""lambda": 0.1"#, r#""lambda": 0.1, "lamda": 0.2"#);
    let (code, err) = run("solve", &write_config(dir.path(), "a.json", &extra), &dir.path().join("a"), &[]);
    assert_eq!(code, 1);
    assert!(err.contains("lamda"), "{err}");
    let neg = CONSTANT.replace(r#""lambda": 0.1"#, r#""lambda": -0.1"#);
    let (code, err) = run("solve", &write_config(dir.path(), "b.json", &neg), &dir.path().join("b"), &[]);
    assert_eq!(code, 1);
    assert!(err.contains("lambda"), "{err}");
    let cfg = write_config(dir.path(), "c.json", CONSTANT);
    assert_eq!(run("solve", &cfg, &dir.path().join("c"), &["--jobs", "0"]).0, 1);
    assert_eq!(run("solve", &cfg, &dir.path().join("c"), &["--grid-override", "1"]).0, 1);
    assert_eq!(vrof(&["solve"]).0, 1);
    assert_eq!(vrof(&["bogus"]).0, 1);
}

#[test]
fn taut_string_rejects_vector_data() {
    let dir = tempfile::tempdir().unwrap();
    let body = MIXED.replace(r#""seed": 5"#, r#""seed": 5, "solver": {"method": "taut_string"}"#);
    let (code, err) = run("solve", &write_config(dir.path(), "t.json", &body), &dir.path().join("out"), &[]);
    assert_eq!(code, 1);
    assert!(err.contains("solver::taut_string_oracle"), "{err}");
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.json", MIXED);
    for (cmd, jobs) in [("solve", "1"), ("sweep", "3"), ("flow", "1")] {
        let a = dir.path().join(format!("{cmd}_a"));
        let b = dir.path().join(format!("{cmd}_b"));
        let extra = ["--jobs", jobs, "--grid-override", "128"];
        assert_eq!(run(cmd, &cfg, &a, &extra).0, 0, "{cmd}");
        assert_eq!(run(cmd, &cfg, &b, &["--jobs", "1", "--grid-override", "128"]).0, 0, "{cmd}");
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        assert!(!sa.is_empty());
        assert_eq!(sa, sb, "{cmd}");
    }
    let summary = fs::read_to_string(dir.path().join("sweep_a/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(dir.path().join("sweep_a/lambda_0.1_seed_2/solution.csv").exists());
}

#[test]
fn seed_flag_changes_the_datum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.json", MIXED);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run("solve", &cfg, &a, &["--seed", "1"]).0, 0);
    assert_eq!(run("solve", &cfg, &b, &["--seed", "2"]).0, 0);
    assert_ne!(fs::read(a.join("datum.csv")).unwrap(), fs::read(b.join("datum.csv")).unwrap());
    let resolved = ExperimentConfig::load(&a.join("resolved_config.json")).unwrap();
    assert_eq!(resolved.seed, 1);
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let body = MIXED.replace(r#""seed": 5"#, r#""seed": 5, "solver": {"cross_check": true}"#);
    let cfg = write_config(dir.path(), "m.json", &body);
    let first = dir.path().join("first");
    assert_eq!(run("solve", &cfg, &first, &["--grid-override", "128"]).0, 0);
    assert!(first.join("solution_continuation.csv").exists());
    let resolved_path = first.join("resolved_config.json");
    let resolved = ExperimentConfig::load(&resolved_path).unwrap();
    assert_eq!(resolved.grid_cells, 128);
    assert_eq!(resolved.resolved(), resolved);
    let second = dir.path().join("second");
    assert_eq!(run("solve", &resolved_path, &second, &[]).0, 0);
    assert_eq!(snapshot(&first), snapshot(&second));
}

#[test]
fn flow_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let body = MIXED.replace(r#""seed": 5"#, r#""seed": 5, "flow": {"steps": 8, "tau": 0.125, "record_every": 2}"#);
    let cfg = write_config(dir.path(), "f.json", &body);
    let out = dir.path().join("out");
    let (code, err) = run("flow", &cfg, &out, &[]);
    assert_eq!(code, 0, "{err}");
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,window_id,var,singular_mass\n"));
    // records at steps 0, 2, 4, 6, 8 over 16 windows
    assert_eq!(traj.lines().count(), 1 + 5 * 16);
    assert_eq!(fs::read_to_string(out.join("dissipation.csv")).unwrap().lines().count(), 9);
}

#[test]
fn probe_reports_hypotheses() {
    let dir = tempfile::tempdir().unwrap();
    let body = MIXED
        .replace(r#"{"kind": "euclidean"}"#, r#"{"kind": "l1"}"#)
        .replace(r#"{"kind": "identity"}"#, r#"{"kind": "sqrt1p"}"#);
    let cfg = write_config(dir.path(), "p.json", &body);
    let out = dir.path().join("out");
    assert_eq!(run("probe", &cfg, &out, &[]).0, 0);
    let p: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("probe.json")).unwrap()).unwrap();
    assert_eq!(p["theorem"], "singular_constant");
    assert_eq!(p["singular_factor"], 2.0);
    assert_eq!(p["reshetnyak"]["strict"], false);
    assert_eq!(p["midpoint"]["strict"], false);
    assert!(p["regular_case"].is_string());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ovr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovr"))
        .args(args)
        .output()
        .unwrap()
}

fn small_config(dir: &Path, objective: &str) -> PathBuf {
    let path = dir.join(format!("{objective}.json"));
    let text = format!(
        r#"{{
  "q_lower": [0.1, 0.1],
  "q_upper": [1.0, 1.0],
  "sigma_l": 0.03,
  "sigma_u": 0.05,
  "sigma_beta": 1e-5,
  "grid_cells": 4,
  "desired_states": ["sin_sin", "bi_quartic"],
  "target": {{ "from_beta": [0.6, 0.3] }},
  "control_lower": "zero",
  "control_upper": "constant:3",
  "objective": "{objective}",
  "solver": {{ "element_limit": 120 }}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn missing_config_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ovr(&[
        "solve",
        "--config",
        "/no/such/config.json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn malformed_config_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"q_lower": [0.1]}"#).unwrap();
    let o = ovr(&[
        "lower-level",
        "--config",
        cfg.to_str().unwrap(),
        "--beta",
        "0.5",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lower_level_reports_the_solution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "F1");
    let dump = dir.path().join("dump");
    let o = ovr(&[
        "lower-level",
        "--config",
        cfg.to_str().unwrap(),
        "--beta",
        "0.6,0.3",
        "--dump",
        dump.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    for key in [
        "phi =",
        "phi' =",
        "F =",
        "active set size =",
        "newton iterations =",
        "kkt residual =",
    ] {
        assert!(stdout.contains(key), "missing {key} in {stdout}");
    }
    let f_line = stdout.lines().find(|l| l.starts_with("F =")).unwrap();
    let f: f64 = f_line.trim_start_matches("F =").trim().parse().unwrap();
    assert!(f.abs() < 1e-20);
    let state = fs::read_to_string(dump.join("state.csv")).unwrap();
    assert_eq!(state.lines().count(), 1 + 9);
}

#[test]
fn parameter_outside_the_box_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "F1");
    for beta in ["1.5,0.3", "0.05,0.3", "0.5", "a,b"] {
        let o = ovr(&[
            "lower-level",
            "--config",
            cfg.to_str().unwrap(),
            "--beta",
            beta,
        ]);
        assert_eq!(o.status.code(), Some(2), "beta {beta}");
    }
}

#[test]
fn oracle_writes_one_row_per_lattice_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "F2");
    let o = ovr(&[
        "oracle",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beta0,beta1,F");
    assert_eq!(lines.len(), 10);

    let o = ovr(&["oracle", "--config", cfg.to_str().unwrap(), "--grid", "500"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ovr(&[
        "oracle",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "300",
        "--budget",
        "1000",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "F2");
    let out = dir.path().join("run");
    let o = ovr(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));

    let bounds = fs::read_to_string(out.join("bounds.csv")).unwrap();
    assert_eq!(bounds.lines().next(), Some("iter,subproblems,lb,ub,gap"));
    let tri = fs::read_to_string(out.join("triangulation_0000.csv")).unwrap();
    assert_eq!(
        tri.lines().next(),
        Some("id,depth,status,lb,v0x,v0y,v1x,v1y,v2x,v2y")
    );
    assert_eq!(tri.lines().count(), 3);

    let solution: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    for key in ["beta_opt", "F_opt", "gap", "termination", "config"] {
        assert!(solution.get(key).is_some(), "missing {key}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_status"], 0);
    for file in manifest["files"].as_array().unwrap() {
        assert!(out.join(file.as_str().unwrap()).exists());
    }
    let iterations = solution["iterations"].as_u64().unwrap() as usize;
    assert_eq!(bounds.lines().count(), 1 + iterations);
}

#[test]
fn thread_count_does_not_change_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "F3");
    let mut solutions = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(format!("run{threads}"));
        let o = ovr(&[
            "solve",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
            "--snapshot-every",
            "0",
        ]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        solutions.push(fs::read_to_string(out.join("solution.json")).unwrap());
        assert_eq!(
            fs::read_dir(&out)
                .unwrap()
                .filter(|e| {
                    e.as_ref()
                        .unwrap()
                        .file_name()
                        .to_string_lossy()
                        .starts_with("triangulation_")
                })
                .count(),
            1
        );
    }
    assert_eq!(solutions[0], solutions[1]);
}

use std::fs;
use std::path::Path;
use std::process::Command;

fn lab(args: &[&str], config: &str, dir: &Path) -> std::process::Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    Command::new(env!("CARGO_BIN_EXE_lab"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env("LAB_WORKERS", "2")
        .output()
        .unwrap()
}

fn ok(output: &std::process::Output) {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

const TRAIN: &str = r#"{
  "d": 8,
  "targets": [{"kind": "parity", "k": 2}],
  "rho": [0.0, 0.5],
  "mu": [0.9],
  "arch": {"kind": "two_layer", "width": 8},
  "optimizer": {"schedule": {"kind": "constant", "gamma": 0.05}, "batch_size": 16},
  "methods": ["standard", "curriculum"],
  "mode": {"kind": "offline", "m": [64]},
  "stop_phase1": {"loss_threshold": 0.01, "max_steps": 20},
  "stop": {"loss_threshold": 0.001, "max_steps": 40},
  "seeds": [1, 2],
  "test_samples": 100
}"#;

#[test]
fn train_writes_runs_and_summary_and_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    ok(&lab(&["train"], TRAIN, dir.path()));
    let runs = dir.path().join("out/runs.csv");
    let first = fs::read_to_string(&runs).unwrap();
    assert!(first.starts_with("run_id,seed,rho,mu,d,k,m,method,steps_phase1,steps_total,"));
    assert_eq!(first.lines().count(), 1 + 8);
    assert!(dir.path().join("out/summary.csv").exists());

    // Rerunning resumes from a complete file and changes nothing.
    ok(&lab(&["train"], TRAIN, dir.path()));
    assert_eq!(fs::read_to_string(&runs).unwrap(), first);

    // A fresh replay into a new directory is byte-identical.
    let other = tempfile::tempdir().unwrap();
    ok(&lab(&["train"], TRAIN, other.path()));
    assert_eq!(fs::read_to_string(other.path().join("out/runs.csv")).unwrap(), first);
}

#[test]
fn generate_writes_each_training_set_once() {
    let dir = tempfile::tempdir().unwrap();
    ok(&lab(&["generate"], TRAIN, dir.path()));
    let out = dir.path().join("out");
    let texts: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    // Two rho values x two seeds; methods share data.
    assert_eq!(texts.len(), 4);
    for t in texts {
        assert_eq!(fs::read_to_string(&t).unwrap().lines().count(), 64);
        assert!(t.with_extension("json").exists());
    }
}

#[test]
fn summarize_groups_records() {
    let dir = tempfile::tempdir().unwrap();
    ok(&lab(&["train"], TRAIN, dir.path()));
    fs::rename(dir.path().join("out/runs.csv"), dir.path().join("runs.csv")).unwrap();
    ok(&lab(&["summarize"], r#"{"inputs": ["runs.csv"], "group_by": ["method"]}"#, dir.path()));
    let text = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(text.starts_with("group,metric,n,mean,median,half_width"));
    assert!(text.contains("method=standard,steps_total,4,"));
}

#[test]
fn cp_and_bound_tables() {
    let dir = tempfile::tempdir().unwrap();
    ok(&lab(&["cp"], r#"{"d": [10], "k": [3], "rho": [0.0, 0.5], "mu": [0.9]}"#, dir.path()));
    let text = fs::read_to_string(dir.path().join("out/cp.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    // rho = 0: only identical subsets correlate, 1/C(10,3).
    assert_eq!(row[..5], ["10", "3", "0.0", "0.9", "exact"]);
    assert!((row[5].parse::<f64>().unwrap() - 1.0 / 120.0).abs() < 1e-15);

    let bound = r#"{"d": 20, "k": 6, "rho": 0.001, "mu": 0.9, "steps": [1, 1e12],
        "params": 1000, "range": 1, "tau": 0.01, "batch_size": 1e6}"#;
    ok(&lab(&["bound"], bound, dir.path()));
    let text = fs::read_to_string(dir.path().join("out/bound.csv")).unwrap();
    let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert_eq!(last[2], "1.0");
}

#[test]
fn construct_both_kinds() {
    let dir = tempfile::tempdir().unwrap();
    ok(&lab(&["construct"], r#"{"kind": "explicit", "k": 4, "delta": 1.0}"#, dir.path()));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/explicit_layer.json")).unwrap()).unwrap();
    assert!(v["max_error"].as_f64().unwrap() < 1e-12);
    ok(&lab(&["construct"], r#"{"kind": "span", "d": 6, "k": 2}"#, dir.path()));
    assert!(dir.path().join("out/span_coefficients.json").exists());

    let odd = lab(&["construct"], r#"{"kind": "explicit", "k": 3, "delta": 1.0}"#, dir.path());
    assert!(!odd.status.success());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["reproduce"], r#"{"preset": "fig_nope"}"#, dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
    let dup = TRAIN.replace("[1, 2]", "[1, 1]");
    let out = lab(&["train"], &dup, dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("distinct"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mia_tradeoff::bench::{load_report, Approach, RowKind};

const BIN: &str = env!("CARGO_BIN_EXE_mia-tradeoff");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "name": "cli",
        "dataset": {
            "kind": "synthetic",
            "num_records": 160, "feature_dim": 12, "num_classes": 3, "flip_rate": 0.2, "seed": 5
        },
        "train_size": 80,
        "test_size": 80,
        "num_nodes": 2,
        "hidden_layers": [8],
        "federated": { "epochs": 6, "learning_rate": 0.5, "snapshot_count": 2 },
        "coreset": {
            "size": 20,
            "center_fraction": 0.5,
            "training": { "epochs": 6, "learning_rate": 0.5, "batch_size": null, "seed": 0 }
        },
        "membership": { "s_train": 20, "s_test": 20, "s_prime_train": 10, "s_prime_test": 10 },
        "attack": { "encoder_width": 4, "combiner_hidden": [8, 4], "epochs": 3 },
        "seeds": [0]
    });
    let path = dir.join("cli.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_writes_csv_and_json_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = load_report(&out.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.row == RowKind::Seed && r.seed == Some(0)));

    let o = run(&[
        "run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--format", "json", "--approach", "coreset", "--centers-only", "--seed", "3,4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = load_report(&out.join("report.json")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.approach == Approach::Coreset && r.exposed_samples == Some(0)));
    assert_eq!(rows.iter().filter(|r| r.row == RowKind::Median).count(), 1);
}

#[test]
fn report_verb_converts_between_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--approach", "fed"]);
    assert_eq!(code(&o), 0);
    let conv = dir.path().join("conv");
    let o = run(&[
        "report", out.join("report.csv").to_str().unwrap(), "--format", "json", "--out", conv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("federated"));
    let a = load_report(&out.join("report.csv")).unwrap();
    let b = load_report(&conv.join("report.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_writes_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--axis", "coreset-size", "--values", "10,20",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("curve_coreset_size.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut bad: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    bad["train_size"] = 1000.into();
    let bad_path = dir.path().join("bad.json");
    std::fs::write(&bad_path, bad.to_string()).unwrap();
    assert_eq!(code(&run(&["run", "--config", bad_path.to_str().unwrap()])), 1);

    bad["train_size"] = 80.into();
    bad["surprise"] = true.into();
    std::fs::write(&bad_path, bad.to_string()).unwrap();
    assert_eq!(code(&run(&["run", "--config", bad_path.to_str().unwrap()])), 1);

    assert_eq!(code(&run(&["run"])), 1);
    assert_eq!(code(&run(&["run", "--config", cfg.to_str().unwrap(), "--format", "xml"])), 1);
    assert_eq!(code(&run(&["sweep", "--config", cfg.to_str().unwrap()])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["dataset"] = serde_json::json!({ "kind": "csv", "path": dir.path().join("absent.csv") });
    let path = dir.path().join("missing.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let o = run(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["report", dir.path().join("nothing.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

use std::path::Path;
use std::process::{Command, Output};

use tedb::corpus::{synthetic_dataset, write_dataset};

fn tedb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tedb")).args(args).output().expect("spawn tedb")
}

fn small_run(dir: &Path) -> std::path::PathBuf {
    write_dataset(dir.join("train.csv"), &synthetic_dataset(16, 3)).unwrap();
    write_dataset(dir.join("test.csv"), &synthetic_dataset(8, 4)).unwrap();
    let cfg = dir.join("run.json");
    std::fs::write(
        &cfg,
        r#"{
  "task": "train",
  "name": "toy-kimcnn",
  "train_data": "train.csv",
  "test_data": "test.csv",
  "frontends": [{"toy": {"embed_dim": 8, "layers": 1, "heads": 2}}],
  "kimcnn": {"maps_per_width": 8},
  "train": {"lr": 1e-3, "batch_size": 8, "max_epochs": 3, "dropout_p": 0.0}
}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn missing_config_exits_1_and_names_the_path() {
    let out = tedb(&["train", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing.json"), "{err}");
}

#[test]
fn unknown_flag_exits_1_with_help_hint() {
    let out = tedb(&["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--frobnicate") && err.contains("--help"), "{err}");
}

#[test]
fn train_writes_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let out_dir = dir.path().join("run");
    let out = tedb(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "metrics.json", "history.json", "checkpoint.tedb", "report.md"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["tp"].as_u64().unwrap() + metrics["fn"].as_u64().unwrap(), 4);
    let report = std::fs::read_to_string(out_dir.join("report.md")).unwrap();
    assert!(report.contains("**toy-kimcnn**"), "{report}");
    let warn = String::from_utf8_lossy(&out.stderr);
    assert!(warn.contains("warning: train.lr"), "{warn}");

    let eval_dir = dir.path().join("eval");
    let test = dir.path().join("test.csv");
    let out = tedb(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint.tedb").to_str().unwrap(),
        "--test-data",
        test.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(eval_dir.join("metrics.json")).unwrap(),
        std::fs::read(out_dir.join("metrics.json")).unwrap()
    );
}

#[test]
fn invalid_values_exit_2_listing_all() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"lr": "fast", "batch_size": -1}, "extra": 1}"#).unwrap();
    let out = tedb(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["train.lr", "train.batch_size", "extra: unknown key"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}

#[test]
fn stats_writes_tsv() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path().join("d.csv"), &synthetic_dataset(10, 0)).unwrap();
    let out_dir = dir.path().join("s");
    let out = tedb(&[
        "stats",
        "--train-data",
        dir.path().join("d.csv").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = std::fs::read_to_string(out_dir.join("stats.tsv")).unwrap();
    assert!(tsv.starts_with("bin\tcount\n"), "{tsv}");
    let total: u64 = tsv.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 10);
}

#[test]
fn probe_on_a_store_split() {
    let dir = tempfile::tempdir().unwrap();
    let store = tedb::cli::selfcheck::random_store(8, 40, 2, 6);
    let path = dir.path().join("feats.bin");
    tedb::embed::write_interchange(&path, &store).unwrap();
    let cfg = dir.path().join("probe.json");
    std::fs::write(
        &cfg,
        r#"{"probe": {"train_store": "feats.bin", "split": 0.25, "kinds": ["knn3", "passive_aggressive", "logreg"], "max_epochs": 20}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("p");
    let out = tedb(&["probe", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    for k in ["knn3", "passive_aggressive", "logreg"] {
        assert_eq!(metrics[k]["tp"].as_u64().unwrap() + metrics[k]["fp"].as_u64().unwrap()
            + metrics[k]["fn"].as_u64().unwrap() + metrics[k]["tn"].as_u64().unwrap(), 10);
    }

    let rep_dir = dir.path().join("r");
    let out = tedb(&["report", "--inputs", out_dir.to_str().unwrap(), "--out", rep_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let md = String::from_utf8_lossy(&out.stdout);
    assert_eq!(md.lines().count(), 5, "{md}");
}

#[test]
fn selfcheck_exits_0() {
    let out = tedb(&["selfcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

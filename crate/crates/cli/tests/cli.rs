use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn glioprog(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glioprog"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = glioprog(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const CONFIG: &str = r#"{
  "seed": 5,
  "train_data": "run/train",
  "test_data": "run/test",
  "folds": 3,
  "patch": {"channels": 2, "extents": [16, 16, 16], "patch": 8, "dim": 8, "depth": 1, "mlp_ratio": 2},
  "train": {"mode": "ssl_frozen", "epochs": 3, "encoder_checkpoint": "ssl/encoder"},
  "ssl": {"steps": 4, "batch_size": 4},
  "aux": {"steps": 4},
  "synth": {"subjects": 18, "true_progression": 9, "extents": [16, 16, 16], "folds": 3},
  "synth_test_subjects": 8,
  "importance_repeats": 1
}"#;

#[test]
fn every_subcommand_runs_on_a_tiny_cohort() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.json"), CONFIG).unwrap();
    let c = ["--config", "cfg.json"];
    ok(dir, &[&c[..], &["--out", "run", "synth-data"]].concat());
    assert!(dir.join("run/train/clinical.csv").is_file());
    assert!(dir.join("run/test/aux_targets.csv").is_file());

    ok(dir, &[&c[..], &["--out", "ssl", "pretrain-ssl"]].concat());
    assert!(dir.join("ssl/encoder.json").is_file());
    assert!(dir.join("ssl/ssl_loss.csv").is_file());
    ok(dir, &[&c[..], &["--out", "aux", "pretrain-aux", "--precision", "f32"]].concat());
    assert!(dir.join("aux/encoder.bin").is_file());

    let table = ok(dir, &[&c[..], &["--out", "run", "train"]].concat());
    assert!(table.contains("auc") && table.contains(" ± "), "{table}");
    for f in ["metrics.json", "roc_points.csv", "predictions.csv", "importance.csv", "checkpoints/fold2.json"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["schema_version"], 1);
    assert_eq!(metrics["folds"].as_array().unwrap().len(), 3);
    assert_eq!(metrics["ensemble_scope"], "test");

    ok(dir, &[&c[..], &["--out", "eval", "evaluate", "--run", "run"]].concat());
    let header = fs::read_to_string(dir.join("eval/predictions.csv")).unwrap();
    assert!(header.starts_with("subject_id,fold,probability,label\n"));
    ok(dir, &[&c[..], &["--out", "imp", "importance", "--run", "run"]].concat());
    assert!(fs::read_to_string(dir.join("imp/importance.csv"))
        .unwrap()
        .starts_with("feature,mean_auc_drop,rank\n"));
    ok(dir, &[&c[..], &["--out", "sel", "select-features"]].concat());
    assert!(dir.join("sel/selection.json").is_file());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.json"), CONFIG).unwrap();
    ok(dir, &["--config", "cfg.json", "--seed", "1", "--out", "a", "synth-data"]);
    ok(dir, &["--config", "cfg.json", "--seed", "2", "--out", "b", "synth-data"]);
    ok(dir, &["--config", "cfg.json", "--seed", "1", "--out", "c", "synth-data"]);
    let read = |p: &str| fs::read(dir.join(p).join("train/clinical.csv")).unwrap();
    assert_ne!(read("a"), read("b"));
    assert_eq!(read("a"), read("c"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.json"), r#"{"seed": 1, "epochz": 3}"#).unwrap();
    let out = glioprog(tmp.path(), &["--config", "cfg.json", "synth-data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown field `epochz`"), "{err}");
}

#[test]
fn missing_frozen_checkpoint_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.json"), CONFIG.replace("ssl/encoder", "nowhere/encoder")).unwrap();
    ok(dir, &["--config", "cfg.json", "--out", "run", "synth-data"]);
    let out = glioprog(dir, &["--config", "cfg.json", "--out", "run", "train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config error") && err.contains("nowhere/encoder"), "{err}");
}

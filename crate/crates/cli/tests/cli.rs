use std::path::Path;
use std::process::{Command, Output};

fn sdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdg")).args(args).output().expect("run sdg")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let out = sdg(&["default-config", "--output-dir", dir.join("runs").to_str().unwrap()]);
    assert!(out.status.success());
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["data"]["train_per_class"] = 4.into();
    cfg["data"]["test_per_class"] = 2.into();
    cfg["train"]["epochs"] = 1.into();
    cfg["train"]["batch_size"] = 8.into();
    cfg["eval"]["calibration_size"] = 8.into();
    cfg["seeds"] = serde_json::json!([3]);
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn usage_and_help_exit_codes() {
    assert_eq!(sdg(&[]).status.code(), Some(1));
    assert_eq!(sdg(&["train"]).status.code(), Some(1));
    assert_eq!(sdg(&["--help"]).status.code(), Some(0));
    assert_eq!(sdg(&["eval", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_exits_1_and_runtime_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1}"#).unwrap();
    assert_eq!(sdg(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(
        sdg(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]).status.code(),
        Some(1)
    );

    let cfg = small_config(dir.path());
    let missing = dir.path().join("none.ckpt");
    let out = sdg(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_writes_loadable_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdg(&[
        "gen-data",
        "--out",
        dir.path().to_str().unwrap(),
        "--train-per-class",
        "3",
        "--test-per-class",
        "2",
        "--surrogates",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train = sdg_core::datasets::load_dataset(&dir.path().join("train.bsdg")).unwrap();
    let test = sdg_core::datasets::load_dataset(&dir.path().join("test.bsdg")).unwrap();
    assert_eq!((train.len(), test.len()), (30, 20));
    assert_eq!(train.class_counts(), vec![3; 10]);
    let n = std::fs::read_dir(dir.path().join("surrogates")).unwrap().count();
    assert!(n >= 5);
}

#[test]
fn train_eval_and_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = sdg(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/seed_3");
    for f in ["config.json", "metrics.csv", "metrics.jsonl", "final.ckpt", "loss.svg", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let out = sdg(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        run.join("final.ckpt").to_str().unwrap(),
        "--prompt-mode",
        "source-calibrated",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("source"));

    let svg = dir.path().join("g.svg");
    let out = sdg(&[
        "plot",
        "--csv",
        run.join("metrics.csv").to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
        "--columns",
        "outer_loss,grad_norm_theta",
    ]);
    assert!(out.status.success());
    let doc = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(sdg_core::harness::plot::check_well_formed(&doc).unwrap(), "svg");
    assert!(doc.contains("grad_norm_theta"));

    let out = sdg(&[
        "plot",
        "--csv",
        run.join("metrics.csv").to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
        "--columns",
        "no_such_column",
    ]);
    assert_ne!(out.status.code(), Some(0));
}

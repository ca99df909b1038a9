//! End-to-end runs of the command-line binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scribblevc::fit::read_history;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scribblevc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

/// A tiny 32x32 setup that trains in about a second.
fn write_config(dir: &Path, name: &str, epochs: usize, classes: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {"num_classes": classes, "height": 32, "width": 32, "num_stages": 2, "base_channels": 8, "head_dim": 8},
        "train": {"lr": 0.001, "batch_size": 2, "epochs": epochs, "checkpoint_every": 0},
        "synth": {"generator": {"height": 32, "width": 32, "num_classes": classes}, "train_samples": 4, "val_samples": 2},
        "data": {"train_manifest": "data/train.json", "val_manifest": "data/val.json"}
    });
    let p = dir.join(name);
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", 1, 3);
    for out in ["x", "y"] {
        assert!(run(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join(out)), "--quiet"]).status.success());
    }
    let (a, b) = (tree(&dir.path().join("x")), tree(&dir.path().join("y")));
    assert!(a.len() > 10);
    assert_eq!(a, b);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"lr": -1.0}}"#).unwrap();
    let out = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "validation");

    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_manifest_creates_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", 1, 3);
    let run_dir = dir.path().join("run");
    let out = run(&["train", "--config", s(&cfg), "--out", s(&run_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("train.json"));
    assert!(!run_dir.exists());
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "c.json", 3, 3);
    assert!(run(&["synth", "--config", s(&cfg), "--out", s(&root.join("data")), "--quiet"]).status.success());

    let zero = write_config(root, "zero.json", 0, 3);
    let out = run(&["train", "--config", s(&zero), "--out", s(&root.join("init")), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("init/last.ckpt").is_file());

    let out = run(&["train", "--config", s(&cfg), "--out", s(&root.join("run")), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("run/config.resolved.json")).unwrap()).unwrap();
    let manifest = resolved["data"]["train_manifest"].as_str().unwrap();
    assert!(Path::new(manifest).is_absolute() && Path::new(manifest).is_file());
    for f in ["metrics.jsonl", "best.ckpt", "report/metrics.json", "report/metrics.csv", "report/curves/loss.png"] {
        assert!(root.join("run").join(f).is_file(), "{f}");
    }

    let ckpt = root.join("run/last.ckpt");
    let eval_dir = root.join("eval");
    let out = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&eval_dir), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    let history = read_history(&root.join("run/metrics.jsonl")).unwrap();
    let last = history.last().unwrap().val_dice_mean.unwrap();
    assert!((report["mean_dice"].as_f64().unwrap() - last).abs() < 1e-6);

    let other = write_config(root, "k4.json", 3, 4);
    let out = run(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt), "--out", s(&root.join("e4"))]);
    assert_eq!(out.status.code(), Some(3));
    let msg = stderr_json(&out)["message"].as_str().unwrap().to_owned();
    assert!(msg.contains("K=3") && msg.contains("K=4"), "{msg}");
}

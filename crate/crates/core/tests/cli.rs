use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rvit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cost_reports_about_four_times_fewer_flops() {
    let out: Value = serde_json::from_str(&ok(&["cost", "--model", "vitb16", "--image", "224", "--ratio", "0.25"])).unwrap();
    let ratio = out["ratio"].as_f64().unwrap();
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    assert_eq!(out["masked"]["seq_len"], 50);
}

#[test]
fn mask_reproduces_golden_trace() {
    let out: Value =
        serde_json::from_str(&ok(&["mask", "--strategy", "ms1", "--key", "s0", "--n", "8", "--ratio", "0.5"])).unwrap();
    assert_eq!(out["indices"], json!([4, 6, 1, 3]));
    assert_eq!(out["seed"], json!(637538656335744918u64));
}

#[test]
fn usage_and_validation_errors() {
    let out = rvit(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = rvit(&["mask", "--key", "s0", "--n", "8", "--ratio", "0.5", "--bogus"]);
    assert!(!out.status.success());

    let out = rvit(&["mask", "--key", "s0", "--n", "8", "--ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("retention ratio 1.5"));
}

#[test]
fn data_mask_viz_and_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--lambda", "8", "--image", "32", "--n", "6", "--seed", "2", "--out", path(&data)]);
    assert!(data.join("scene.json").exists());

    let viz = dir.path().join("mask.pgm");
    let plan = dir.path().join("plan.json");
    ok(&[
        "mask", "--strategy", "ms2", "--ratio", "0.25", "--data", path(&data), "--index", "3", "--viz", path(&viz),
        "--out", path(&plan),
    ]);
    let pgm = fs::read(&viz).unwrap();
    // 4×4 patch grid drawn at 8 pixels per cell.
    let header = b"P5\n32 32\n255\n";
    assert!(pgm.starts_with(header));
    assert_eq!(pgm[header.len()..].iter().filter(|&&b| b == 255).count(), 4 * 64);
    let plan: Value = serde_json::from_slice(&fs::read(&plan).unwrap()).unwrap();
    assert_eq!(plan["indices"].as_array().unwrap().len(), 4);

    let table = dir.path().join("calib.csv");
    ok(&["calibrate", "--data", path(&data), "--taus", "0.5,0.9,0.99", "--out", path(&table)]);
    let text = fs::read_to_string(&table).unwrap();
    let retention: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(retention.len(), 3);
    assert!(retention.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn train_eval_and_sweep_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "task": "classification", "strategy": "ms1", "train_ratio": 0.5, "eval_ratio": 0.5,
        "model": {"dim": 8, "depth": 4, "heads": 2, "mlp_ratio": 2, "patch": 4},
        "optimizer": {"lr": 0.05, "steps": 3, "batch_size": 8},
        "data": {"scene": {"height": 16, "width": 16, "channels": 2, "lambda": 4.0, "classes": 3,
                           "thresholds": [-0.5, 0.5], "seed": 1},
                 "train": 16, "eval": 8},
        "seed": 3
    });
    let cfg_path = dir.path().join("exp.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();

    let ckpt = dir.path().join("model.ckpt");
    ok(&["train", "--config", path(&cfg_path), "--seed", "4", "--out", path(&ckpt)]);
    let results: Value =
        serde_json::from_slice(&fs::read(dir.path().join("model.ckpt.results.json")).unwrap()).unwrap();
    assert_eq!(results["config"]["seed"], 4);
    assert_eq!(results["rows"].as_array().unwrap().len(), 2);

    // Three-channel scenes do not fit a two-channel checkpoint.
    let wrong = dir.path().join("wrong");
    ok(&["gen-data", "--image", "16", "--lambda", "4", "--n", "8", "--out", path(&wrong)]);
    let out = rvit(&["eval", "--checkpoint", path(&ckpt), "--data", path(&wrong)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));

    let scene_path = dir.path().join("scene.json");
    fs::write(&scene_path, cfg["data"]["scene"].to_string()).unwrap();
    let data = dir.path().join("eval");
    ok(&["gen-data", "--config", path(&scene_path), "--offset", "16", "--n", "8", "--out", path(&data)]);
    let report = dir.path().join("eval.json");
    let run = || ok(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--ratio", "0.5", "--out", path(&report)]);
    run();
    let first = fs::read(&report).unwrap();
    run();
    assert_eq!(first, fs::read(&report).unwrap());

    let grid = dir.path().join("grid.json");
    fs::write(&grid, json!({"base": cfg, "seeds": [1, 2]}).to_string()).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["sweep", "--grid", path(&grid), "--out", path(&a), "--jobs", "2"]);
    ok(&["sweep", "--grid", path(&grid), "--out", path(&b)]);
    let (a, b) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
}

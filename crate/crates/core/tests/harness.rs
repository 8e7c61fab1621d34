use serde_json::json;

use rvit::harness::{
    evaluate, fit, linear_probe, prepare_data, sgd_step, sweep, write_rows_csv, ExperimentConfig, ProbeConfig,
    SweepGrid, SweepOptions, Task, RESULT_CSV_HEADER,
};
use rvit::masking::Strategy;
use rvit::model::{HeadParams, Network};

fn config(task: &str, steps: usize) -> ExperimentConfig {
    serde_json::from_value(json!({
        "task": task,
        "strategy": "ms1",
        "train_ratio": 1.0,
        "eval_ratio": 1.0,
        "model": {"dim": 16, "depth": 4, "heads": 2, "mlp_ratio": 2, "patch": 4, "decoder_width": 8},
        "optimizer": {"lr": 0.05, "steps": steps, "batch_size": 16},
        "data": {
            "scene": {"height": 16, "width": 16, "channels": 3, "lambda": 4.0, "classes": 4,
                      "thresholds": [-0.8, 0.0, 0.8], "label_block": 4, "seed": 3},
            "train": 64, "eval": 48, "balanced_presence": true
        },
        "seed": 5
    }))
    .unwrap()
}

fn csv(rows: &[rvit::harness::ResultRow]) -> String {
    let mut out = Vec::new();
    write_rows_csv(&mut out, rows).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    for task in ["classification", "segmentation"] {
        let mut cfg = config(task, 1);
        cfg.optimizer.lr = 1e-3;
        let data = prepare_data(&cfg.data).unwrap();
        let batch = &data.train[..8];
        let mut net = Network::new(cfg.network_config().unwrap(), cfg.seed).unwrap();
        let before = sgd_step(&mut net, &cfg, batch, 0).unwrap();
        let after = sgd_step(&mut net, &cfg, batch, 0).unwrap();
        assert!(after < before, "{task}: {after} !< {before}");
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let mut cfg = config("classification", 6);
    cfg.train_ratio = 0.5;
    let data = prepare_data(&cfg.data).unwrap();
    let (a, la) = fit(&cfg, &data.train).unwrap();
    let (b, lb) = fit(&cfg, &data.train).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let e1 = evaluate(&a, &data.eval, Strategy::Ms1, 1.0, None).unwrap();
    let e2 = evaluate(&a, &data.eval, Strategy::Ms1, 1.0, None).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn full_retention_ignores_the_strategy() {
    let cfg = config("classification", 4);
    let data = prepare_data(&cfg.data).unwrap();
    let (ms1, _) = fit(&cfg, &data.train).unwrap();
    let mut other = cfg.clone();
    other.strategy = Strategy::Ms2;
    let (ms2, _) = fit(&other, &data.train).unwrap();
    assert_eq!(ms1, ms2);
}

#[test]
fn probe_keeps_encoder_and_recovers_own_head() {
    let mut cfg = config("classification", 200);
    cfg.data.train = 256;
    cfg.data.eval = 256;
    let data = prepare_data(&cfg.data).unwrap();
    let (net, _) = fit(&cfg, &data.train).unwrap();
    let own = evaluate(&net, &data.train, Strategy::Ms1, 1.0, None).unwrap().value;

    let probe = ProbeConfig {
        lr: 0.5,
        steps: 3000,
        batch_size: 32,
        seed: 1,
    };
    let (probed, res) = linear_probe(&net, &data.train, &data.train, &probe).unwrap();
    assert_eq!(probed.encoder, net.encoder, "encoder changed during probing");
    assert!(res.value >= own - 0.02, "self-probe {} vs own head {own}", res.value);

    // With no steps the probe keeps its fresh head.
    let zero = ProbeConfig { steps: 0, ..probe };
    let (untrained, _) = linear_probe(&net, &data.train, &data.eval, &zero).unwrap();
    let fresh = Network::new(untrained.config.clone(), zero.seed).unwrap();
    assert_eq!(untrained.head, fresh.head);
    assert!(matches!(untrained.head, HeadParams::Classifier { .. }));
}

#[test]
fn sweep_edges_and_rerun() {
    let base = config("classification", 3);

    let mut empty = SweepGrid::new(base.clone());
    empty.eval_ratios = Some(vec![]);
    let rows = sweep(&empty, &SweepOptions::default()).unwrap();
    assert_eq!(csv(&rows), format!("{RESULT_CSV_HEADER}\n"));

    let one = SweepGrid::new(base.clone());
    let rows = sweep(&one, &SweepOptions::default()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].task, Task::Classification);
    assert!(rows[0].metric_value.is_some());

    let mut grid = SweepGrid::new(base);
    grid.train_ratios = Some(vec![1.0, 0.5]);
    grid.eval_ratios = Some(vec![1.0, 0.5]);
    // Patch 5 does not tile a 16-pixel image: that cell fails on its own.
    grid.patch_sizes = Some(vec![4, 5]);
    grid.seeds = Some(vec![1, 2]);
    let opts = SweepOptions { jobs: 2, timing: false };
    let first = csv(&sweep(&grid, &opts).unwrap());
    let second = csv(&sweep(&grid, &opts).unwrap());
    assert_eq!(first, second);
    let lines: Vec<&str> = first.lines().skip(1).collect();
    assert_eq!(lines.len(), 2 * 2 * 2 * 2);
    let failed = lines.iter().filter(|l| l.split(',').nth(9) == Some("")).count();
    assert_eq!(failed, 8);
}

use std::path::Path;
use std::process::{Command, Output};

use rrlm::eval::EvalReport;
use rrlm_cli::ablate::{grid_csv, run_grid, Cell, GridFile, PoolChoice, ABLATION_HEADER};
use rrlm_cli::compare::{compare_reports, Winner};
use rrlm_cli::config::RunConfig;

fn rrlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrlm")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A configuration small enough to train in well under a second.
fn tiny() -> RunConfig {
    RunConfig {
        n_event_types: 3,
        n_attributes: 2,
        motif_len: 2,
        audio_vocab: 8,
        text_vocab: 8,
        text_dim: 4,
        max_events: 2,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        total_steps: 6,
        warmup_steps: 2,
        batch_size: 4,
        top_k: 4,
        checkpoint_every: 2,
        eval_prompts: 6,
        ..RunConfig::default()
    }
}

fn report(acc: f64, fad: f64) -> EvalReport {
    EvalReport {
        n_samples: 10,
        scene_accuracy: acc,
        scene_precision: acc,
        scene_recall: acc,
        scene_f1: acc,
        proxy_fad: fad,
        proxy_kl: 0.1,
        seed: 0,
        top_k: 16,
        temperature: 1.0,
        guidance_scale: 3.0,
    }
}

#[test]
fn dump_config_round_trips_byte_for_byte() {
    let o = rrlm(&["--dump-config"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text, RunConfig::default().to_json());
    let parsed = RunConfig::from_json(&text).unwrap();
    assert_eq!(parsed, RunConfig::default());

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, tiny().to_json()).unwrap();
    let o = rrlm(&["--dump-config", "--config", path(&file)]);
    assert_eq!(stdout(&o), tiny().to_json());
    std::fs::write(&file, r#"{"lambda": 2.0}"#).unwrap();
    let o = rrlm(&["--dump-config", "--config", path(&file)]);
    assert_eq!(RunConfig::from_json(&stdout(&o)).unwrap(), RunConfig { lambda: 2.0, ..RunConfig::default() });
}

#[test]
fn defaults_match_the_documented_values() {
    let c = RunConfig::default();
    assert_eq!((c.batch_size, c.total_steps, c.warmup_steps), (16, 3000, 120));
    assert_eq!((c.peak_lr, c.beta1, c.beta2, c.weight_decay), (3e-3, 0.9, 0.95, 0.1));
    assert_eq!((c.grad_clip, c.ema_decay, c.cfg_ratio, c.lambda), (1.0, 0.99, 0.1, 3.0));
    assert_eq!((c.top_k, c.temperature, c.guidance_scale), (16, 1.0, 3.0));
    assert_eq!((c.streams, c.audio_vocab), (2, 64));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"lamda": 3.0}"#).unwrap();
    assert_eq!(rrlm(&["--dump-config", "--config", path(&file)]).status.code(), Some(1));
    std::fs::write(&file, r#"{"batch_size": 1}"#).unwrap();
    assert_eq!(rrlm(&["--dump-config", "--config", path(&file)]).status.code(), Some(1));
    std::fs::write(&file, r#"{"top_k": 65}"#).unwrap();
    assert_eq!(rrlm(&["--dump-config", "--config", path(&file)]).status.code(), Some(1));
    assert_eq!(rrlm(&["--dump-config", "--config", "/nonexistent.json"]).status.code(), Some(1));
    assert_eq!(rrlm(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(rrlm(&[]).status.code(), Some(1));
    assert_eq!(rrlm(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = rrlm(&["eval", "--ckpt", path(&bad), "--n", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_sample_eval_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, tiny().to_json()).unwrap();
    let run = dir.path().join("run");

    let o = rrlm(&["train", "--config", path(&cfg), "--out", path(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 6);
    assert_eq!(std::fs::read_to_string(run.join("config.json")).unwrap(), tiny().to_json());
    let ckpt = run.join("checkpoint.ckpt");

    let samples = dir.path().join("samples");
    let o = rrlm(&["sample", "--ckpt", path(&ckpt), "--n", "3", "--out", path(&samples)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(samples.join("tokens.bin").exists() && samples.join("manifest.json").exists());
    let o = rrlm(&["sample", "--ckpt", path(&ckpt), "--n", "3", "--top-k", "99"]);
    assert_eq!(o.status.code(), Some(1));

    let o = rrlm(&["eval", "--ckpt", path(&ckpt), "--n", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(r.n_samples, 8);
    r.check().unwrap();

    let o = rrlm(&["compare", path(&run), path(&run)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ties 4"), "{}", stdout(&o));
    let o = rrlm(&["compare", path(&run), path(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resumed_training_matches_uninterrupted_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, tiny().to_json()).unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert_eq!(rrlm(&["train", "--config", path(&cfg), "--out", path(&full)]).status.code(), Some(0));
    let o = rrlm(&["train", "--config", path(&cfg), "--out", path(&split), "--max-steps", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let ckpt = split.join("checkpoint.ckpt");
    assert_eq!(rrlm(&["train", "--resume", path(&ckpt), "--out", path(&split)]).status.code(), Some(0));
    let a = std::fs::read(full.join("metrics.csv")).unwrap();
    let b = std::fs::read(split.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(full.join("checkpoint.ckpt")).unwrap(), std::fs::read(&ckpt).unwrap());
}

#[test]
fn grad_check_command_passes() {
    let o = rrlm(&["grad-check", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().count() >= 16 && !out.contains("FAIL"), "{out}");
}

#[test]
fn grid_lists_expand_in_order() {
    let grid: GridFile = serde_json::from_str(r#"{"pool": ["max", "mean"], "cfg_ratio": [0, 0.1, 0.2, 0.3], "lambda": [0, 1, 3]}"#).unwrap();
    let cells = grid.expand(&RunConfig::default()).unwrap();
    assert_eq!(cells.len(), 24);
    assert_eq!(cells[0], Cell { pool: PoolChoice::Max, cfg_ratio: 0.0, lambda: 0.0 });
    assert_eq!(cells[1], Cell { pool: PoolChoice::Max, cfg_ratio: 0.0, lambda: 1.0 });
    assert_eq!(cells[23], Cell { pool: PoolChoice::Mean, cfg_ratio: 0.3, lambda: 3.0 });

    let none: GridFile = serde_json::from_str(r#"{"pool": ["none", "average"], "lambda": [0, 3]}"#).unwrap();
    let cells = none.expand(&RunConfig::default()).unwrap();
    assert_eq!(cells.len(), 3);
    assert_eq!(cells[0], Cell { pool: PoolChoice::None, cfg_ratio: 0.1, lambda: 0.0 });
    assert_eq!(cells[1].pool, PoolChoice::Mean);
}

#[test]
fn grid_rejects_bad_files() {
    let both: GridFile = serde_json::from_str(r#"{"pool": ["max"], "cells": [{"pool": "max", "cfg_ratio": 0.1, "lambda": 3}]}"#).unwrap();
    assert!(both.expand(&RunConfig::default()).is_err());
    assert!(serde_json::from_str::<GridFile>(r#"{"pools": ["max"]}"#).is_err());
    let bad: GridFile = serde_json::from_str(r#"{"cfg_ratio": [1.5]}"#).unwrap();
    assert!(bad.expand(&RunConfig::default()).is_err());
}

#[test]
fn explicit_cells_reproduce_the_comparison_table_layout() {
    let grid: GridFile = serde_json::from_str(
        r#"{"cells": [
            {"pool": "none", "cfg_ratio": 0.1, "lambda": 3},
            {"pool": "max", "cfg_ratio": 0.1, "lambda": 3},
            {"pool": "mean", "cfg_ratio": 0.1, "lambda": 3}
        ]}"#,
    )
    .unwrap();
    let base = tiny();
    let cells = grid.expand(&base).unwrap();
    assert_eq!(cells[0].lambda, 0.0);
    let results = run_grid(&base, &cells, 2).unwrap();
    let csv = grid_csv(&results);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("none,0.1,0,"));
    assert!(lines[2].starts_with("max,0.1,3,"));
    assert!(lines[3].starts_with("mean,0.1,3,"));
    // Thread count does not change any cell.
    assert_eq!(grid_csv(&run_grid(&base, &cells, 1).unwrap()), csv);
}

#[test]
fn ablate_command_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    let grid = dir.path().join("grid.json");
    let out = dir.path().join("grid.csv");
    std::fs::write(&cfg, RunConfig { total_steps: 3, eval_prompts: 3, ..tiny() }.to_json()).unwrap();
    std::fs::write(&grid, r#"{"pool": ["max"], "lambda": [0, 3]}"#).unwrap();
    let o = rrlm(&["ablate", "--config", path(&cfg), "--grid", path(&grid), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn compare_identical_reports_gives_zero_deltas() {
    let r = report(0.6, 0.2);
    let c = compare_reports(&r, &r, "a", "b");
    assert_eq!(c.deltas, [0.0; 4]);
    assert_eq!(c.winners, [Winner::Tie; 4]);
    assert!(c.summary().ends_with("ties 4"));
}

#[test]
fn compare_picks_winners_by_metric_direction() {
    let c = compare_reports(&report(0.6, 0.2), &report(0.7, 0.3), "w/o rr", "w/ rr");
    assert!((c.deltas[2] - 0.1).abs() < 1e-15);
    assert!((c.deltas[0] - 0.1).abs() < 1e-15);
    assert_eq!(c.winners, [Winner::A, Winner::Tie, Winner::B, Winner::B]);
    assert_eq!(c.summary(), "w/ rr vs w/o rr: w/ rr wins 2 [scene_acc scene_f1], loses 1 [proxy_fad], ties 1");
    let table = c.render();
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().nth(3).unwrap().starts_with("delta"));
}

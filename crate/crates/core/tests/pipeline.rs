mod common;

use std::path::Path;
use std::process::Command;

use puzzle_nas::cost::KvPrecision;
use puzzle_nas::error::Error;
use puzzle_nas::kvquant::QuantScales;
use puzzle_nas::library::ArchitectureSpec;
use puzzle_nas::pipeline::{files, sha256_file, ModelChoice, QuantizeSummary, Run, RunConfig, RunLock, ScalesChoice};
use puzzle_nas::scoring::{AttentionSignals, ScoreSignal, ScoreTable};

use common::quick_config;

fn puzzle(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_puzzle")).args(args).output().unwrap()
}

fn write_config(dir: &Path, config: &RunConfig) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn same_seed_gives_byte_identical_score_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        Run::new(d.path(), quick_config()).unwrap().cmd_score(None).unwrap();
    }
    for f in [files::SCORES, files::RANKING, files::LAYER_RANKS, files::LIBRARY, files::PARENT_BIN] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_config_names_the_path() {
    let out = puzzle(&["--config", "/nonexistent/run.json", "score"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.json"));
}

#[test]
fn infeasible_target_exits_two_naming_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config();
    cfg.scenarios[0].target_speedup = 50.0;
    cfg.score_signals = AttentionSignals::ActivationMse;
    cfg.attention_signal = ScoreSignal::ActivationMse;
    let cfg_path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("run");
    let out_dir = out_dir.to_str().unwrap();
    assert!(puzzle(&["--config", &cfg_path, "--out", out_dir, "score"]).status.success());
    let out = puzzle(&["--config", &cfg_path, "--out", out_dir, "search"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("long"), "{stderr}");
}

#[test]
fn unit_targets_search_to_the_parent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config();
    for s in &mut cfg.scenarios {
        s.target_speedup = 1.0;
    }
    let run = Run::new(dir.path(), cfg).unwrap();
    run.cmd_score(None).unwrap();
    let (spec, _) = run.cmd_search(None, None).unwrap();
    let parent = ArchitectureSpec::parent(&run.config.model);
    for (a, b) in spec.layers.iter().zip(&parent.layers) {
        assert_eq!((a.attention, a.experts_kept), (b.attention, b.experts_kept));
    }
}

#[test]
fn task_drop_only_scoring_leaves_ffn_out_of_the_task_table() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), quick_config()).unwrap();
    run.cmd_score(Some(AttentionSignals::TaskDrop)).unwrap();
    let table = ScoreTable::read_jsonl(dir.path().join(files::SCORES)).unwrap();
    let task = table.filter(ScoreSignal::TaskDrop);
    assert!(!task.entries.is_empty());
    assert!(task.entries.iter().all(|e| e.variant.as_str().starts_with("attn/")));
    let mse = table.filter(ScoreSignal::ActivationMse);
    assert!(mse.entries.iter().all(|e| e.variant.as_str().starts_with("ffn/")));
}

#[test]
fn quantize_writes_both_scale_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), quick_config()).unwrap();
    run.cmd_score(Some(AttentionSignals::ActivationMse)).unwrap();
    run.cmd_search(None, Some(ScoreSignal::ActivationMse)).unwrap();
    run.cmd_assemble().unwrap();
    run.cmd_quantize(ModelChoice::Child, ScalesChoice::None).unwrap();
    let cal = run.cmd_quantize(ModelChoice::Child, ScalesChoice::Calibrated).unwrap();
    let read = |mode: &str| -> QuantizeSummary {
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(files::kv_scales(mode))).unwrap()).unwrap()
    };
    let none = read("none");
    assert_eq!(none.scales, QuantScales::unit(8));
    let file = read("calibrated");
    assert_eq!(file, cal);
    assert_eq!(file.calibration_saturations, 0);
    for l in &file.scales.layers {
        assert!(l.k_raw <= l.k_scale && l.v_raw <= l.v_scale);
    }
    // FP8 eval with calibrated scales appends records under a distinct id.
    run.cmd_eval(ModelChoice::Child, KvPrecision::Fp8, ScalesChoice::Calibrated).unwrap();
    let records = puzzle_nas::metrics::read_records_jsonl(dir.path().join(files::RECORDS)).unwrap();
    assert!(records.iter().all(|r| r.model_id == "child-calibrated"));
    assert_eq!(records.len(), 3);
}

#[test]
fn held_lock_blocks_a_stage_and_is_released() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), quick_config()).unwrap();
    {
        let _held = RunLock::acquire(dir.path()).unwrap();
        let err = run.cmd_score(None).unwrap_err();
        assert!(matches!(err, Error::Stage { ref source, .. } if matches!(**source, Error::Locked(_))), "{err}");
    }
    run.cmd_score(Some(AttentionSignals::ActivationMse)).unwrap();
    assert!(!dir.path().join(files::LOCK).exists());
}

#[test]
fn stages_rerun_from_recorded_inputs_and_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), quick_config()).unwrap();
    run.cmd_score(None).unwrap();
    let (first, _) = run.cmd_search(None, None).unwrap();
    let spec_hash = sha256_file(&dir.path().join(files::SPEC)).unwrap();
    let (again, _) = run.cmd_search(None, None).unwrap();
    assert_eq!(first, again);
    assert_eq!(sha256_file(&dir.path().join(files::SPEC)).unwrap(), spec_hash);

    let manifest = run.read_manifest().unwrap().unwrap();
    let search = &manifest.stages["search"];
    assert!(search.inputs.iter().any(|f| f.path == files::SCORES));
    assert_eq!(manifest.config_hash, run.config.hash());

    std::fs::write(dir.path().join(files::SCORES), "").unwrap();
    let err = run.cmd_search(None, None).unwrap_err().to_string();
    assert!(err.contains(files::SCORES) && err.contains("score"), "{err}");
}

#[test]
fn frontier_subcommand_reproduces_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let records = common::fixture("frontier_64k_node.jsonl");
    let out = puzzle(&[
        "--out",
        dir.path().to_str().unwrap(),
        "frontier",
        "--records",
        records.to_str().unwrap(),
        "--baseline",
        "gpt-oss-120B/bf16/high",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let points = puzzle_nas::metrics::read_frontier_csv(dir.path().join("frontier.csv")).unwrap();
    assert_eq!(points.len(), 15);
    let puzzle_fp8 = points
        .iter()
        .find(|p| p.model == "gpt-oss-puzzle-88B" && p.kv_precision == KvPrecision::Fp8 && p.effort.to_string() == "high")
        .unwrap();
    assert!((puzzle_fp8.relative_request_rate - 2.077).abs() <= 0.015);
}

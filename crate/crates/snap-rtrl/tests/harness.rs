//! Harness-level integration tests: determinism, update-period semantics,
//! config plumbing, and output formats.

use snap_rtrl::cells::Architecture;
use snap_rtrl::harness::{run_experiment, MetricsRecord, RunConfig, TaskId};

fn tiny_copy_config(engine: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task = TaskId::Copy;
    cfg.arch = Architecture::Gru;
    cfg.units = 12;
    cfg.sparsity = 0.5;
    cfg.engine = engine.into();
    cfg.update_period = 1;
    cfg.batch = 4;
    cfg.lr = 1e-3;
    cfg.budget_tokens = 4_000;
    cfg.seed = 3;
    cfg.log_interval = 1_000;
    cfg
}

#[test]
fn identical_configs_give_bit_identical_metrics() {
    let dir = std::env::temp_dir().join(format!("snap-rtrl-det-{}", std::process::id()));
    let run = |tag: &str| {
        let mut cfg = tiny_copy_config("snap2");
        cfg.out = Some(dir.join(tag));
        run_experiment(cfg).unwrap();
        std::fs::read_to_string(dir.join(tag).join("metrics.jsonl")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    // every field except wall-clock must match exactly
    let strip = |text: &str| -> Vec<MetricsRecord> {
        text.lines()
            .map(|l| {
                let mut r: MetricsRecord = serde_json::from_str(l).unwrap();
                r.wall_ms = 0;
                r
            })
            .collect()
    };
    let (ra, rb) = (strip(&a), strip(&b));
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(serde_json::to_string(x).unwrap(), serde_json::to_string(y).unwrap());
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn zero_learning_rate_keeps_loss_flat() {
    // the parameter trajectory is constant, so the same batches give the
    // same losses no matter the update period
    let mut cfg_a = tiny_copy_config("snap1");
    cfg_a.lr = 0.0;
    cfg_a.update_period = 1;
    let mut cfg_b = cfg_a.clone();
    cfg_b.update_period = 7;
    let a = run_experiment(cfg_a).unwrap();
    let b = run_experiment(cfg_b).unwrap();
    assert_eq!(a.final_bpc.to_bits(), b.final_bpc.to_bits());
    assert_eq!(a.final_level, b.final_level);
}

#[test]
fn update_period_spanning_the_sequence_equals_end_of_sequence_updates() {
    // every copy sequence here has length 4 (level stays 1 under lr = 0 is
    // trivial, so use a short budget where the level stays low); U larger
    // than any sequence behaves exactly like U = 0
    let mut cfg_a = tiny_copy_config("snap1");
    cfg_a.budget_tokens = 1_500;
    cfg_a.update_period = 0;
    let mut cfg_b = cfg_a.clone();
    cfg_b.update_period = 1_000_000;
    let a = run_experiment(cfg_a).unwrap();
    let b = run_experiment(cfg_b).unwrap();
    assert_eq!(a.final_bpc.to_bits(), b.final_bpc.to_bits());
    assert_eq!(a.steps, b.steps);
}

#[test]
fn records_are_self_contained_and_monotone() {
    let dir = std::env::temp_dir().join(format!("snap-rtrl-jsonl-{}", std::process::id()));
    let mut cfg = tiny_copy_config("rflo");
    cfg.out = Some(dir.clone());
    cfg.budget_tokens = 6_000;
    cfg.log_interval = 1_000;
    let _ = run_experiment(cfg.clone()).unwrap();
    let text = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let records: Vec<MetricsRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(records.len() >= 2);
    let hash = cfg.hash();
    let mut last = (0u64, 0u64);
    for r in &records {
        assert_eq!(r.config_hash, hash);
        assert!(r.step >= last.0 && r.tokens >= last.1, "monotone step/tokens");
        last = (r.step, r.tokens);
    }
    assert!(dir.join("summary.csv").exists());
    assert!(dir.join("config.txt").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_configs_are_rejected_before_start() {
    let mut cfg = tiny_copy_config("snap2");
    cfg.sparsity = 1.5;
    assert!(run_experiment(cfg).is_err());

    let mut cfg = tiny_copy_config("nonsense");
    cfg.budget_tokens = 10;
    assert!(run_experiment(cfg).is_err());

    // pruning under a compressed-influence engine is a configuration error
    let mut cfg = tiny_copy_config("snap2");
    cfg.prune_final_sparsity = 0.5;
    cfg.prune_final_step = 100;
    assert!(run_experiment(cfg).is_err());
}

#[test]
fn online_engines_match_across_update_periods_at_step_level() {
    // same seed, different U: the first update happens at different times,
    // so trajectories differ, but both must remain finite and complete
    for u in [1usize, 3, 0] {
        let mut cfg = tiny_copy_config("snap1");
        cfg.update_period = u;
        let summary = run_experiment(cfg).unwrap();
        assert!(summary.final_bpc.is_finite());
        assert!(summary.tokens >= 4_000);
    }
}

#[test]
fn bytelm_run_trains_and_validates() {
    let mut cfg = RunConfig::default();
    cfg.task = TaskId::ByteLm;
    cfg.arch = Architecture::Gru;
    cfg.units = 16;
    cfg.engine = "snap1".into();
    cfg.update_period = 0;
    cfg.batch = 2;
    cfg.lr = 1e-3;
    cfg.budget_steps = 30;
    cfg.budget_tokens = 0;
    cfg.crop_len = 24;
    cfg.corpus_bytes = 20_000;
    cfg.readout_hidden = 16;
    cfg.seed = 5;
    let summary = run_experiment(cfg).unwrap();
    let val = summary.val_bpc.unwrap();
    // an untrained byte model sits at 8 bpc; thirty steps already pull the
    // synthetic corpus well below that
    assert!(val < 8.0, "val bpc {val}");
    assert!(summary.steps == 30);
}

#[test]
fn lstm_engines_run_end_to_end() {
    for engine in ["snap1", "snap2", "rflo", "uoro", "bptt"] {
        let mut cfg = tiny_copy_config(engine);
        cfg.arch = Architecture::Lstm;
        cfg.units = 8;
        cfg.budget_tokens = 1_000;
        if engine == "bptt" {
            cfg.update_period = 0;
        }
        let summary = run_experiment(cfg).unwrap();
        assert!(summary.final_bpc.is_finite(), "{engine}");
    }
}

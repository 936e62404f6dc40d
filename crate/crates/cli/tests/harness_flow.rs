//! End-to-end harness checks on short desk runs: artifact determinism,
//! the test-phase freeze contract, checkpoint requirements, and the
//! sweep/comparison plumbing.

use std::fs;

use modsbsg_cli::config::parse_config;
use modsbsg_cli::report::compare_run_dirs;
use modsbsg_cli::runner::{
    hash_artifacts, run_experiment, train_then_test, Phase, RunError, RunOptions,
};
use modsbsg_cli::sweep::{sweep, SweepAxis, SweepValues};

fn short_config(mode: &str, leaders: &str) -> String {
    format!(
        r#"{{
            "plant": "bglp",
            "game": {{ "mode": "{mode}", "leaders": {leaders},
                       "scheduler": {{ "type": "gradual_reduction", "theta0": 5.0, "decay": 0.99 }} }},
            "episodes": {{ "train": 2, "cycles_per_episode": 40, "test": 2 }},
            "seed": 17
        }}"#
    )
}

#[test]
fn repeated_runs_are_byte_identical() {
    let resolved = parse_config(&short_config("mod_sbsg", "[2, 3]")).unwrap();
    let base = tempfile::tempdir().unwrap();
    let a = base.path().join("a");
    let b = base.path().join("b");
    run_experiment(&resolved, Phase::Train, &RunOptions::new(&a)).unwrap();
    run_experiment(&resolved, Phase::Train, &RunOptions::new(&b)).unwrap();
    let ha = hash_artifacts(&a).unwrap();
    let hb = hash_artifacts(&b).unwrap();
    assert!(!ha.is_empty());
    assert_eq!(ha, hb);
}

#[test]
fn test_phase_freezes_checkpoints_and_flags_rows() {
    let resolved = parse_config(&short_config("mod_sbsg", "[2, 3]")).unwrap();
    let base = tempfile::tempdir().unwrap();
    let (train, test) = train_then_test(&resolved, base.path(), true).unwrap();

    // The checkpoint is untouched by testing.
    let before = hash_artifacts(&train.maps_dir()).unwrap();
    let cycles = fs::read_to_string(test.out_dir.join("cycles.csv")).unwrap();
    for line in cycles.lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("test"));
    }
    let after = hash_artifacts(&train.maps_dir()).unwrap();
    assert_eq!(before, after);
    assert_eq!(test.summary.phase, Phase::Test);
}

#[test]
fn test_without_checkpoint_is_rejected() {
    let resolved = parse_config(&short_config("mod_sbsg", "[2, 3]")).unwrap();
    let base = tempfile::tempdir().unwrap();
    let options = RunOptions::new(base.path().join("test_only"));
    match run_experiment(&resolved, Phase::Test, &options) {
        Err(RunError::MissingCheckpoint(_)) => {}
        other => panic!("expected MissingCheckpoint, got {other:?}"),
    }
    // A checkpoint path with no map files is also rejected.
    let empty = base.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let options =
        RunOptions::new(base.path().join("test_only2")).with_checkpoint(&empty);
    assert!(matches!(
        run_experiment(&resolved, Phase::Test, &options),
        Err(RunError::MissingCheckpoint(_))
    ));
}

#[test]
fn cycle_log_matches_documented_columns() {
    let resolved = parse_config(&short_config("vanilla_sbpg", "[]")).unwrap();
    let base = tempfile::tempdir().unwrap();
    let train =
        run_experiment(&resolved, Phase::Train, &RunOptions::new(base.path().join("t"))).unwrap();
    let cycles = fs::read_to_string(train.out_dir.join("cycles.csv")).unwrap();
    let mut lines = cycles.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("episode,cycle,phase,p0_s0,p0_s1,p0_action,p0_utility"));
    assert!(header.ends_with(
        "phi_l,phi_f,phi_total,power_total_kw,overflow_l_per_s,demand_deficit_l_per_s"
    ));
    let cols = header.split(',').count();
    // 3 index columns + 5 players * (2 state + action + utility) + 6 metrics.
    assert_eq!(cols, 3 + 5 * 4 + 6);
    for line in lines {
        assert_eq!(line.split(',').count(), cols);
    }
    // 2 episodes x 40 cycles of rows.
    assert_eq!(cycles.lines().count() - 1, 80);
}

#[test]
fn compare_runs_from_directories() {
    let resolved = parse_config(&short_config("mod_sbsg", "[2, 3]")).unwrap();
    let base = tempfile::tempdir().unwrap();
    let (_, test) = train_then_test(&resolved, base.path(), false).unwrap();
    let report = compare_run_dirs(&test.out_dir, &test.out_dir).unwrap();
    for row in &report.rows {
        assert_eq!(row.delta_pct, Some(0.0));
    }
}

#[test]
fn leader_set_sweep_produces_ranked_reports() {
    let resolved = parse_config(&short_config("mod_sbsg", "[2, 3]")).unwrap();
    let base = tempfile::tempdir().unwrap();
    let values = SweepValues::LeaderSets(vec![vec![3], vec![2, 3], vec![1, 2, 3]]);
    let outcome =
        sweep(&resolved, SweepAxis::LeaderSet, &values, base.path(), false).unwrap();
    assert_eq!(outcome.ranked.len(), 3);
    for pair in outcome.ranked.windows(2) {
        assert!(pair[0].summary.potential >= pair[1].summary.potential);
    }
    assert!(base.path().join("sweep_summary.csv").is_file());
}

#[test]
fn shipped_configs_parse() {
    for name in [
        "bglp_sbpg",
        "bglp_modsbsg",
        "lsbglp_sequential_sbpg",
        "lsbglp_sequential_modsbsg",
        "lsbglp_serial_parallel_sbpg",
        "lsbglp_serial_parallel_modsbsg",
    ] {
        let path = format!("{}/../../configs/{name}.json", env!("CARGO_MANIFEST_DIR"));
        let text = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {path}"));
        let resolved = parse_config(&text).unwrap();
        assert_eq!(resolved.config.episodes.train, 200);
        assert_eq!(resolved.config.episodes.test, 50);
    }
}

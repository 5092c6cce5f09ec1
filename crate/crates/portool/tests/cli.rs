//! End-to-end checks of the command-line interface via the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn portool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_portool"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn lines_of(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

const TINY: &[&str] = &[
    "--seed", "3", "--n", "2", "--f", "2", "--t-max", "2", "--train-queries", "8",
    "--eval-queries", "4", "--batch-size", "4", "--rounds", "2", "--eval-step-cap", "3",
    "--max-step-tokens", "8",
];

#[test]
fn help_lists_all_subcommands() {
    let out = portool(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-data", "train", "eval", "compare", "ablate-gamma", "ablate-advantage",
        "ablate-gfn", "dump-tree",
    ] {
        assert!(text.contains(sub), "--help must list {sub}");
    }
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let mut args = vec!["gen-data", "--out", out_dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let out = portool(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines_of(&out_dir.join("train.jsonl")), 8);
    assert_eq!(lines_of(&out_dir.join("eval.jsonl")), 4);
}

#[test]
fn train_then_eval_round_trips_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let mut args = vec!["train", "--out", out_dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let out = portool(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("trained 2 rounds"));
    // Header plus one row per round.
    assert_eq!(lines_of(&out_dir.join("metrics.csv")), 3);
    assert!(out_dir.join("config.toml").is_file());

    let params = out_dir.join("params.json");
    let mut eval_args = vec!["eval", "--params", params.to_str().unwrap()];
    eval_args.extend_from_slice(TINY);
    let out = portool(&eval_args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));
}

#[test]
fn dump_tree_emits_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("dump");
    let mut args = vec![
        "dump-tree", "--out", out_dir.to_str().unwrap(), "--template", "lookup-fact:k2",
    ];
    args.extend_from_slice(TINY);
    let out = portool(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for name in ["tree.jsonl", "rewards.jsonl", "advantages.jsonl"] {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn invalid_mode_fails_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bad");
    let out = portool(&["train", "--out", out_dir.to_str().unwrap(), "--mode", "bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn compare_runs_two_modes_with_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("cmp");
    let mut args = vec![
        "compare", "--out", out_dir.to_str().unwrap(), "--modes", "portool,grpo",
    ];
    args.extend_from_slice(TINY);
    let mut args = args;
    // One round keeps the paired runs quick.
    let pos = args.iter().position(|a| *a == "--rounds").unwrap();
    args[pos + 1] = "1";
    let out = portool(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("summary.csv").is_file());
    assert!(out_dir.join("portool/metrics.csv").is_file());
    assert!(out_dir.join("grpo/metrics.csv").is_file());
}

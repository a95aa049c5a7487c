use std::path::Path;

use hnrn::cli::main_with_args;
use hnrn::config::{Paths, RunConfig};

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("hnrn").chain(args.iter().copied()))
}

/// Small, fast configuration with every artifact under `dir`.
fn write_config(dir: &Path) -> String {
    let p = |name: &str| dir.join(name);
    let mut cfg = RunConfig {
        paths: Paths {
            dataset: p("dataset.jsonl"),
            hmm: p("hmm.bin"),
            actor: p("actor.bin"),
            critic: p("critic.bin"),
            raw_actor: p("raw_actor.bin"),
            curves: p("curves.jsonl"),
            report: p("report.csv"),
            episodes: p("episodes.jsonl"),
            trajectory: p("trajectory.jsonl"),
        },
        ..Default::default()
    };
    cfg.collect.episodes = 6;
    cfg.collect.agent_counts = vec![2, 4, 8];
    cfg.collect.horizon = 60;
    cfg.hmm.states = 3;
    cfg.hmm.max_iters = 5;
    cfg.ddpg.warmup = 32;
    cfg.ddpg.batch_size = 16;
    cfg.ddpg.hidden = vec![16, 8];
    cfg.train.episodes = 3;
    cfg.eval.agent_counts = vec![2, 4];
    cfg.eval.trials = 2;
    cfg.eval.horizon = 200;
    cfg.eval.demo_agents = 4;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["train-hmm"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["eval", "--trials", "many"]), 2);
    assert_eq!(run(&["train-ddpg", "--regime", "sideways"]), 2);
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[hmm]\n\"Dimension of observation state\" = 7\n").unwrap();
    assert_eq!(run(&["eval", "--config", path.to_str().unwrap()]), 1);
    assert_eq!(run(&["eval", "--config", dir.path().join("absent.toml").to_str().unwrap()]), 1);
}

#[test]
fn missing_checkpoint_exits_one_without_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(run(&["eval", "--config", &cfg, "--policies", "hnrn"]), 1);
    assert!(!dir.path().join("report.csv").exists());
}

#[test]
fn eval_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    assert_eq!(run(&["eval", "--config", &cfg, "--seed", "1", "--policies", "orca,target-only"]), 0);
    let first = (read("report.csv"), read("trajectory.jsonl"), read("episodes.jsonl"));
    assert_eq!(run(&["eval", "--config", &cfg, "--seed", "1", "--policies", "orca,target-only"]), 0);
    assert_eq!(first, (read("report.csv"), read("trajectory.jsonl"), read("episodes.jsonl")));
    assert!(String::from_utf8(first.0).unwrap().starts_with("metric,policy,2_mean,2_std,4_mean,4_std\n"));
}

#[test]
fn pipeline_produces_a_diagnostic_demo_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let dataset = dir.path().join("dataset.jsonl");
    assert_eq!(run(&["collect", "--config", &cfg]), 0);
    assert_eq!(run(&["train-hmm", "--config", &cfg, "--dataset", dataset.to_str().unwrap()]), 0);
    assert_eq!(run(&["rank-states", "--config", &cfg, "--dataset", dataset.to_str().unwrap()]), 0);
    assert_eq!(run(&["train-ddpg", "--config", &cfg, "--regime", "collision-only"]), 0);
    assert_eq!(run(&["train-ddpg", "--config", &cfg, "--regime", "two-stage"]), 0);
    for name in ["hmm.bin", "actor.bin", "raw_actor.bin", "critic.bin", "curves.jsonl"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let demo = dir.path().join("demo.jsonl");
    assert_eq!(run(&["demo", "--config", &cfg, "--agents", "4", "--out", demo.to_str().unwrap()]), 0);
    let text = std::fs::read_to_string(&demo).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty() && records.len().is_multiple_of(4));
    for r in &records {
        for key in ["episode", "step", "agent_id", "x", "y", "yaw", "v_x", "v_z", "status"] {
            assert!(r.get(key).is_some(), "{key} missing from {r}");
        }
    }
    // diagnostics accompany every agent that was still driving when the step was taken
    let active = records.iter().filter(|r| r["state_id"].is_u64()).collect::<Vec<_>>();
    assert!(!active.is_empty());
    for r in active {
        assert!(r["state_id"].as_u64().unwrap() < 3);
        assert!((0.0..=1.0).contains(&r["hazard"].as_f64().unwrap()));
    }
}

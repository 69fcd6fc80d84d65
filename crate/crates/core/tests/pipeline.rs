use std::fs;
use std::path::{Path, PathBuf};

use frl::agents::Algorithm;
use frl::config::RunConfig;
use frl::env::MazeConfig;
use frl::pipeline::{self, SuiteManifest};

/// A maze run small enough for a unit test.
fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.env = MazeConfig {
        motion_noise_std: 0.02,
        ..MazeConfig::preset("open").unwrap()
    };
    c.online.agent.hidden_width = 16;
    c.online.max_env_steps = 8000;
    c.online.eval_interval = 1000;
    c.online.eval_episodes = 5;
    c.suite.transitions = 400;
    c.suite.snapshot_eval_episodes = 10;
    c.suite.random_anchor_episodes = 50;
    c.agent.hidden_width = 16;
    c.agent.batch_size = 32;
    c.agent.updates = 300;
    c.agent.metrics_interval = 100;
    c.agent.checkpoint_interval = 100;
    c.train.algorithms = vec![Algorithm::Cql, Algorithm::Bc];
    c.train.datasets = vec!["expert".into(), "random-medium-expert".into()];
    c.train.seeds = vec![0, 1];
    c.train.eval_episodes = 5;
    c.eval.q_error_rollouts = 2;
    c.eval.q_error_horizon = 50;
    c
}

fn hashes(m: &SuiteManifest) -> Vec<(String, String)> {
    m.datasets.iter().map(|d| (d.name.clone(), d.sha256.clone())).collect()
}

fn files(dir: &Path, name: &str) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() == name {
                found.push(p);
            }
        }
    }
    found.sort();
    found
}

#[test]
fn suite_is_reproducible_and_reusable() {
    let config = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline::cmd_collect(&config, a.path()).unwrap();
    // The second run starts from the first run's frozen config.
    let frozen = RunConfig::load(&a.path().join("suite/config.toml")).unwrap();
    assert_eq!(frozen, config);
    let second = pipeline::cmd_collect(&frozen, b.path()).unwrap();
    assert_eq!(first, second);
    assert_eq!(hashes(&first), hashes(&second));
    assert_eq!(first.random_anchor, second.random_anchor);
    assert_eq!(first.datasets.len(), 5);
    for d in &first.datasets {
        assert_eq!(d.transitions, 400);
        assert!(a.path().join("suite").join(&d.file).exists());
    }
    let rme = first.dataset("random-medium-expert").unwrap();
    assert_eq!(rme.origin_counts.get("random"), Some(&180));
    assert_eq!(rme.origin_counts.get("medium"), Some(&180));
    assert_eq!(rme.origin_counts.get("expert"), Some(&40));
    assert!(first.expert_anchor > first.random_anchor);
    assert!(a.path().join("suite/config.toml").exists());
    assert!(a.path().join("suite/online.csv").exists());

    // Reloading the saved behaviour policies reproduces the same data.
    let mut reuse = config.clone();
    reuse.online.no_train = true;
    let third = pipeline::cmd_collect(&reuse, a.path()).unwrap();
    assert_eq!(first, third);
}

#[test]
fn train_grid_is_deterministic_and_reported() {
    let config = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::cmd_collect(&config, a.path()).unwrap();
    pipeline::cmd_collect(&config, b.path()).unwrap();
    let ra = pipeline::cmd_train(&config, a.path()).unwrap();
    let rb = pipeline::cmd_train(&config, b.path()).unwrap();
    assert_eq!(ra.len(), 2 * 2 * 2);
    assert_eq!(ra, rb);
    let evals = files(&a.path().join("train"), "eval.csv");
    assert_eq!(evals.len(), 8);
    for p in &evals {
        let twin = b.path().join(p.strip_prefix(a.path()).unwrap());
        assert_eq!(fs::read(p).unwrap(), fs::read(twin).unwrap());
        assert!(p.with_file_name("config.toml").exists());
        assert!(p.with_file_name("checkpoint").join("agent.json").exists());
    }

    // Re-running over finished cells reloads their checkpoints.
    let again = pipeline::cmd_train(&config, a.path()).unwrap();
    assert_eq!(again, ra);

    let report = pipeline::cmd_report(a.path(), Some(&config)).unwrap();
    assert_eq!(report.labels, vec!["cql", "bc"]);
    assert_eq!(report.datasets, vec!["expert", "random-medium-expert"]);
    for cell in &report.cells {
        assert_eq!(cell.scores.len(), 2);
    }
    assert!(a.path().join("report.txt").exists());

    // Standalone evaluation of one cell agrees with the grid's report.
    let mut eval = config.clone();
    eval.eval.checkpoint = Some(a.path().join("train/cql/expert/seed1/checkpoint"));
    eval.eval.episodes = config.train.eval_episodes;
    let (r, _) = pipeline::cmd_eval(&eval, a.path()).unwrap();
    let cell = ra.iter().find(|c| c.label == "cql" && c.dataset == "expert" && c.seed == 1).unwrap();
    assert_eq!(r, cell.report);
}

#[test]
fn mix_command_follows_recipe() {
    let config = tiny();
    let dir = tempfile::tempdir().unwrap();
    pipeline::cmd_collect(&config, dir.path()).unwrap();
    let mut mix = config.clone();
    mix.mix.parts = vec![
        frl::config::MixPartConfig {
            path: "suite/expert.frldat".into(),
            fraction: 0.25,
        },
        frl::config::MixPartConfig {
            path: "suite/sources/random.frldat".into(),
            fraction: 0.75,
        },
    ];
    mix.mix.total = 200;
    let mixed = pipeline::cmd_mix(&mix, dir.path()).unwrap();
    assert_eq!(mixed.len(), 200);
    let counts = mixed.origin_counts();
    assert!(counts.contains(&(frl::data::SourceTag::Expert, 50)));
    assert!(counts.contains(&(frl::data::SourceTag::Random, 150)));
    assert!(dir.path().join(&mix.mix.output).exists());
}

//! Declarative run configuration (TOML).
//!
//! Every key has a default, so an empty file is a valid configuration. Unknown
//! keys are rejected. Each run writes its fully resolved configuration next to
//! its outputs as `config.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, Algorithm, OnlineOptions};
use crate::decomp::ActionSpec;
use crate::env::MazeConfig;
use crate::error::{Error, Result};

/// Names of the dataset tiers produced by `collect`.
pub const TIERS: [&str; 4] = ["expert", "medium", "medium-expert", "random-medium-expert"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths are resolved against the output root.
    pub output_dir: PathBuf,
    pub env: MazeConfig,
    pub online: OnlineSection,
    pub suite: SuiteSection,
    pub agent: AgentConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub mix: MixSection,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs"),
            env: MazeConfig {
                motion_noise_std: 0.02,
                ..MazeConfig::default()
            },
            online: OnlineSection::default(),
            suite: SuiteSection::default(),
            agent: AgentConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            mix: MixSection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

/// Online DecQN run that produces the expert and medium behaviour policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineSection {
    pub agent: AgentConfig,
    pub seed: u64,
    pub max_env_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub buffer_capacity: usize,
    pub learning_starts: usize,
    /// Refuse to train; existing checkpoints must be present.
    pub no_train: bool,
}

impl Default for OnlineSection {
    fn default() -> Self {
        let o = OnlineOptions::default();
        OnlineSection {
            agent: AgentConfig::for_algorithm(Algorithm::OnlineDecqn),
            seed: 0,
            max_env_steps: o.max_env_steps,
            eval_interval: o.eval_interval,
            eval_episodes: o.eval_episodes,
            buffer_capacity: o.buffer_capacity,
            learning_starts: o.learning_starts,
            no_train: false,
        }
    }
}

impl OnlineSection {
    pub fn options(&self) -> OnlineOptions {
        OnlineOptions {
            max_env_steps: self.max_env_steps,
            eval_interval: self.eval_interval,
            eval_episodes: self.eval_episodes,
            buffer_capacity: self.buffer_capacity,
            learning_starts: self.learning_starts,
            keep_snapshots: true,
            ..OnlineOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub transitions: usize,
    /// Per-dimension randomisation while collecting expert and medium data.
    pub collect_epsilon: f64,
    /// The medium policy is the first snapshot reaching this fraction of the
    /// expert return.
    pub medium_fraction: f64,
    pub snapshot_eval_episodes: usize,
    pub random_anchor_episodes: usize,
    pub seed: u64,
}

impl Default for SuiteSection {
    fn default() -> Self {
        SuiteSection {
            transitions: 10_000,
            collect_epsilon: 0.0,
            medium_fraction: 1.0 / 3.0,
            snapshot_eval_episodes: 100,
            random_anchor_episodes: 1000,
            seed: 0,
        }
    }
}

/// Offline training grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub algorithms: Vec<Algorithm>,
    pub datasets: Vec<String>,
    pub seeds: Vec<u64>,
    /// Expand each algorithm over its hyperparameter search space.
    pub sweep: bool,
    /// Directory holding the collected suite; defaults to `<output_dir>/suite`.
    pub suite_dir: Option<PathBuf>,
    pub eval_episodes: usize,
    /// Greedy episodes scored at every metrics row; 0 disables.
    pub progress_episodes: usize,
    /// Record the Monte-Carlo Q error at every metrics row.
    pub track_q_error: bool,
    /// Worker threads for grid cells; 0 uses all cores.
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            algorithms: Algorithm::OFFLINE.to_vec(),
            datasets: TIERS.iter().map(|s| s.to_string()).collect(),
            seeds: (0..5).collect(),
            sweep: false,
            suite_dir: None,
            eval_episodes: 100,
            progress_episodes: 0,
            track_q_error: false,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Agent checkpoint directory for the `eval` command.
    pub checkpoint: Option<PathBuf>,
    pub episodes: usize,
    pub seed: u64,
    pub q_error_rollouts: usize,
    pub q_error_horizon: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: None,
            episodes: 100,
            seed: 1 << 40,
            q_error_rollouts: 10,
            q_error_horizon: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixPartConfig {
    pub path: PathBuf,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub parts: Vec<MixPartConfig>,
    pub total: usize,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for MixSection {
    fn default() -> Self {
        MixSection {
            parts: Vec::new(),
            total: 10_000,
            seed: 0,
            output: PathBuf::from("mixed.frldat"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpace {
    pub dims: usize,
    pub sub_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub spaces: Vec<SimSpace>,
    pub b: f64,
    pub k: f64,
    pub gamma: f64,
    pub inner_reps: usize,
    pub outer_reps: usize,
    pub seed: u64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            spaces: vec![
                SimSpace { dims: 3, sub_actions: 2 },
                SimSpace { dims: 4, sub_actions: 2 },
                SimSpace { dims: 3, sub_actions: 3 },
            ],
            b: 1.0,
            k: 2.0,
            gamma: 1.0,
            inner_reps: 10_000,
            outer_reps: 100,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "config file",
                path: path.to_owned(),
            },
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    /// Writes the resolved configuration into `dir/config.toml`.
    pub fn freeze(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        let online = &self.online.agent;
        if online.algorithm != Algorithm::OnlineDecqn {
            return Err(Error::config("online.agent.algorithm must be online-decqn"));
        }
        online.validate()?;
        if self.agent.algorithm == Algorithm::OnlineDecqn {
            return Err(Error::config("agent.algorithm must be an offline algorithm"));
        }
        if self.train.algorithms.contains(&Algorithm::OnlineDecqn) {
            return Err(Error::config("train.algorithms lists online-decqn"));
        }
        for d in &self.train.datasets {
            if !TIERS.contains(&d.as_str()) {
                return Err(Error::config(format!("unknown dataset tier `{d}`")));
            }
        }
        if self.train.eval_episodes == 0 {
            return Err(Error::config("train.eval_episodes must be at least 1"));
        }
        let s = &self.suite;
        if s.transitions == 0 || s.snapshot_eval_episodes == 0 || s.random_anchor_episodes == 0 {
            return Err(Error::config("suite counts must be at least 1"));
        }
        if !(0.0..=1.0).contains(&s.collect_epsilon) || !(s.medium_fraction > 0.0 && s.medium_fraction < 1.0) {
            return Err(Error::config("suite.collect_epsilon in [0, 1] and medium_fraction in (0, 1)"));
        }
        let e = &self.eval;
        if e.episodes == 0 || e.q_error_rollouts == 0 || e.q_error_horizon == 0 {
            return Err(Error::config("eval counts must be at least 1"));
        }
        let sim = &self.simulate;
        if !(sim.b > 0.0) || !(sim.k > 1.0) || sim.inner_reps == 0 || sim.outer_reps == 0 {
            return Err(Error::config("simulate needs b > 0, k > 1 and positive repetition counts"));
        }
        for space in &sim.spaces {
            ActionSpec::uniform(space.dims, space.sub_actions)
                .map_err(|e| Error::config(format!("simulate space: {e}")))?;
        }
        Ok(())
    }

    /// `output_dir`, placed under `root` when relative.
    pub fn output_path(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn frozen_copy_round_trips() {
        let mut c = RunConfig::default();
        c.agent.cql_alpha = 0.25;
        c.train.seeds = vec![3, 9];
        c.env.walls.clear();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[agent]\nalpha = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("alpha")), "{err}");
        assert!(RunConfig::from_toml("typo = 1\n").is_err());
    }

    #[test]
    fn values_are_validated() {
        assert!(RunConfig::from_toml("[agent]\ngamma = 2.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\ndatasets = [\"nope\"]\n").is_err());
        assert!(RunConfig::from_toml("[simulate]\nk = 0.5\n").is_err());
        let ok = RunConfig::from_toml("[agent]\nalgorithm = \"cql\"\ncql_alpha = 2.0\n").unwrap();
        assert_eq!(ok.agent.algorithm, Algorithm::Cql);
        assert_eq!(ok.agent.cql_alpha, 2.0);
    }

    #[test]
    fn output_root() {
        let c = RunConfig::default();
        assert_eq!(c.output_path(Some(Path::new("/tmp/x"))), PathBuf::from("/tmp/x/runs"));
        assert_eq!(c.output_path(None), PathBuf::from("runs"));
    }
}

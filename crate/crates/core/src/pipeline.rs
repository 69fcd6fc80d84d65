//! End-to-end commands: build the dataset suite, train the offline grid,
//! evaluate checkpoints, run the bias simulations and tabulate results.
//!
//! Output layout under the run directory:
//!
//! ```text
//! suite/            config.toml, manifest.json, online.csv, <tier>.frldat,
//!                   sources/random.frldat, policies/{expert,medium}/
//! train/<label>/<tier>/seed<k>/
//!                   config.toml, checkpoint/, eval.csv, qerror.csv
//! simulate/         sim_N<dims>_n<sub>.csv
//! report.csv, report.txt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{self, Agent, AgentConfig, Algorithm, TrainHooks};
use crate::bias_sim::{self, NoiseSimConfig};
use crate::config::{RunConfig, TIERS};
use crate::data::{self, Dataset, SourceTag};
use crate::decomp::{ActionSpec, FactoredAction};
use crate::env::{random_policy_return, Environment, Maze, MazeConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, QErrorTrace};

pub const SUITE_MANIFEST: &str = "manifest.json";
/// Snapshot step count and evaluation stored beside each behaviour policy.
pub const POLICY_INFO: &str = "policy.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInfo {
    pub env_steps: u64,
    pub mean_return: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub file: String,
    pub sha256: String,
    pub transitions: usize,
    pub seed: u64,
    pub origin_counts: BTreeMap<String, usize>,
}

/// Everything needed to score policies against the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub env_id: String,
    pub env: MazeConfig,
    pub random_anchor: f64,
    pub expert_anchor: f64,
    pub expert: PolicyInfo,
    pub medium: PolicyInfo,
    pub online_seed: u64,
    pub suite_seed: u64,
    pub collect_epsilon: f64,
    pub datasets: Vec<DatasetEntry>,
}

impl SuiteManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SUITE_MANIFEST);
        if !path.exists() {
            return Err(Error::Missing {
                what: "suite manifest",
                path,
            });
        }
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::InvalidFile {
            format: "suite manifest",
            reason: e.to_string(),
        })
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetEntry> {
        self.datasets.iter().find(|d| d.name == name)
    }
}

pub fn env_id(config: &MazeConfig) -> String {
    format!("maze-N{}", config.actuators)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text)?;
    Ok(())
}

fn suite_dir(config: &RunConfig, out: &Path) -> PathBuf {
    config.train.suite_dir.clone().unwrap_or_else(|| out.join("suite"))
}

/// Deterministic seed for a named sub-task of a run.
fn sub_seed(base: u64, slot: u64) -> u64 {
    base.wrapping_mul(1_000_000).wrapping_add(slot * 100_000)
}

fn uniform_only(_: &[f64]) -> FactoredAction {
    unreachable!("epsilon = 1 never consults the policy")
}

fn save_dataset(ds: &Dataset, dir: &Path, name: &str, file: &str, seed: u64) -> Result<DatasetEntry> {
    let path = dir.join(file);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    ds.save(&path)?;
    Ok(DatasetEntry {
        name: name.to_owned(),
        file: file.to_owned(),
        sha256: ds.digest(),
        transitions: ds.len(),
        seed,
        origin_counts: ds
            .origin_counts()
            .into_iter()
            .map(|(t, n)| (t.name().to_owned(), n))
            .collect(),
    })
}

/// Trains (or reloads) the expert and medium policies, collects the
/// expert, medium and random data, mixes the two composite tiers and writes
/// the suite manifest.
pub fn cmd_collect(config: &RunConfig, out: &Path) -> Result<SuiteManifest> {
    config.validate()?;
    let dir = suite_dir(config, out);
    config.freeze(&dir)?;
    let env_config = &config.env;
    let maze = Maze::new(env_config.clone())?;
    let eval_seed = config.eval.seed;
    let episodes = config.suite.snapshot_eval_episodes;
    let policies = dir.join("policies");
    let (expert_dir, medium_dir) = (policies.join("expert"), policies.join("medium"));

    let have = expert_dir.join(agents::MANIFEST).exists() && medium_dir.join(agents::MANIFEST).exists();
    let (expert, medium, expert_info, medium_info) = if have {
        log::info!("reusing policies in {}", policies.display());
        let (expert, _) = Agent::load(&expert_dir).map_err(|e| e.in_stage("load expert"))?;
        let (medium, _) = Agent::load(&medium_dir).map_err(|e| e.in_stage("load medium"))?;
        let mut env = maze.clone();
        let info = |agent: &Agent, dir: &Path, env: &mut Maze| -> Result<PolicyInfo> {
            let (mean_return, std_error) = eval::rollout_return(env, agent, episodes, eval_seed)?;
            let env_steps = fs::read(dir.join(POLICY_INFO))
                .ok()
                .and_then(|b| serde_json::from_slice::<PolicyInfo>(&b).ok())
                .map_or(0, |p| p.env_steps);
            Ok(PolicyInfo {
                env_steps,
                mean_return,
                std_error,
            })
        };
        let ei = info(&expert, &expert_dir, &mut env).map_err(|e| e.in_stage("evaluate expert"))?;
        let mi = info(&medium, &medium_dir, &mut env).map_err(|e| e.in_stage("evaluate medium"))?;
        (expert, medium, ei, mi)
    } else if config.online.no_train {
        return Err(Error::Missing {
            what: "expert checkpoint",
            path: expert_dir,
        }
        .in_stage("load expert"));
    } else {
        train_behaviour_policies(config, &maze, &expert_dir, &medium_dir, &dir).map_err(|e| e.in_stage("online training"))?
    };

    let random_anchor = random_policy_return(env_config, config.suite.random_anchor_episodes, eval_seed)
        .map_err(|e| e.in_stage("random anchor"))?;
    if expert_info.mean_return <= random_anchor {
        return Err(Error::precondition(format!(
            "expert return {:.2} does not beat the random policy ({random_anchor:.2})",
            expert_info.mean_return
        ))
        .in_stage("anchors"));
    }

    let id = env_id(env_config);
    let n = config.suite.transitions;
    let eps = config.suite.collect_epsilon;
    let base = config.suite.seed;
    let mut env = maze.clone();
    let collect_stage = |e: Error| e.in_stage("collect");
    let expert_seed = sub_seed(base, 1);
    let medium_seed = sub_seed(base, 2);
    let random_seed = sub_seed(base, 3);
    let expert_data = data::collect(&mut env, &expert, n, eps, expert_seed, &id, SourceTag::Expert).map_err(collect_stage)?;
    let medium_data = data::collect(&mut env, &medium, n, eps, medium_seed, &id, SourceTag::Medium).map_err(collect_stage)?;
    let random_data =
        data::collect(&mut env, &uniform_only, n, 1.0, random_seed, &id, SourceTag::Random).map_err(collect_stage)?;

    let mix_stage = |e: Error| e.in_stage("mix");
    let me_seed = sub_seed(base, 4);
    let rme_seed = sub_seed(base, 5);
    let medium_expert = data::mix(&[(&medium_data, 0.5), (&expert_data, 0.5)], n, me_seed).map_err(mix_stage)?;
    let rme = data::mix(&[(&random_data, 0.45), (&medium_data, 0.45), (&expert_data, 0.1)], n, rme_seed)
        .map_err(mix_stage)?;

    let save_stage = |e: Error| e.in_stage("write datasets");
    let datasets = vec![
        save_dataset(&expert_data, &dir, "expert", "expert.frldat", expert_seed).map_err(save_stage)?,
        save_dataset(&medium_data, &dir, "medium", "medium.frldat", medium_seed).map_err(save_stage)?,
        save_dataset(&medium_expert, &dir, "medium-expert", "medium-expert.frldat", me_seed).map_err(save_stage)?,
        save_dataset(&rme, &dir, "random-medium-expert", "random-medium-expert.frldat", rme_seed).map_err(save_stage)?,
        save_dataset(&random_data, &dir, "random", "sources/random.frldat", random_seed).map_err(save_stage)?,
    ];

    let manifest = SuiteManifest {
        env_id: id,
        env: env_config.clone(),
        random_anchor,
        expert_anchor: expert_info.mean_return,
        expert: expert_info,
        medium: medium_info,
        online_seed: config.online.seed,
        suite_seed: base,
        collect_epsilon: eps,
        datasets,
    };
    write_json(&dir.join(SUITE_MANIFEST), &manifest).map_err(|e| e.in_stage("write manifest"))?;
    log::info!(
        "suite written to {}: random {:.2}, medium {:.2}, expert {:.2}",
        dir.display(),
        manifest.random_anchor,
        manifest.medium.mean_return,
        manifest.expert_anchor
    );
    Ok(manifest)
}

/// Online DecQN with evaluation snapshots. The expert is the snapshot with
/// the best evaluation; the medium policy is the first snapshot whose
/// evaluation reaches `medium_fraction` of the expert's return.
fn train_behaviour_policies(
    config: &RunConfig,
    maze: &Maze,
    expert_dir: &Path,
    medium_dir: &Path,
    suite: &Path,
) -> Result<(Agent, Agent, PolicyInfo, PolicyInfo)> {
    let online = &config.online;
    let outcome = agents::train_online(maze, &online.agent, online.seed, &online.options())?;
    let mut env = maze.clone();
    let mut scored = Vec::with_capacity(outcome.snapshots.len());
    for snap in &outcome.snapshots {
        let agent = outcome.agent.with_online_critics(&snap.critics)?;
        let (mean_return, std_error) =
            eval::rollout_return(&mut env, &agent, config.suite.snapshot_eval_episodes, config.eval.seed)?;
        scored.push((
            agent,
            PolicyInfo {
                env_steps: snap.env_steps,
                mean_return,
                std_error,
            },
        ));
    }
    let mut csv = fs::File::create(suite.join("online.csv"))?;
    writeln!(csv, "env_steps,train_eval_return,snapshot_return,snapshot_std_error")?;
    for ((steps, r, _), (_, info)) in outcome.evaluations.iter().zip(&scored) {
        writeln!(csv, "{steps},{r:?},{:?},{:?}", info.mean_return, info.std_error)?;
    }

    let best = scored
        .iter()
        .enumerate()
        .fold(None, |best: Option<usize>, (i, (_, info))| match best {
            Some(b) if scored[b].1.mean_return >= info.mean_return => Some(b),
            _ => Some(i),
        })
        .ok_or_else(|| Error::precondition("online training produced no snapshots"))?;
    let threshold = config.suite.medium_fraction * scored[best].1.mean_return;
    let medium = scored
        .iter()
        .position(|(_, info)| info.mean_return >= threshold)
        .expect("the expert itself crosses the threshold");
    if medium == best {
        log::warn!("no snapshot between the medium threshold and the expert; medium equals expert");
    }
    let (expert_agent, expert_info) = scored[best].clone();
    let (medium_agent, medium_info) = scored[medium].clone();
    expert_agent.save(expert_dir, &[])?;
    medium_agent.save(medium_dir, &[])?;
    write_json(&expert_dir.join(POLICY_INFO), &expert_info)?;
    write_json(&medium_dir.join(POLICY_INFO), &medium_info)?;
    Ok((expert_agent, medium_agent, expert_info, medium_info))
}

/// Standalone mixing of existing dataset files.
pub fn cmd_mix(config: &RunConfig, out: &Path) -> Result<Dataset> {
    config.validate()?;
    let m = &config.mix;
    let resolve = |p: &Path| if p.is_relative() { out.join(p) } else { p.to_owned() };
    let sources = m
        .parts
        .iter()
        .map(|p| Dataset::load(&resolve(&p.path)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("load sources"))?;
    let parts: Vec<(&Dataset, f64)> = sources.iter().zip(&m.parts).map(|(d, p)| (d, p.fraction)).collect();
    let mixed = data::mix(&parts, m.total, m.seed).map_err(|e| e.in_stage("mix"))?;
    let path = resolve(&m.output);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    mixed.save(&path).map_err(|e| e.in_stage("write"))?;
    Ok(mixed)
}

/// Hyperparameter values searched for each algorithm.
pub fn sweep_variants(base: &AgentConfig) -> Vec<(String, AgentConfig)> {
    const LAMBDAS: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0];
    let with = |label: String, f: &dyn Fn(&mut AgentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label, c)
    };
    let name = base.algorithm.name();
    match base.algorithm {
        Algorithm::Bcq => [0.025, 0.05, 0.1, 0.25, 0.5, 0.75]
            .iter()
            .map(|&t| with(format!("{name}-tau{t}"), &|c| c.bcq_tau = t))
            .collect(),
        Algorithm::Cql => [0.25, 0.5, 1.0, 2.0]
            .iter()
            .map(|&a| with(format!("{name}-alpha{a}"), &|c| c.cql_alpha = a))
            .collect(),
        Algorithm::Iql => [0.5, 0.6, 0.7, 0.8]
            .iter()
            .flat_map(|&t| LAMBDAS.iter().map(move |&l| (t, l)))
            .map(|(t, l)| {
                with(format!("{name}-tau{t}-lambda{l}"), &|c| {
                    c.iql_tau = t;
                    c.iql_lambda = l;
                })
            })
            .collect(),
        Algorithm::Onestep => LAMBDAS
            .iter()
            .map(|&l| with(format!("{name}-lambda{l}"), &|c| c.onestep_lambda = l))
            .collect(),
        _ => vec![(name.to_owned(), base.clone())],
    }
}

/// One `(variant, dataset, seed)` training job.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub dataset: String,
    pub seed: u64,
    pub agent: AgentConfig,
}

impl Cell {
    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join("train").join(&self.label).join(&self.dataset).join(format!("seed{}", self.seed))
    }
}

pub fn grid_cells(config: &RunConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &alg in &config.train.algorithms {
        let base = AgentConfig {
            algorithm: alg,
            ..config.agent.clone()
        };
        let variants = if config.train.sweep {
            sweep_variants(&base)
        } else {
            vec![(alg.name().to_owned(), base)]
        };
        for (label, agent) in variants {
            for dataset in &config.train.datasets {
                for &seed in &config.train.seeds {
                    cells.push(Cell {
                        label: label.clone(),
                        dataset: dataset.clone(),
                        seed,
                        agent: agent.clone(),
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub dataset: String,
    pub seed: u64,
    pub report: EvalReport,
    /// Absent for agents without a critic.
    pub q_error: Option<f64>,
}

/// Trains and evaluates every grid cell. Cells already completed are
/// reloaded from their checkpoints and re-evaluated.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<Vec<CellResult>> {
    config.validate()?;
    let suite = suite_dir(config, out);
    let manifest = SuiteManifest::load(&suite).map_err(|e| e.in_stage("load suite"))?;
    let mut datasets = BTreeMap::new();
    for name in &config.train.datasets {
        let entry = manifest.dataset(name).ok_or_else(|| {
            Error::Missing {
                what: "dataset tier",
                path: suite.join(format!("{name}.frldat")),
            }
            .in_stage("load suite")
        })?;
        let ds = Dataset::load(&suite.join(&entry.file)).map_err(|e| e.in_stage("load suite"))?;
        datasets.insert(name.clone(), Arc::new(ds));
    }
    let cells = grid_cells(config);
    let run = || {
        cells
            .par_iter()
            .map(|cell| run_cell(config, &manifest, &datasets[&cell.dataset], cell, out))
            .collect::<Result<Vec<_>>>()
    };
    if config.train.threads == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.train.threads)
            .build()
            .map_err(|e| Error::config(e.to_string()))?
            .install(run)
    }
}

/// Trains one cell with checkpoints in `<cell>/checkpoint` and evaluates it.
pub fn run_cell(config: &RunConfig, manifest: &SuiteManifest, dataset: &Dataset, cell: &Cell, out: &Path) -> Result<CellResult> {
    let dir = cell.dir(out);
    let mut frozen = config.clone();
    frozen.agent = cell.agent.clone();
    frozen.train.algorithms = vec![cell.agent.algorithm];
    frozen.train.datasets = vec![cell.dataset.clone()];
    frozen.train.seeds = vec![cell.seed];
    frozen.train.sweep = false;
    frozen.freeze(&dir)?;
    let stage = |e: Error| e.in_stage("train");

    let mut progress_env = Maze::new(manifest.env.clone())?;
    let mut trace = QErrorTrace::default();
    let eval_cfg = &config.eval;
    let progress = config.train.progress_episodes;
    let track = config.train.track_q_error;
    let mut hook = |agent: &Agent| -> Result<f64> {
        if track {
            let q = eval::mc_q_error(
                &mut progress_env,
                agent,
                agent.config().gamma,
                eval_cfg.q_error_rollouts,
                eval_cfg.q_error_horizon,
                eval_cfg.seed,
            )?;
            trace.push(agent.updates(), q)?;
        }
        if progress == 0 {
            return Ok(f64::NAN);
        }
        let (mean, _) = eval::rollout_return(&mut progress_env, agent, progress, eval_cfg.seed)?;
        eval::normalized_score(mean, manifest.random_anchor, manifest.expert_anchor)
    };
    let hooks = TrainHooks {
        checkpoint_dir: Some(&dir.join("checkpoint")),
        evaluate: (progress > 0 || track).then_some(&mut hook as &mut dyn FnMut(&Agent) -> Result<f64>),
    };
    let outcome = agents::train_offline(dataset, &cell.agent, cell.seed, hooks).map_err(stage)?;
    let agent = outcome.agent;

    let mut env = Maze::new(manifest.env.clone())?;
    let returns = eval::episode_returns(&mut env, &agent, config.train.eval_episodes, eval_cfg.seed)
        .map_err(|e| e.in_stage("evaluate"))?;
    let report = EvalReport::new(&returns, manifest.random_anchor, manifest.expert_anchor, eval_cfg.seed)?;
    report.write_csv(fs::File::create(dir.join("eval.csv"))?)?;

    let q_error = if agent.config().algorithm.trains_critics() {
        let q = eval::mc_q_error(
            &mut env,
            &agent,
            agent.config().gamma,
            eval_cfg.q_error_rollouts,
            eval_cfg.q_error_horizon,
            eval_cfg.seed,
        )
        .map_err(|e| e.in_stage("q error"))?;
        Some(q)
    } else {
        None
    };
    if let Some(q) = q_error {
        if trace.points().last().map(|p| p.0) != Some(agent.updates()) {
            trace.push(agent.updates(), q)?;
        }
    }
    trace.write_csv(fs::File::create(dir.join("qerror.csv"))?)?;
    log::info!("{} {} seed {}: {}", cell.label, cell.dataset, cell.seed, report.summary());
    Ok(CellResult {
        label: cell.label.clone(),
        dataset: cell.dataset.clone(),
        seed: cell.seed,
        report,
        q_error,
    })
}

/// Evaluates the checkpoint named in `eval.checkpoint` against the suite
/// anchors and writes `eval.csv` beside it.
pub fn cmd_eval(config: &RunConfig, out: &Path) -> Result<(EvalReport, f64)> {
    config.validate()?;
    let ckpt = config
        .eval
        .checkpoint
        .clone()
        .ok_or_else(|| Error::config("eval.checkpoint is not set"))?;
    let ckpt = if ckpt.is_relative() { out.join(ckpt) } else { ckpt };
    let manifest = SuiteManifest::load(&suite_dir(config, out))?;
    let (agent, _) = Agent::load(&ckpt)?;
    let mut env = Maze::new(manifest.env.clone())?;
    if env.action_spec() != *agent.spec() {
        return Err(Error::config("checkpoint was trained for a different action space"));
    }
    let e = &config.eval;
    let returns = eval::episode_returns(&mut env, &agent, e.episodes, e.seed)?;
    let report = EvalReport::new(&returns, manifest.random_anchor, manifest.expert_anchor, e.seed)?;
    let q = eval::mc_q_error(&mut env, &agent, agent.config().gamma, e.q_error_rollouts, e.q_error_horizon, e.seed)?;
    report.write_csv(fs::File::create(ckpt.join("eval.csv"))?)?;
    Ok((report, q))
}

/// Runs both simulators for every configured space and writes one CSV each.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let s = &config.simulate;
    let dir = out.join("simulate");
    config.freeze(&dir)?;
    let mut written = Vec::new();
    for space in &s.spaces {
        let sim = NoiseSimConfig {
            spec: ActionSpec::uniform(space.dims, space.sub_actions)?,
            b: s.b,
            k: s.k,
            gamma: s.gamma,
            inner_reps: s.inner_reps,
            outer_reps: s.outer_reps,
            seed: s.seed,
        };
        let dqn = bias_sim::simulate_dqn(&sim)?;
        let dec = bias_sim::simulate_decqn(&sim)?;
        let path = dir.join(format!("sim_N{}_n{}.csv", space.dims, space.sub_actions));
        bias_sim::write_csv(fs::File::create(&path)?, &dqn, &dec)?;
        written.push(path);
    }
    Ok(written)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub label: String,
    pub dataset: String,
    pub scores: Vec<f64>,
    pub expected_seeds: Option<usize>,
}

impl ReportCell {
    pub fn mean_se(&self) -> Option<(f64, f64)> {
        (!self.scores.is_empty()).then(|| eval::mean_and_se(&self.scores))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub labels: Vec<String>,
    pub datasets: Vec<String>,
    pub cells: Vec<ReportCell>,
}

impl Report {
    pub fn cell(&self, label: &str, dataset: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.label == label && c.dataset == dataset)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "algorithm,dataset,seeds,mean,std_error")?;
        for c in &self.cells {
            match c.mean_se() {
                Some((m, se)) => writeln!(out, "{},{},{},{m:?},{se:?}", c.label, c.dataset, c.scores.len())?,
                None => writeln!(out, "{},{},0,,", c.label, c.dataset)?,
            }
        }
        Ok(())
    }

    /// Algorithm rows by dataset columns, `mean ± se`; cells short of seeds
    /// are flagged and absent cells read `missing`.
    pub fn to_text(&self) -> String {
        let mut rows = vec![std::iter::once("algorithm".to_owned()).chain(self.datasets.iter().cloned()).collect::<Vec<_>>()];
        for label in &self.labels {
            let mut row = vec![label.clone()];
            for d in &self.datasets {
                let text = match self.cell(label, d) {
                    Some(c) => match c.mean_se() {
                        None => "missing".to_owned(),
                        Some((m, se)) => {
                            let short = c.expected_seeds.is_some_and(|e| c.scores.len() < e);
                            let flag = if short {
                                format!(" ({}/{} seeds)", c.scores.len(), c.expected_seeds.unwrap_or(0))
                            } else {
                                String::new()
                            };
                            format!("{m:.1} ± {se:.1}{flag}")
                        }
                    },
                    None => "missing".to_owned(),
                };
                row.push(text);
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut text = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (s, &w))| {
                    let pad = w - s.chars().count();
                    if j == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            text.push_str(line.join("  ").trim_end());
            text.push('\n');
        }
        text
    }
}

/// Collects every `train/<label>/<dataset>/seed*/eval.csv` under
/// `results_dir`. With a configuration, rows and columns follow its
/// declaration order and every expected cell appears, found or not.
pub fn cmd_report(results_dir: &Path, config: Option<&RunConfig>) -> Result<Report> {
    let mut found: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    let train = results_dir.join("train");
    if !train.is_dir() {
        return Err(Error::Missing {
            what: "training results",
            path: train,
        });
    }
    for label in read_dirs(&train)? {
        for dataset in read_dirs(&train.join(&label))? {
            for seed_dir in read_dirs(&train.join(&label).join(&dataset))? {
                let Some(seed) = seed_dir.strip_prefix("seed").and_then(|s| s.parse::<u64>().ok()) else {
                    continue;
                };
                let path = train.join(&label).join(&dataset).join(&seed_dir).join("eval.csv");
                if !path.exists() {
                    continue;
                }
                let report = EvalReport::parse_csv(&fs::read_to_string(&path)?)?;
                found.entry((label.clone(), dataset.clone())).or_default().push((seed, report.normalized_score));
            }
        }
    }

    let (labels, datasets, expected) = match config {
        Some(c) => {
            let mut labels = Vec::new();
            for cell in grid_cells(c) {
                if !labels.contains(&cell.label) {
                    labels.push(cell.label);
                }
            }
            (labels, c.train.datasets.clone(), Some(c.train.seeds.len()))
        }
        None => {
            let mut labels: Vec<String> = Vec::new();
            let mut datasets: Vec<String> = Vec::new();
            for (l, d) in found.keys() {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
                if !datasets.contains(d) {
                    datasets.push(d.clone());
                }
            }
            datasets.sort_by_key(|d| TIERS.iter().position(|t| t == d).unwrap_or(usize::MAX));
            (labels, datasets, None)
        }
    };
    let mut cells = Vec::new();
    for l in &labels {
        for d in &datasets {
            let mut seeds = found.remove(&(l.clone(), d.clone())).unwrap_or_default();
            if let Some(c) = config {
                seeds.retain(|(s, _)| c.train.seeds.contains(s));
            }
            seeds.sort_by_key(|(s, _)| *s);
            cells.push(ReportCell {
                label: l.clone(),
                dataset: d.clone(),
                scores: seeds.into_iter().map(|(_, v)| v).collect(),
                expected_seeds: expected,
            });
        }
    }
    let report = Report {
        labels,
        datasets,
        cells,
    };
    report.write_csv(fs::File::create(results_dir.join("report.csv"))?)?;
    fs::write(results_dir.join("report.txt"), report.to_text())?;
    Ok(report)
}

fn read_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

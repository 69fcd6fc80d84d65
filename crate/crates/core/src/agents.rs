//! Offline and online training of decomposed Q-learning agents.
//!
//! All algorithms share two utility critics whose target networks are
//! averaged to form a single bootstrap target. They differ in how that target
//! is built and what extra terms enter the losses:
//!
//! * `decqn`: plain `r + gamma * mean_i max U^i(s')`.
//! * `bcq`: the max only ranges over sub-actions the cloned behaviour policy
//!   rates at least `tau` times its most likely one.
//! * `cql`: the TD loss gains `alpha * mean_i [logsumexp U^i - U^i(a_i)]`.
//! * `iql`: an expectile-regressed state value bootstraps the target and the
//!   policy is extracted from advantages plus the cloned log-policy.
//! * `onestep`: the target is the expected utility under the cloned policy.
//! * `bc`: only the per-dimension softmax policy is trained.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, Batch, Dataset, Policy, Transition};
use crate::decomp::{self, ActionSpec, DecompMode, FactoredAction, UtilityValues};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::eval::{self, QEstimator};
use crate::nn::{self, adam_step, log_softmax, logsumexp, polyak, softmax, AdamState, Loss, Matrix, NetParams, TdBatch};
use crate::rng::{self, role, Rng, StreamState};

pub use crate::nn::expectile_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Decqn,
    Bcq,
    Cql,
    Iql,
    Onestep,
    Bc,
    OnlineDecqn,
}

impl Algorithm {
    pub const OFFLINE: [Algorithm; 6] = [
        Algorithm::Decqn,
        Algorithm::Bcq,
        Algorithm::Cql,
        Algorithm::Iql,
        Algorithm::Onestep,
        Algorithm::Bc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Decqn => "decqn",
            Algorithm::Bcq => "bcq",
            Algorithm::Cql => "cql",
            Algorithm::Iql => "iql",
            Algorithm::Onestep => "onestep",
            Algorithm::Bc => "bc",
            Algorithm::OnlineDecqn => "online-decqn",
        }
    }

    pub fn has_policy(self) -> bool {
        matches!(self, Algorithm::Bcq | Algorithm::Iql | Algorithm::Onestep | Algorithm::Bc)
    }

    pub fn has_value(self) -> bool {
        self == Algorithm::Iql
    }

    pub fn trains_critics(self) -> bool {
        self != Algorithm::Bc
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::OFFLINE
            .into_iter()
            .chain([Algorithm::OnlineDecqn])
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}`")))
    }
}

/// Training hyperparameters. Defaults are the 3-actuator maze settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub decomp: DecompMode,
    pub gamma: f64,
    /// Polyak rate `mu` for the target networks.
    pub target_update_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradient updates for offline training.
    pub updates: u64,
    pub dual_critic: bool,
    pub hidden_width: usize,
    pub huber_delta: f64,
    pub bcq_tau: f64,
    pub cql_alpha: f64,
    pub iql_tau: f64,
    pub iql_lambda: f64,
    pub onestep_lambda: f64,
    /// Per-dimension exploration rate for online training.
    pub epsilon: f64,
    pub metrics_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            algorithm: Algorithm::Decqn,
            decomp: DecompMode::Mean,
            gamma: 0.99,
            target_update_rate: 0.005,
            learning_rate: 3e-4,
            batch_size: 256,
            updates: 100_000,
            dual_critic: true,
            hidden_width: nn::DEFAULT_HIDDEN_WIDTH,
            huber_delta: 1.0,
            bcq_tau: 0.5,
            cql_alpha: 1.0,
            iql_tau: 0.5,
            iql_lambda: 20.0,
            onestep_lambda: 50.0,
            epsilon: 0.1,
            metrics_interval: 1000,
            checkpoint_interval: 25_000,
        }
    }
}

impl AgentConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        AgentConfig {
            algorithm,
            ..AgentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(msg.to_owned()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return fail("target_update_rate must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.updates == 0 || self.hidden_width == 0 {
            return fail("batch_size, updates and hidden_width must be at least 1");
        }
        if !(self.huber_delta > 0.0) {
            return fail("huber_delta must be positive");
        }
        if self.metrics_interval == 0 || self.checkpoint_interval == 0 {
            return fail("metrics and checkpoint intervals must be at least 1");
        }
        if self.checkpoint_interval % self.metrics_interval != 0 {
            return fail("checkpoint_interval must be a multiple of metrics_interval");
        }
        match self.algorithm {
            Algorithm::Bcq if !(0.0..=1.0).contains(&self.bcq_tau) => fail("bcq_tau must lie in [0, 1]"),
            Algorithm::Cql if !(self.cql_alpha >= 0.0 && self.cql_alpha.is_finite()) => {
                fail("cql_alpha must be non-negative")
            }
            Algorithm::Iql if !(self.iql_tau > 0.0 && self.iql_tau < 1.0) => fail("iql_tau must lie in (0, 1)"),
            Algorithm::Iql if !(self.iql_lambda > 0.0) => fail("iql_lambda must be positive"),
            Algorithm::Onestep if !(self.onestep_lambda > 0.0) => fail("onestep_lambda must be positive"),
            Algorithm::OnlineDecqn if !(0.0..=1.0).contains(&self.epsilon) => fail("epsilon must lie in [0, 1]"),
            _ => Ok(()),
        }
    }
}

/// Sub-actions whose probability relative to the most likely one is at
/// least `tau`. The most likely sub-action is always allowed.
pub fn bcq_allowed(probs: &[f64], tau: f64) -> Vec<bool> {
    let m = decomp::max(probs);
    probs.iter().map(|p| p / m >= tau).collect()
}

fn masked_max(values: &[f64], allowed: &[bool]) -> f64 {
    values
        .iter()
        .zip(allowed)
        .filter(|(_, &ok)| ok)
        .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v))
}

fn masked_argmax(values: &[f64], allowed: &[bool]) -> usize {
    let mut best = None;
    for (j, (&v, &ok)) in values.iter().zip(allowed).enumerate() {
        if ok && best.map_or(true, |b: usize| v > values[b]) {
            best = Some(j);
        }
    }
    best.unwrap_or(0)
}

/// `r + (gamma / N) sum_i max_{allowed a_i} U^i(s', a_i)`, or `r` when terminal.
pub fn bcq_target(
    reward: f64,
    next_utilities: &UtilityValues,
    next_probs: &[Vec<f64>],
    gamma: f64,
    tau: f64,
    terminal: bool,
) -> f64 {
    if terminal {
        return reward;
    }
    let total: f64 = next_utilities
        .iter()
        .zip(next_probs)
        .map(|(u, p)| masked_max(u, &bcq_allowed(p, tau)))
        .sum();
    reward + gamma * (1.0 / next_utilities.dims() as f64) * total
}

/// `(alpha / B) sum_b (1/N) sum_i [logsumexp U^i(s_b) - U^i(s_b, a_bi)]` for a
/// batch of flat utility rows and row-major `(B, N)` actions.
pub fn cql_penalty(spec: &ActionSpec, utilities: &Matrix, actions: &[usize], alpha: f64) -> Result<f64> {
    let n = spec.dims();
    if utilities.cols() != spec.total_outputs() || actions.len() != utilities.rows() * n {
        return Err(Error::Dimension {
            context: "cql batch",
            expected: spec.total_outputs(),
            got: utilities.cols(),
        });
    }
    if utilities.rows() == 0 {
        return Err(Error::precondition("empty batch"));
    }
    let offsets = spec.offsets();
    let mut total = 0.0;
    for (b, row) in utilities.iter_rows().enumerate() {
        let mut per_sample = 0.0;
        for (i, &size) in spec.sizes().iter().enumerate() {
            let u = &row[offsets[i]..offsets[i] + size];
            per_sample += logsumexp(u) - u[actions[b * n + i]];
        }
        total += per_sample / n as f64;
    }
    Ok(alpha * total / utilities.rows() as f64)
}

/// Per-dimension `argmax (1/lambda) A^i + log pi^i`; ties go to the lowest index.
pub fn iql_extract(advantages: &UtilityValues, log_pi: &[Vec<f64>], lambda: f64) -> FactoredAction {
    FactoredAction(
        advantages
            .iter()
            .zip(log_pi)
            .map(|(a, lp)| {
                let scores: Vec<f64> = a.iter().zip(lp).map(|(a, l)| a / lambda + l).collect();
                decomp::argmax(&scores)
            })
            .collect(),
    )
}

/// `(1/N) sum_i sum_j pi^i(j) U^i(j)`.
pub fn onestep_value(probs: &[Vec<f64>], utilities: &UtilityValues) -> f64 {
    let total: f64 = utilities
        .iter()
        .zip(probs)
        .map(|(u, p)| u.iter().zip(p).map(|(u, p)| u * p).sum::<f64>())
        .sum();
    total / utilities.dims() as f64
}

/// Mean over the batch of `(1/N) sum_i -log pi^i(a_i)`.
pub fn bc_loss(log_pi: &[Vec<Vec<f64>>], actions: &[FactoredAction]) -> f64 {
    let total: f64 = log_pi
        .iter()
        .zip(actions)
        .map(|(dims, a)| {
            let s: f64 = dims.iter().zip(a.indices()).map(|(lp, &j)| -lp[j]).sum();
            s / dims.len() as f64
        })
        .sum();
    total / log_pi.len() as f64
}

fn split_rows(spec: &ActionSpec, row: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut rest = row;
    spec.sizes()
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            f(head)
        })
        .collect()
}

/// Scalar Q readout factor; independent learners are read out as a mean.
fn readout_scale(mode: DecompMode, dims: usize) -> f64 {
    mode.scale(dims).unwrap_or(1.0 / dims as f64)
}

/// Affine input map `(x - shift) * scale` applied before every network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        InputNorm {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Maps the box `[low, high]` onto `[-1, 1]`.
    pub fn from_bounds(low: &[f64], high: &[f64]) -> Result<Self> {
        if low.len() != high.len() || low.iter().zip(high).any(|(l, h)| !(h > l)) {
            return Err(Error::precondition("observation bounds must satisfy low < high"));
        }
        Ok(InputNorm {
            shift: low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect(),
            scale: low.iter().zip(high).map(|(l, h)| 2.0 / (h - l)).collect(),
        })
    }

    /// Per-feature standardisation by the dataset's state mean and standard
    /// deviation; constant features are only centred.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let d = dataset.header().obs_dim;
        let n = dataset.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for t in dataset.transitions() {
            for (m, x) in mean.iter_mut().zip(&t.state) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for t in dataset.transitions() {
            for ((v, x), m) in var.iter_mut().zip(&t.state).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        InputNorm {
            shift: mean,
            scale: var.iter().map(|v| if v.sqrt() > 1e-6 { 1.0 / v.sqrt() } else { 1.0 }).collect(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) * s)
            .collect()
    }

    pub fn apply_matrix(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (x, (m, s)) in row.iter_mut().zip(self.shift.iter().zip(&self.scale)) {
                *x = (*x - m) * s;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub online: NetParams,
    pub target: NetParams,
    adam: AdamState,
}

#[derive(Debug, Clone)]
struct Trained {
    net: NetParams,
    adam: AdamState,
}

/// Losses of a single gradient update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub critic: Option<f64>,
    pub policy: Option<f64>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    spec: ActionSpec,
    obs_dim: usize,
    norm: InputNorm,
    critics: Vec<Critic>,
    policy: Option<Trained>,
    value: Option<Trained>,
    updates: u64,
    sampler: Rng,
}

impl Agent {
    pub fn new(config: &AgentConfig, spec: &ActionSpec, obs_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let width = config.hidden_width;
        let outputs = spec.total_outputs();
        let n_critics = if config.dual_critic { 2 } else { 1 };
        let critics = (0..n_critics)
            .map(|i| {
                let online = NetParams::mlp(obs_dim, width, outputs, &mut rng::stream(seed, role::CRITIC + i))?;
                Ok(Critic {
                    target: online.clone(),
                    adam: AdamState::new(&online),
                    online,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let trained = |out: usize, label: u64| -> Result<Trained> {
            let net = NetParams::mlp(obs_dim, width, out, &mut rng::stream(seed, label))?;
            Ok(Trained {
                adam: AdamState::new(&net),
                net,
            })
        };
        let policy = config
            .algorithm
            .has_policy()
            .then(|| trained(outputs, role::POLICY))
            .transpose()?;
        let value = config.algorithm.has_value().then(|| trained(1, role::VALUE)).transpose()?;
        Ok(Agent {
            config: config.clone(),
            spec: spec.clone(),
            obs_dim,
            norm: InputNorm::identity(obs_dim),
            critics,
            policy,
            value,
            updates: 0,
            sampler: rng::stream(seed, role::SAMPLER),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn spec(&self) -> &ActionSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) -> Result<()> {
        if norm.shift.len() != self.obs_dim || norm.scale.len() != self.obs_dim {
            return Err(Error::Dimension {
                context: "input normalisation",
                expected: self.obs_dim,
                got: norm.shift.len(),
            });
        }
        self.norm = norm;
        Ok(())
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn critics(&self) -> &[Critic] {
        &self.critics
    }

    pub fn critics_mut(&mut self) -> &mut [Critic] {
        &mut self.critics
    }

    pub fn policy_net(&self) -> Option<&NetParams> {
        self.policy.as_ref().map(|t| &t.net)
    }

    pub fn value_net(&self) -> Option<&NetParams> {
        self.value.as_ref().map(|t| &t.net)
    }

    /// Greedy copy acting on the given online critics (targets set equal).
    pub fn with_online_critics(&self, nets: &[NetParams]) -> Result<Agent> {
        if nets.len() != self.critics.len() || nets.iter().zip(&self.critics).any(|(n, c)| !n.same_shape(&c.online)) {
            return Err(Error::precondition("critic snapshot does not match agent"));
        }
        let mut agent = self.clone();
        for (c, n) in agent.critics.iter_mut().zip(nets) {
            c.online = n.clone();
            c.target = n.clone();
        }
        Ok(agent)
    }

    fn mean_prediction<'a>(nets: impl Iterator<Item = &'a NetParams>, inputs: &Matrix) -> Result<Matrix> {
        let mut sum: Option<Matrix> = None;
        let mut k = 0;
        for net in nets {
            let out = net.predict(inputs)?;
            k += 1;
            sum = Some(match sum {
                None => out,
                Some(mut acc) => {
                    for (a, o) in acc.as_mut_slice().iter_mut().zip(out.as_slice()) {
                        *a += o;
                    }
                    acc
                }
            });
        }
        let mut m = sum.ok_or_else(|| Error::precondition("agent has no critics"))?;
        if k > 1 {
            let inv = 1.0 / k as f64;
            m.as_mut_slice().iter_mut().for_each(|x| *x *= inv);
        }
        Ok(m)
    }

    /// Mean of the online critics' utility rows.
    pub fn online_utilities(&self, states: &Matrix) -> Result<Matrix> {
        Self::mean_prediction(self.critics.iter().map(|c| &c.online), &self.norm.apply_matrix(states))
    }

    /// Mean of the target critics' utility rows.
    pub fn target_utilities(&self, states: &Matrix) -> Result<Matrix> {
        Self::mean_prediction(self.critics.iter().map(|c| &c.target), &self.norm.apply_matrix(states))
    }

    pub fn utilities(&self, observation: &[f64]) -> Result<UtilityValues> {
        let m = self.online_utilities(&Matrix::from_vec(1, observation.len(), observation.to_vec()))?;
        UtilityValues::from_flat(&self.spec, m.row(0))
    }

    /// Per-dimension log-probabilities of the cloned behaviour policy.
    pub fn log_policy(&self, observation: &[f64]) -> Result<Option<Vec<Vec<f64>>>> {
        let Some(p) = &self.policy else { return Ok(None) };
        let logits = p.net.forward(&self.norm.apply(observation))?;
        Ok(Some(split_rows(&self.spec, &logits, log_softmax)))
    }

    pub fn state_value(&self, observation: &[f64]) -> Result<Option<f64>> {
        match &self.value {
            None => Ok(None),
            Some(v) => Ok(Some(v.net.forward(&self.norm.apply(observation))?[0])),
        }
    }

    /// The action the trained agent takes in `observation`.
    pub fn select_action(&self, observation: &[f64]) -> Result<FactoredAction> {
        let c = &self.config;
        let log_pi = self.log_policy(observation)?;
        if c.algorithm == Algorithm::Bc {
            let lp = log_pi.expect("behavioural cloning has a policy");
            return Ok(FactoredAction(lp.iter().map(|l| decomp::argmax(l)).collect()));
        }
        let u = self.utilities(observation)?;
        Ok(match (c.algorithm, log_pi) {
            (Algorithm::Bcq, Some(lp)) => FactoredAction(
                u.iter()
                    .zip(&lp)
                    .map(|(u, l)| {
                        let probs: Vec<f64> = l.iter().map(|x| x.exp()).collect();
                        masked_argmax(u, &bcq_allowed(&probs, c.bcq_tau))
                    })
                    .collect(),
            ),
            (Algorithm::Iql, Some(lp)) => {
                let v = self.state_value(observation)?.expect("iql has a value net");
                iql_extract(&shifted(&u, v), &lp, c.iql_lambda)
            }
            (Algorithm::Onestep, Some(lp)) => {
                let probs: Vec<Vec<f64>> = lp.iter().map(|l| l.iter().map(|x| x.exp()).collect()).collect();
                let v = onestep_value(&probs, &u);
                iql_extract(&shifted(&u, v), &lp, c.onestep_lambda)
            }
            _ => decomp::greedy_action(&u),
        })
    }

    /// Decomposed Q of `action` under the mean of the online critics.
    pub fn q(&self, observation: &[f64], action: &FactoredAction) -> Result<f64> {
        let u = self.utilities(observation)?;
        self.spec.validate(action)?;
        let total: f64 = u.iter().zip(action.indices()).map(|(u, &a)| u[a]).sum();
        Ok(readout_scale(self.config.decomp, self.spec.dims()) * total)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::precondition("empty batch"));
        }
        if batch.states.cols() != self.obs_dim || batch.actions.len() != batch.len() * self.spec.dims() {
            return Err(Error::Dimension {
                context: "training batch",
                expected: self.obs_dim,
                got: batch.states.cols(),
            });
        }
        Ok(())
    }

    /// Bootstrap targets: one per sample, or `(B, N)` for independent learners.
    pub fn td_targets(&self, batch: &Batch) -> Result<Vec<f64>> {
        let c = &self.config;
        let n = self.spec.dims();
        let mode = c.decomp;
        let gamma = c.gamma;

        if c.algorithm == Algorithm::Iql {
            let v = self
                .value
                .as_ref()
                .expect("iql has a value net")
                .net
                .predict(&self.norm.apply_matrix(&batch.next_states))?;
            let per = if mode == DecompMode::Independent { n } else { 1 };
            let mut out = Vec::with_capacity(batch.len() * per);
            for b in 0..batch.len() {
                let y = if batch.terminals[b] {
                    batch.rewards[b]
                } else {
                    batch.rewards[b] + gamma * v.get(b, 0)
                };
                out.extend(std::iter::repeat(y).take(per));
            }
            return Ok(out);
        }

        let next_u = self.target_utilities(&batch.next_states)?;
        let next_logits = match c.algorithm {
            Algorithm::Bcq | Algorithm::Onestep => {
                let p = self.policy.as_ref().expect("policy present");
                Some(p.net.predict(&self.norm.apply_matrix(&batch.next_states))?)
            }
            _ => None,
        };
        let mut out = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let u = UtilityValues::from_flat(&self.spec, next_u.row(b))?;
            let boot: Vec<f64> = match (&next_logits, c.algorithm) {
                (Some(l), Algorithm::Bcq) => {
                    let probs = split_rows(&self.spec, l.row(b), softmax);
                    u.iter()
                        .zip(&probs)
                        .map(|(u, p)| masked_max(u, &bcq_allowed(p, c.bcq_tau)))
                        .collect()
                }
                (Some(l), _) => {
                    let probs = split_rows(&self.spec, l.row(b), softmax);
                    u.iter()
                        .zip(&probs)
                        .map(|(u, p)| u.iter().zip(p).map(|(u, p)| u * p).sum())
                        .collect()
                }
                (None, _) => u.maxima(),
            };
            let (r, terminal) = (batch.rewards[b], batch.terminals[b]);
            match mode {
                DecompMode::Independent => {
                    out.extend(boot.iter().map(|m| if terminal { r } else { r + gamma * m }));
                }
                _ => {
                    let scale = mode.scale(n)?;
                    let total: f64 = boot.iter().sum();
                    out.push(if terminal { r } else { r + gamma * scale * total });
                }
            }
        }
        Ok(out)
    }

    /// One gradient step on every trained network.
    pub fn update(&mut self, batch: &Batch) -> Result<StepLosses> {
        self.check_batch(batch)?;
        let lr = self.config.learning_rate;
        let mut losses = StepLosses::default();
        let states = self.norm.apply_matrix(&batch.states);

        if let Some(p) = &mut self.policy {
            let loss = Loss::Nll {
                spec: &self.spec,
                actions: &batch.actions,
            };
            let (l, g) = p.net.backward(&states, &loss)?;
            adam_step(&mut p.net, &g, &mut p.adam, lr)?;
            losses.policy = Some(l);
        }

        if self.config.algorithm.trains_critics() {
            let targets = self.td_targets(batch)?;
            let td = TdBatch {
                spec: &self.spec,
                mode: self.config.decomp,
                actions: &batch.actions,
                targets: &targets,
            };
            let delta = self.config.huber_delta;
            let alpha = self.config.cql_alpha;
            let loss = if self.config.algorithm == Algorithm::Cql && alpha != 0.0 {
                Loss::CqlAugmented { delta, alpha, td }
            } else {
                Loss::Huber { delta, td }
            };
            let mut total = 0.0;
            for c in &mut self.critics {
                let (l, g) = c.online.backward(&states, &loss)?;
                adam_step(&mut c.online, &g, &mut c.adam, lr)?;
                total += l;
            }
            losses.critic = Some(total / self.critics.len() as f64);
            let mu = self.config.target_update_rate;
            for c in &mut self.critics {
                polyak(&mut c.target, &c.online, mu);
            }
        }

        if self.value.is_some() {
            let q = self.target_q(&batch.states, &batch.actions)?;
            let v = self.value.as_mut().expect("checked");
            let loss = Loss::Expectile {
                tau: self.config.iql_tau,
                targets: &q,
            };
            let (l, g) = v.net.backward(&states, &loss)?;
            adam_step(&mut v.net, &g, &mut v.adam, lr)?;
            losses.value = Some(l);
        }

        self.updates += 1;
        Ok(losses)
    }

    /// Decomposed Q of the batch actions under the mean target critic.
    fn target_q(&self, states: &Matrix, actions: &[usize]) -> Result<Vec<f64>> {
        let u = self.target_utilities(states)?;
        let n = self.spec.dims();
        let offsets = self.spec.offsets();
        let scale = readout_scale(self.config.decomp, n);
        Ok((0..states.rows())
            .map(|b| {
                let row = u.row(b);
                scale * (0..n).map(|i| row[offsets[i] + actions[b * n + i]]).sum::<f64>()
            })
            .collect())
    }

    pub fn max_abs_online(&self) -> f64 {
        self.critics.iter().map(|c| c.online.max_abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_target(&self) -> f64 {
        self.critics.iter().map(|c| c.target.max_abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.critics.iter().all(|c| c.online.is_finite() && c.target.is_finite())
            && self.policy.iter().chain(&self.value).all(|t| t.net.is_finite())
    }

    /// Writes one network file per role plus `agent.json`.
    pub fn save(&self, dir: &Path, metrics: &[MetricsRow]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut roles = Vec::new();
        for (i, c) in self.critics.iter().enumerate() {
            let online = format!("critic{i}.frlnet");
            let target = format!("critic{i}_target.frlnet");
            nn::checkpoint::save(&dir.join(&online), &c.online, Some(&c.adam))?;
            nn::checkpoint::save(&dir.join(&target), &c.target, None)?;
            roles.push(online);
            roles.push(target);
        }
        for (name, t) in [("policy.frlnet", &self.policy), ("value.frlnet", &self.value)] {
            if let Some(t) = t {
                nn::checkpoint::save(&dir.join(name), &t.net, Some(&t.adam))?;
                roles.push(name.to_owned());
            }
        }
        let manifest = AgentManifest {
            config: self.config.clone(),
            sizes: self.spec.sizes().to_vec(),
            obs_dim: self.obs_dim,
            input_norm: self.norm.clone(),
            updates: self.updates,
            sampler: rng::save_state(&self.sampler),
            roles,
            metrics: metrics.to_vec(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::config(e.to_string()))?;
        // write-then-rename so an interrupted save never leaves a torn manifest
        let tmp = dir.join("agent.json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Agent, Vec<MetricsRow>)> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::Missing {
                what: "agent checkpoint",
                path,
            });
        }
        let manifest: AgentManifest = serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::InvalidFile {
            format: "agent manifest",
            reason: e.to_string(),
        })?;
        let spec = ActionSpec::new(manifest.sizes.clone())?;
        let load_trained = |name: &str| -> Result<Trained> {
            let (net, adam) = nn::checkpoint::load(&dir.join(name))?;
            let adam = adam.ok_or_else(|| Error::InvalidFile {
                format: "FRLNET1",
                reason: format!("{name} lacks optimiser state"),
            })?;
            Ok(Trained { net, adam })
        };
        let n_critics = if manifest.config.dual_critic { 2 } else { 1 };
        let critics = (0..n_critics)
            .map(|i| {
                let t = load_trained(&format!("critic{i}.frlnet"))?;
                let (target, _) = nn::checkpoint::load(&dir.join(format!("critic{i}_target.frlnet")))?;
                Ok(Critic {
                    online: t.net,
                    target,
                    adam: t.adam,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let alg = manifest.config.algorithm;
        let policy = alg.has_policy().then(|| load_trained("policy.frlnet")).transpose()?;
        let value = alg.has_value().then(|| load_trained("value.frlnet")).transpose()?;
        let agent = Agent {
            config: manifest.config,
            spec,
            obs_dim: manifest.obs_dim,
            norm: manifest.input_norm,
            critics,
            policy,
            value,
            updates: manifest.updates,
            sampler: rng::restore_state(&manifest.sampler),
        };
        Ok((agent, manifest.metrics))
    }
}

fn shifted(u: &UtilityValues, v: f64) -> UtilityValues {
    UtilityValues::new(u.iter().map(|d| d.iter().map(|x| x - v).collect()).collect()).expect("same shape")
}

impl Policy for Agent {
    fn act(&self, observation: &[f64]) -> FactoredAction {
        self.select_action(observation)
            .expect("observation length matches the agent's input")
    }
}

impl QEstimator for Agent {
    fn q_value(&self, observation: &[f64], action: &FactoredAction) -> f64 {
        self.q(observation, action).expect("valid observation and action")
    }
}

pub const MANIFEST: &str = "agent.json";

#[derive(Debug, Serialize, Deserialize)]
struct AgentManifest {
    config: AgentConfig,
    sizes: Vec<usize>,
    obs_dim: usize,
    input_norm: InputNorm,
    updates: u64,
    sampler: StreamState,
    roles: Vec<String>,
    metrics: Vec<MetricsRow>,
}

/// Interval averages of the per-update losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: u64,
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub eval_score: Option<f64>,
}

pub fn write_metrics_csv<W: std::io::Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    let f = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    writeln!(out, "update,critic_loss,policy_loss,value_loss,eval_score")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.update,
            f(r.critic_loss),
            f(r.policy_loss),
            f(r.value_loss),
            f(r.eval_score)
        )?;
    }
    Ok(())
}

#[derive(Default)]
struct IntervalMeans {
    sums: [f64; 3],
    counts: [u64; 3],
}

impl IntervalMeans {
    fn add(&mut self, l: &StepLosses) {
        for (k, v) in [l.critic, l.policy, l.value].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[k] += v;
                self.counts[k] += 1;
            }
        }
    }

    fn take(&mut self, update: u64, eval_score: Option<f64>) -> MetricsRow {
        let mean = |k: usize| (self.counts[k] > 0).then(|| self.sums[k] / self.counts[k] as f64);
        let row = MetricsRow {
            update,
            critic_loss: mean(0),
            policy_loss: mean(1),
            value_loss: mean(2),
            eval_score,
        };
        *self = IntervalMeans::default();
        row
    }
}

/// Optional side effects of offline training.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Checkpoints go here; an existing checkpoint is resumed.
    pub checkpoint_dir: Option<&'a Path>,
    /// Scored at every metrics row.
    pub evaluate: Option<&'a mut dyn FnMut(&Agent) -> Result<f64>>,
}

pub struct TrainOutcome {
    pub agent: Agent,
    pub metrics: Vec<MetricsRow>,
}

/// Runs `config.updates` gradient updates on uniformly sampled minibatches.
pub fn train_offline(dataset: &Dataset, config: &AgentConfig, seed: u64, hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if config.algorithm == Algorithm::OnlineDecqn {
        return Err(Error::config("online-decqn cannot be trained offline"));
    }
    if dataset.is_empty() {
        return Err(Error::precondition("cannot train on an empty dataset"));
    }
    let TrainHooks {
        checkpoint_dir,
        mut evaluate,
    } = hooks;
    let resumed = match checkpoint_dir {
        Some(dir) if dir.join(MANIFEST).exists() => {
            let (agent, metrics) = Agent::load(dir)?;
            if &agent.config != config || agent.spec != *dataset.spec() {
                return Err(Error::config(format!(
                    "checkpoint in {} was made with a different configuration",
                    dir.display()
                )));
            }
            log::info!("resuming from update {}", agent.updates);
            Some((agent, metrics))
        }
        _ => None,
    };
    let (mut agent, mut metrics) = match resumed {
        Some(r) => r,
        None => {
            let mut agent = Agent::new(config, dataset.spec(), dataset.header().obs_dim, seed)?;
            agent.set_input_norm(InputNorm::from_dataset(dataset))?;
            (agent, Vec::new())
        }
    };

    let mut means = IntervalMeans::default();
    while agent.updates < config.updates {
        let idx = data::sample_indices(dataset, config.batch_size, &mut agent.sampler)?;
        let batch = Batch::from_dataset(dataset, &idx);
        let losses = agent.update(&batch).map_err(|e| {
            log::error!("{} update {} failed: {e}", config.algorithm, agent.updates + 1);
            e
        })?;
        means.add(&losses);
        let u = agent.updates;
        if u % config.metrics_interval == 0 || u == config.updates {
            let score = match evaluate.as_mut() {
                Some(f) => Some(f(&agent)?),
                None => None,
            };
            let row = means.take(u, score);
            log::debug!("{} update {u}: {row:?}", config.algorithm);
            metrics.push(row);
        }
        if let Some(dir) = checkpoint_dir {
            if u % config.checkpoint_interval == 0 || u == config.updates {
                agent.save(dir, &metrics)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &metrics)?;
    }
    Ok(TrainOutcome { agent, metrics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOptions {
    pub max_env_steps: u64,
    /// Greedy evaluation every this many environment steps.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Stop as soon as a greedy evaluation reaches this return.
    pub stop_return: Option<f64>,
    pub buffer_capacity: usize,
    /// Transitions gathered before the first update.
    pub learning_starts: usize,
    pub keep_snapshots: bool,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        OnlineOptions {
            max_env_steps: 100_000,
            eval_interval: 1000,
            eval_episodes: 20,
            eval_seed: 1 << 32,
            stop_return: None,
            buffer_capacity: 1_000_000,
            learning_starts: 256,
            keep_snapshots: false,
        }
    }
}

/// Online critics at an evaluation point.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub env_steps: u64,
    pub mean_return: f64,
    pub std_error: f64,
    pub critics: Vec<NetParams>,
}

pub struct OnlineOutcome {
    pub agent: Agent,
    pub env_steps: u64,
    /// `(env_steps, mean_return, std_error)` of each greedy evaluation.
    pub evaluations: Vec<(u64, f64, f64)>,
    pub snapshots: Vec<Snapshot>,
}

/// Online DecQN with a FIFO replay buffer and per-dimension epsilon-greedy
/// exploration; one gradient update per environment step.
pub fn train_online<E: Environment + Clone>(
    env: &E,
    config: &AgentConfig,
    seed: u64,
    options: &OnlineOptions,
) -> Result<OnlineOutcome> {
    if config.algorithm != Algorithm::OnlineDecqn {
        return Err(Error::config("online training needs algorithm = online-decqn"));
    }
    if options.eval_interval == 0 || options.eval_episodes == 0 || options.buffer_capacity == 0 {
        return Err(Error::config("eval_interval, eval_episodes and buffer_capacity must be at least 1"));
    }
    let spec = env.action_spec();
    let mut agent = Agent::new(config, &spec, env.observation_dim(), seed)?;
    let (low, high) = env.observation_bounds();
    agent.set_input_norm(InputNorm::from_bounds(&low, &high)?)?;
    let mut env = env.clone();
    let mut eval_env = env.clone();
    let mut explore = rng::stream(seed, role::EXPLORE);
    let episode_seed = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    let mut buffer: VecDeque<Transition> = VecDeque::with_capacity(options.buffer_capacity.min(1 << 20));
    let mut evaluations = Vec::new();
    let mut snapshots = Vec::new();

    let mut episode = 0;
    let mut obs = env.reset(episode_seed(episode));
    let mut steps = 0;
    while steps < options.max_env_steps {
        let action = data::epsilon_greedy(&agent, &obs, &spec, config.epsilon, &mut explore);
        let step = env.step(&action)?;
        if buffer.len() == options.buffer_capacity {
            buffer.pop_front();
        }
        buffer.push_back(Transition {
            state: std::mem::take(&mut obs),
            action,
            reward: step.reward,
            next_state: step.observation.clone(),
            terminal: step.terminal,
            origin: data::SourceTag::Mixed,
        });
        obs = step.observation;
        if step.done {
            episode += 1;
            obs = env.reset(episode_seed(episode));
        }
        steps += 1;

        if buffer.len() >= options.learning_starts.max(1) {
            let batch = Batch::gather(
                (0..config.batch_size).map(|_| {
                    use rand::Rng as _;
                    &buffer[agent.sampler.gen_range(0..buffer.len())]
                }),
                agent.obs_dim,
                spec.dims(),
            );
            agent.update(&batch)?;
        }

        if steps % options.eval_interval == 0 {
            let (mean, se) = eval::rollout_return(&mut eval_env, &agent, options.eval_episodes, options.eval_seed)?;
            log::debug!("online step {steps}: greedy return {mean:.2} ± {se:.2}");
            evaluations.push((steps, mean, se));
            if options.keep_snapshots {
                snapshots.push(Snapshot {
                    env_steps: steps,
                    mean_return: mean,
                    std_error: se,
                    critics: agent.critics.iter().map(|c| c.online.clone()).collect(),
                });
            }
            if options.stop_return.is_some_and(|s| mean >= s) {
                break;
            }
        }
    }
    Ok(OnlineOutcome {
        agent,
        env_steps: steps,
        evaluations,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetHeader, SourceTag, FORMAT_VERSION};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn utils(v: &[&[f64]]) -> UtilityValues {
        UtilityValues::new(v.iter().map(|d| d.to_vec()).collect()).unwrap()
    }

    #[test]
    fn bcq_mask_examples() {
        assert_eq!(bcq_allowed(&[0.6, 0.3, 0.1], 0.5), vec![true, true, false]);
        assert_eq!(bcq_allowed(&[0.6, 0.3, 0.1], 0.0), vec![true; 3]);
        assert_eq!(bcq_allowed(&[0.2, 0.7, 0.1], 1.0), vec![false, true, false]);
    }

    #[test]
    fn bcq_target_examples() {
        let u = utils(&[&[5.0, 10.0]]);
        assert_eq!(bcq_target(0.0, &u, &[vec![0.9, 0.1]], 1.0, 0.5, false), 5.0);
        assert_eq!(bcq_target(2.0, &u, &[vec![0.9, 0.1]], 1.0, 0.5, true), 2.0);

        let u = utils(&[&[1.0, 3.0, -2.0], &[0.5, 4.0]]);
        let probs = vec![vec![0.2, 0.3, 0.5], vec![0.9, 0.1]];
        let plain = decomp::decqn_target(1.0, &u, 0.9, DecompMode::Mean, false).unwrap();
        assert_eq!(bcq_target(1.0, &u, &probs, 0.9, 0.0, false), plain);
        // tau = 1 keeps only each dimension's most likely sub-action
        assert_abs_diff_eq!(
            bcq_target(1.0, &u, &probs, 0.9, 1.0, false),
            1.0 + 0.9 / 2.0 * (-2.0 + 0.5),
            epsilon = 1e-12
        );
    }

    #[test]
    fn cql_penalty_examples() {
        let spec = ActionSpec::uniform(1, 3).unwrap();
        let u = Matrix::from_rows(&[[2.0, 2.0, 2.0]]);
        assert_eq!(cql_penalty(&spec, &u, &[1], 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(cql_penalty(&spec, &u, &[1], 1.0).unwrap(), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(2.0, 0.0, 0.5), 2.0);
        assert_abs_diff_eq!(expectile_loss(-1.0, 0.0, 0.8), 0.2, epsilon = 1e-15);
        assert_eq!(expectile_loss(1.0, 0.0, 0.8), 0.8);
    }

    #[test]
    fn iql_extract_examples() {
        let a = utils(&[&[3.0, 1.0, 2.0]]);
        let lp = vec![vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]];
        assert_eq!(iql_extract(&a, &lp, 1e12).0, vec![1]);
        let uniform = vec![vec![(1.0f64 / 3.0).ln(); 3]];
        assert_eq!(iql_extract(&a, &uniform, 2.0).0, vec![0]);

        let a = utils(&[&[1.0, 0.0]]);
        let lp = vec![vec![0.1f64.ln(), 0.9f64.ln()]];
        assert!(!(1.0 + 0.1f64.ln() > 0.9f64.ln()));
        assert_eq!(iql_extract(&a, &lp, 1.0).0, vec![1]);
    }

    #[test]
    fn onestep_value_examples() {
        let u = utils(&[&[2.0, 4.0]]);
        assert_eq!(onestep_value(&[vec![0.5, 0.5]], &u), 3.0);
        let u = utils(&[&[2.0, 4.0], &[1.0, 7.0, 0.0]]);
        assert_eq!(onestep_value(&[vec![0.0, 1.0], vec![0.0, 0.0, 1.0]], &u), 2.0);
    }

    #[test]
    fn bc_loss_examples() {
        let ln = f64::ln;
        let uniform2 = vec![vec![vec![ln(0.5); 2]; 3]];
        assert_abs_diff_eq!(bc_loss(&uniform2, &[FactoredAction(vec![0, 1, 0])]), ln(2.0), epsilon = 1e-12);
        let mixed = vec![vec![vec![ln(0.5); 2], vec![ln(1.0 / 3.0); 3]]];
        assert_abs_diff_eq!(
            bc_loss(&mixed, &[FactoredAction(vec![1, 2])]),
            (ln(2.0) + ln(3.0)) / 2.0,
            epsilon = 1e-12
        );
        let onehot = vec![vec![log_softmax(&[50.0, -50.0])]];
        assert!(bc_loss(&onehot, &[FactoredAction(vec![0])]) < 1e-12);
    }

    fn toy_dataset(len: usize, seed: u64) -> Dataset {
        use rand::Rng as _;
        let spec = ActionSpec::new(vec![2, 3]).unwrap();
        let mut rng = rng::stream(seed, 99);
        let transitions = (0..len)
            .map(|_| {
                let s = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let a = FactoredAction(vec![rng.gen_range(0..2), rng.gen_range(0..3)]);
                let r = s[0] + if a.indices()[1] == 2 { 1.0 } else { 0.0 };
                Transition {
                    next_state: vec![s[1], -s[0]],
                    state: s,
                    action: a,
                    reward: r,
                    terminal: rng.gen_bool(0.1),
                    origin: SourceTag::Random,
                }
            })
            .collect();
        Dataset::new(
            DatasetHeader {
                version: FORMAT_VERSION,
                env_id: "toy".into(),
                spec,
                obs_dim: 2,
                source: SourceTag::Random,
                seed,
                recipe: Vec::new(),
            },
            transitions,
        )
        .unwrap()
    }

    fn small(algorithm: Algorithm, updates: u64) -> AgentConfig {
        AgentConfig {
            algorithm,
            updates,
            hidden_width: 16,
            batch_size: 32,
            metrics_interval: 10,
            checkpoint_interval: 20,
            ..AgentConfig::default()
        }
    }

    fn loss_trace(config: &AgentConfig, ds: &Dataset, seed: u64) -> Vec<f64> {
        let mut agent = Agent::new(config, ds.spec(), 2, seed).unwrap();
        let mut rng = rng::stream(seed, role::SAMPLER);
        (0..config.updates)
            .map(|_| {
                let idx = data::sample_indices(ds, config.batch_size, &mut rng).unwrap();
                agent.update(&Batch::from_dataset(ds, &idx)).unwrap().critic.unwrap()
            })
            .collect()
    }

    #[test]
    fn reductions_match_plain_decqn() {
        let ds = toy_dataset(200, 1);
        let plain = loss_trace(&small(Algorithm::Decqn, 50), &ds, 3);
        let cql = loss_trace(
            &AgentConfig {
                cql_alpha: 0.0,
                ..small(Algorithm::Cql, 50)
            },
            &ds,
            3,
        );
        let bcq = loss_trace(
            &AgentConfig {
                bcq_tau: 0.0,
                ..small(Algorithm::Bcq, 50)
            },
            &ds,
            3,
        );
        assert_eq!(plain, cql);
        assert_eq!(plain, bcq);
    }

    #[test]
    fn bc_leaves_critics_untouched() {
        let ds = toy_dataset(100, 2);
        let out = train_offline(&ds, &small(Algorithm::Bc, 30), 0, TrainHooks::default()).unwrap();
        let fresh = Agent::new(&small(Algorithm::Bc, 30), ds.spec(), 2, 0).unwrap();
        for (a, b) in out.agent.critics().iter().zip(fresh.critics()) {
            assert_eq!(a.online, b.online);
            assert_eq!(a.target, b.target);
        }
        assert!(out.metrics.iter().all(|m| m.critic_loss.is_none() && m.policy_loss.is_some()));
    }

    #[test]
    fn identical_critics_stay_identical() {
        let ds = toy_dataset(100, 4);
        let config = small(Algorithm::Cql, 25);
        let mut agent = Agent::new(&config, ds.spec(), 2, 7).unwrap();
        let first = agent.critics()[0].clone();
        agent.critics_mut()[1] = first;
        let mut rng = rng::stream(0, 0);
        for _ in 0..25 {
            let idx = data::sample_indices(&ds, 32, &mut rng).unwrap();
            agent.update(&Batch::from_dataset(&ds, &idx)).unwrap();
        }
        assert_eq!(agent.critics()[0].online, agent.critics()[1].online);
        assert_eq!(agent.critics()[0].target, agent.critics()[1].target);
    }

    #[test]
    fn params_stay_finite_and_targets_bounded() {
        let ds = toy_dataset(300, 5);
        for alg in Algorithm::OFFLINE {
            let config = small(alg, 60);
            let mut agent = Agent::new(&config, ds.spec(), 2, 1).unwrap();
            let mut running_max = agent.max_abs_online();
            let mut rng = rng::stream(1, 1);
            for _ in 0..60 {
                let idx = data::sample_indices(&ds, 32, &mut rng).unwrap();
                agent.update(&Batch::from_dataset(&ds, &idx)).unwrap();
                running_max = running_max.max(agent.max_abs_online());
                assert!(agent.is_finite(), "{alg}");
                assert!(agent.max_abs_target() <= running_max + 1e-12, "{alg}");
            }
        }
    }

    #[test]
    fn onestep_and_iql_targets_agree_with_exact_value() {
        // Replace IQL's learned V(s') by the one-step expectation and the
        // two targets coincide.
        let ds = toy_dataset(40, 6);
        let one = Agent::new(&small(Algorithm::Onestep, 1), ds.spec(), 2, 2).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let batch = Batch::from_dataset(&ds, &idx);
        let y = one.td_targets(&batch).unwrap();
        for (b, t) in ds.transitions().iter().enumerate() {
            let u = UtilityValues::from_flat(
                ds.spec(),
                one.target_utilities(&Matrix::from_rows(&[t.next_state.clone()])).unwrap().row(0),
            )
            .unwrap();
            let probs: Vec<Vec<f64>> = one
                .log_policy(&t.next_state)
                .unwrap()
                .unwrap()
                .iter()
                .map(|l| l.iter().map(|x| x.exp()).collect())
                .collect();
            let v = onestep_value(&probs, &u);
            let iql_y = if t.terminal { t.reward } else { t.reward + 0.99 * v };
            assert_abs_diff_eq!(y[b], iql_y, epsilon = 1e-10);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut ds = toy_dataset(50, 8);
        let mut transitions = ds.transitions().to_vec();
        for t in &mut transitions {
            t.reward = f64::NAN;
        }
        ds = Dataset::new(ds.header().clone(), transitions).unwrap();
        let err = train_offline(&ds, &small(Algorithm::Decqn, 5), 0, TrainHooks::default()).err().unwrap();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let ds = toy_dataset(120, 9);
        let config = small(Algorithm::Iql, 40);
        let full = train_offline(&ds, &config, 5, TrainHooks::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let partial = AgentConfig { updates: 20, ..config.clone() };
        train_offline(&ds, &partial, 5, TrainHooks { checkpoint_dir: Some(dir.path()), evaluate: None }).unwrap();
        // pretend the run was interrupted after its checkpoint at update 20
        let manifest = dir.path().join(MANIFEST);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
        m["config"]["updates"] = 40.into();
        fs::write(&manifest, serde_json::to_vec(&m).unwrap()).unwrap();

        let resumed = train_offline(&ds, &config, 5, TrainHooks { checkpoint_dir: Some(dir.path()), evaluate: None }).unwrap();
        assert_eq!(resumed.metrics, full.metrics);
        assert_eq!(resumed.agent.critics()[0].online, full.agent.critics()[0].online);
        assert_eq!(resumed.agent.value_net(), full.agent.value_net());
        assert!(dir.path().join("metrics.csv").exists());
    }

    #[test]
    fn resume_rejects_other_config() {
        let ds = toy_dataset(60, 10);
        let dir = tempfile::tempdir().unwrap();
        let config = small(Algorithm::Decqn, 20);
        train_offline(&ds, &config, 0, TrainHooks { checkpoint_dir: Some(dir.path()), evaluate: None }).unwrap();
        let other = AgentConfig { gamma: 0.5, ..config };
        assert!(train_offline(&ds, &other, 0, TrainHooks { checkpoint_dir: Some(dir.path()), evaluate: None }).is_err());
    }

    #[test]
    fn evaluation_hook_fills_scores() {
        let ds = toy_dataset(60, 11);
        let mut calls = 0;
        let mut f = |_: &Agent| -> Result<f64> {
            calls += 1;
            Ok(1.5)
        };
        let out = train_offline(
            &ds,
            &small(Algorithm::Decqn, 30),
            0,
            TrainHooks {
                checkpoint_dir: None,
                evaluate: Some(&mut f),
            },
        )
        .unwrap();
        assert_eq!(calls, 3);
        assert!(out.metrics.iter().all(|m| m.eval_score == Some(1.5)));
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        let bad = AgentConfig { gamma: 1.5, ..AgentConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = AgentConfig {
            algorithm: Algorithm::Iql,
            iql_tau: 1.0,
            ..AgentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AgentConfig { target_update_rate: 0.0, ..AgentConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!("onestep".parse::<Algorithm>().unwrap(), Algorithm::Onestep);
        assert!("sac".parse::<Algorithm>().is_err());
    }

    #[test]
    fn independent_mode_trains() {
        let ds = toy_dataset(80, 12);
        let config = AgentConfig {
            decomp: DecompMode::Independent,
            ..small(Algorithm::Cql, 20)
        };
        let out = train_offline(&ds, &config, 0, TrainHooks::default()).unwrap();
        assert!(out.agent.is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn onestep_matches_atomic_enumeration(
            sizes in proptest::collection::vec(1usize..5, 1..5),
            seed in any::<u64>(),
        ) {
            use rand::Rng as _;
            let spec = ActionSpec::new(sizes.clone()).unwrap();
            let mut rng = rng::stream(seed, 0);
            let u = UtilityValues::new(sizes.iter().map(|&n| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect()).unwrap();
            let probs: Vec<Vec<f64>> = sizes.iter().map(|&n| softmax(&(0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>())).collect();
            let brute: f64 = spec.atomic_actions().map(|a| {
                let p: f64 = a.indices().iter().zip(&probs).map(|(&j, p)| p[j]).product();
                p * decomp::q_value(&u, &a, DecompMode::Mean).unwrap()
            }).sum();
            prop_assert!((onestep_value(&probs, &u) - brute).abs() <= 1e-10);
        }

        #[test]
        fn bcq_argmax_always_allowed(probs in proptest::collection::vec(0.01f64..1.0, 1..8), tau in 0.0f64..=1.0) {
            let mask = bcq_allowed(&probs, tau);
            prop_assert!(mask[decomp::argmax(&probs)]);
        }
    }
}

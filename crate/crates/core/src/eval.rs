//! Greedy rollouts, normalised scores and the Monte-Carlo Q-error diagnostic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Policy;
use crate::decomp::FactoredAction;
use crate::env::Environment;
use crate::error::{Error, Result};

/// Anything that can score a state-action pair.
pub trait QEstimator: Policy {
    fn q_value(&self, observation: &[f64], action: &FactoredAction) -> f64;
}

/// Compensated sum.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Sample mean and standard error `sd / sqrt(n)` (sample sd, zero when n = 1).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = kahan_sum(xs.iter().copied()) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = kahan_sum(xs.iter().map(|x| (x - mean) * (x - mean)));
    (mean, (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt())
}

/// Undiscounted returns of `episodes` episodes; episode `k` is reset with
/// `seed + k`.
pub fn episode_returns<E, P>(env: &mut E, policy: &P, episodes: usize, seed: u64) -> Result<Vec<f64>>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    if episodes == 0 {
        return Err(Error::precondition("episodes must be at least 1"));
    }
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut obs = env.reset(seed.wrapping_add(k as u64));
        let mut rewards = Vec::new();
        loop {
            let step = env.step(&policy.act(&obs))?;
            rewards.push(step.reward);
            if step.done {
                break;
            }
            obs = step.observation;
        }
        returns.push(kahan_sum(rewards));
    }
    Ok(returns)
}

/// Mean and standard error of the policy's episode returns.
pub fn rollout_return<E, P>(env: &mut E, policy: &P, episodes: usize, seed: u64) -> Result<(f64, f64)>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    Ok(mean_and_se(&episode_returns(env, policy, episodes, seed)?))
}

/// `100 (score - random) / (expert - random)`.
pub fn normalized_score(score: f64, random_anchor: f64, expert_anchor: f64) -> Result<f64> {
    if expert_anchor == random_anchor {
        return Err(Error::precondition("expert and random anchors are equal"));
    }
    Ok(100.0 * (score - random_anchor) / (expert_anchor - random_anchor))
}

/// Mean |Q(s_t, a_t) - G_t| over the first `horizon` steps of `rollouts`
/// episodes, where `G_t` is the discounted sum of the rewards observed from
/// `t` to the end of the episode.
///
/// The tail ignored by stopping at episode end is zero; the part lost when
/// the episode outlives `horizon` only affects states beyond it.
pub fn mc_q_error<E, Q>(env: &mut E, agent: &Q, gamma: f64, rollouts: usize, horizon: usize, seed: u64) -> Result<f64>
where
    E: Environment + ?Sized,
    Q: QEstimator + ?Sized,
{
    if rollouts == 0 || horizon == 0 {
        return Err(Error::precondition("rollouts and horizon must be at least 1"));
    }
    let mut errors = Vec::new();
    for k in 0..rollouts {
        let mut obs = env.reset(seed.wrapping_add(k as u64));
        let mut predicted = Vec::new();
        let mut rewards = Vec::new();
        loop {
            let action = agent.act(&obs);
            if predicted.len() < horizon {
                predicted.push(agent.q_value(&obs, &action));
            }
            let step = env.step(&action)?;
            rewards.push(step.reward);
            if step.done {
                break;
            }
            obs = step.observation;
        }
        let mut g = 0.0;
        let mut mc = vec![0.0; rewards.len()];
        for t in (0..rewards.len()).rev() {
            g = rewards[t] + gamma * g;
            mc[t] = g;
        }
        errors.extend(predicted.iter().zip(&mc).map(|(q, g)| (q - g).abs()));
    }
    Ok(kahan_sum(errors.iter().copied()) / errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_error: f64,
    pub normalized_score: f64,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(returns: &[f64], random_anchor: f64, expert_anchor: f64, seed: u64) -> Result<Self> {
        let (mean_return, std_error) = mean_and_se(returns);
        Ok(EvalReport {
            episodes: returns.len(),
            mean_return,
            std_error,
            normalized_score: normalized_score(mean_return, random_anchor, expert_anchor)?,
            seed,
        })
    }

    pub const CSV_HEADER: &'static str = "episodes,mean_return,std_error,normalized_score,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{}",
            self.episodes, self.mean_return, self.std_error, self.normalized_score, self.seed
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(out, "{}", self.csv_row())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidFile {
            format: "eval csv",
            reason: reason.to_owned(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(bad("unexpected header"));
        }
        let row = lines.next().ok_or_else(|| bad("missing row"))?;
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("malformed number"));
        Ok(EvalReport {
            episodes: f[0].parse().map_err(|_| bad("malformed episodes"))?,
            mean_return: num(f[1])?,
            std_error: num(f[2])?,
            normalized_score: num(f[3])?,
            seed: f[4].parse().map_err(|_| bad("malformed seed"))?,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "return {:.2} ± {:.2} over {} episodes, normalised {:.1}",
            self.mean_return, self.std_error, self.episodes, self.normalized_score
        )
    }
}

/// Q-error samples over the course of training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QErrorTrace {
    points: Vec<(u64, f64)>,
}

impl QErrorTrace {
    pub fn push(&mut self, update: u64, mean_abs_error: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if update <= last {
                return Err(Error::precondition("update counts must be strictly increasing"));
            }
        }
        self.points.push((update, mean_abs_error));
        Ok(())
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "update,mean_abs_error")?;
        for (u, e) in &self.points {
            writeln!(out, "{u},{e:?}")?;
        }
        Ok(())
    }
}

//! Overestimation of the bootstrapped target when utility errors are
//! uniform: narrow for in-distribution actions, `k` times wider otherwise.
//!
//! `Z` is the gap between the maximum of the noisy estimates and the true
//! maximum (all true values are equal), scaled by `gamma`.

use std::io::Write;

use rand::distributions::{Distribution, Uniform};
use rand::seq::index;
use rayon::prelude::*;

use crate::decomp::ActionSpec;
use crate::error::{Error, Result};
use crate::rng::{self, role};

/// `E[Z]` for the max of `card` independent `U(-b, b)` errors.
pub fn closed_form_mean(card: usize, b: f64, gamma: f64) -> f64 {
    let a = card as f64;
    gamma * b * (a - 1.0) / (a + 1.0)
}

/// `Var(Z)` for the same maximum. `gamma` enters linearly.
pub fn closed_form_var(card: usize, b: f64, gamma: f64) -> f64 {
    let a = card as f64;
    gamma * 4.0 * b * b * a / ((a + 1.0) * (a + 1.0) * (a + 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSimConfig {
    pub spec: ActionSpec,
    pub b: f64,
    pub k: f64,
    pub gamma: f64,
    pub inner_reps: usize,
    pub outer_reps: usize,
    pub seed: u64,
}

impl NoiseSimConfig {
    pub fn new(spec: ActionSpec) -> Self {
        NoiseSimConfig {
            spec,
            b: 1.0,
            k: 2.0,
            gamma: 1.0,
            inner_reps: 10_000,
            outer_reps: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<usize> {
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::precondition("b must be positive"));
        }
        if !(self.k > 1.0 && self.k.is_finite()) {
            return Err(Error::precondition("k must exceed 1"));
        }
        if !self.gamma.is_finite() {
            return Err(Error::precondition("gamma must be finite"));
        }
        if self.inner_reps == 0 || self.outer_reps == 0 {
            return Err(Error::precondition("repetition counts must be at least 1"));
        }
        if self.outer_reps >= 1 << 24 {
            return Err(Error::precondition("outer_reps must be below 2^24"));
        }
        match self.spec.atomic_count() {
            Some(n) if n < 1 << 20 => Ok(n),
            _ => Err(Error::precondition("atomic action space too large to simulate")),
        }
    }
}

/// Moments of `Z` at one coverage level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimPoint {
    pub in_distribution: usize,
    pub samples: u64,
    pub mean: f64,
    pub variance: f64,
    /// Standard error of `mean`.
    pub std_error: f64,
    /// Standard error of `variance`, from the fourth central moment.
    pub var_std_error: f64,
}

/// One point per `|A^in|` in `0..=prod n_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCurve {
    pub points: Vec<SimPoint>,
}

impl SimCurve {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.variance).collect()
    }
}

/// Power sums, mergeable across cells.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    s: [f64; 4],
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let x2 = x * x;
        self.s[0] += x;
        self.s[1] += x2;
        self.s[2] += x2 * x;
        self.s[3] += x2 * x2;
    }

    fn merge(mut self, other: Moments) -> Moments {
        self.n += other.n;
        for (a, b) in self.s.iter_mut().zip(other.s) {
            *a += b;
        }
        self
    }

    fn point(&self, in_distribution: usize) -> SimPoint {
        let n = self.n as f64;
        let [r1, r2, r3, r4] = self.s.map(|s| s / n);
        let m2 = (r2 - r1 * r1).max(0.0);
        let m4 = (r4 - 4.0 * r1 * r3 + 6.0 * r1 * r1 * r2 - 3.0 * r1.powi(4)).max(0.0);
        let variance = if self.n > 1 { m2 * n / (n - 1.0) } else { 0.0 };
        SimPoint {
            in_distribution,
            samples: self.n,
            mean: r1,
            variance,
            std_error: (variance / n).sqrt(),
            var_std_error: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        }
    }
}

const DQN: u64 = 0;
const DECQN: u64 = 1;

fn cell_stream(seed: u64, estimator: u64, outer: usize, card: usize) -> rng::Rng {
    let label = (role::SIM << 48) | (estimator << 44) | ((outer as u64) << 20) | card as u64;
    rng::stream(seed, label)
}

/// Max of `inside` draws from `U(-b, b)` and `outside` draws from `U(-kb, kb)`.
fn pooled_max(inside: usize, outside: usize, narrow: &Uniform<f64>, wide: &Uniform<f64>, rng: &mut rng::Rng) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for _ in 0..inside {
        m = m.max(narrow.sample(rng));
    }
    for _ in 0..outside {
        m = m.max(wide.sample(rng));
    }
    m
}

/// Maximum over the joint action space: `|A^in|` narrow errors and the rest
/// wide, `inner_reps` draws per coverage level.
pub fn simulate_dqn(config: &NoiseSimConfig) -> Result<SimCurve> {
    let total = config.validate()?;
    let narrow = Uniform::new_inclusive(-config.b, config.b);
    let wide = Uniform::new_inclusive(-config.k * config.b, config.k * config.b);
    let points = (0..=total)
        .into_par_iter()
        .map(|card| {
            let mut rng = cell_stream(config.seed, DQN, 0, card);
            let mut m = Moments::default();
            for _ in 0..config.inner_reps {
                m.push(config.gamma * pooled_max(card, total - card, &narrow, &wide, &mut rng));
            }
            m.point(card)
        })
        .collect();
    Ok(SimCurve { points })
}

/// Mean of per-dimension maxima. Each outer repetition samples `|A^in|`
/// atomic actions without replacement; a sub-action counts as
/// in-distribution when any sampled atomic action uses it. Moments are
/// pooled over all outer and inner draws.
pub fn simulate_decqn(config: &NoiseSimConfig) -> Result<SimCurve> {
    let total = config.validate()?;
    let spec = &config.spec;
    let dims = spec.dims();
    let narrow = Uniform::new_inclusive(-config.b, config.b);
    let wide = Uniform::new_inclusive(-config.k * config.b, config.k * config.b);
    let scale = config.gamma / dims as f64;
    let points = (0..=total)
        .into_par_iter()
        .map(|card| {
            let mut pooled = Moments::default();
            for outer in 0..config.outer_reps {
                let mut rng = cell_stream(config.seed, DECQN, outer, card);
                let mut covered: Vec<Vec<bool>> = spec.sizes().iter().map(|&n| vec![false; n]).collect();
                for atomic in index::sample(&mut rng, total, card) {
                    for (d, &j) in spec.decode_atomic(atomic).indices().iter().enumerate() {
                        covered[d][j] = true;
                    }
                }
                let inside: Vec<usize> = covered.iter().map(|c| c.iter().filter(|&&x| x).count()).collect();
                let mut m = Moments::default();
                for _ in 0..config.inner_reps {
                    let sum: f64 = spec
                        .sizes()
                        .iter()
                        .zip(&inside)
                        .map(|(&n, &i)| pooled_max(i, n - i, &narrow, &wide, &mut rng))
                        .sum();
                    m.push(scale * sum);
                }
                pooled = pooled.merge(m);
            }
            pooled.point(card)
        })
        .collect();
    Ok(SimCurve { points })
}

pub const CSV_HEADER: &str =
    "in_distribution,mean_dqn,var_dqn,se_mean_dqn,se_var_dqn,mean_dec,var_dec,se_mean_dec,se_var_dec";

pub fn write_csv<W: Write>(mut out: W, dqn: &SimCurve, decqn: &SimCurve) -> Result<()> {
    if dqn.points.len() != decqn.points.len() {
        return Err(Error::Dimension {
            expected: dqn.points.len(),
            got: decqn.points.len(),
            context: "simulation curve length",
        });
    }
    writeln!(out, "{CSV_HEADER}")?;
    for (a, b) in dqn.points.iter().zip(&decqn.points) {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            a.in_distribution, a.mean, a.variance, a.std_error, a.var_std_error, b.mean, b.variance, b.std_error, b.var_std_error
        )?;
    }
    Ok(())
}

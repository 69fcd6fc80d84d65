//! Value decomposition over factorised action spaces.
//!
//! A global action is a tuple of sub-actions, one per dimension. Each
//! dimension `i` owns a utility array `U^i(s, .)`; the global Q-value is the
//! mean (DecQN) or the sum of the selected utilities. The independent mode
//! treats each utility array as its own Q-function and has no global value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a factorised action space: `sizes[i]` sub-actions in dimension `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionSpec {
    sizes: Vec<usize>,
}

/// Number of values to learn under each representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionCounts {
    /// `prod n_i`, or `None` when it does not fit in a `u128`.
    pub atomic: Option<u128>,
    /// `sum n_i`.
    pub factored: u128,
}

impl ActionSpec {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::precondition("action space needs at least one dimension"));
        }
        if let Some(i) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::precondition(format!("dimension {i} has no sub-actions")));
        }
        if sizes.iter().any(|&n| n > u16::MAX as usize + 1) {
            return Err(Error::precondition("sub-action count exceeds 65536"));
        }
        Ok(ActionSpec { sizes })
    }

    /// `dims` dimensions with `n` sub-actions each.
    pub fn uniform(dims: usize, n: usize) -> Result<Self> {
        Self::new(vec![n; dims])
    }

    /// Number of sub-action dimensions `N`.
    pub fn dims(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Total utility outputs, `sum n_i`.
    pub fn total_outputs(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Start of each dimension's block in a flat utility row.
    pub fn offsets(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .scan(0, |acc, &n| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect()
    }

    pub fn counts(&self) -> ActionCounts {
        action_counts(self)
    }

    /// Number of atomic actions as `usize`, if it fits.
    pub fn atomic_count(&self) -> Option<usize> {
        self.sizes
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
    }

    /// Mixed-radix decoding of an atomic action index; dimension 0 varies fastest.
    pub fn decode_atomic(&self, mut index: usize) -> FactoredAction {
        let indices = self
            .sizes
            .iter()
            .map(|&n| {
                let digit = index % n;
                index /= n;
                digit
            })
            .collect();
        FactoredAction(indices)
    }

    /// Every atomic action in index order. Only sensible for small spaces.
    pub fn atomic_actions(&self) -> impl Iterator<Item = FactoredAction> + '_ {
        let count = self.atomic_count().expect("atomic action space too large to enumerate");
        (0..count).map(move |i| self.decode_atomic(i))
    }

    pub fn validate(&self, action: &FactoredAction) -> Result<()> {
        if action.0.len() != self.dims() {
            return Err(Error::Dimension {
                context: "factored action",
                expected: self.dims(),
                got: action.0.len(),
            });
        }
        for (dim, (&index, &size)) in action.0.iter().zip(&self.sizes).enumerate() {
            if index >= size {
                return Err(Error::InvalidAction { dim, index, size });
            }
        }
        Ok(())
    }
}

/// `(prod n_i, sum n_i)`, with the product reported as unbounded on overflow.
pub fn action_counts(spec: &ActionSpec) -> ActionCounts {
    let atomic = spec
        .sizes
        .iter()
        .try_fold(1u128, |acc, &n| acc.checked_mul(n as u128));
    let factored = spec.sizes.iter().map(|&n| n as u128).sum();
    ActionCounts { atomic, factored }
}

/// One sub-action index per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactoredAction(pub Vec<usize>);

impl FactoredAction {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<usize>> for FactoredAction {
    fn from(v: Vec<usize>) -> Self {
        FactoredAction(v)
    }
}

/// Per-dimension utility arrays `U^i(s, .)` for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityValues {
    per_dim: Vec<Vec<f64>>,
}

impl UtilityValues {
    pub fn new(per_dim: Vec<Vec<f64>>) -> Result<Self> {
        if per_dim.is_empty() || per_dim.iter().any(Vec::is_empty) {
            return Err(Error::precondition("utility arrays must be non-empty"));
        }
        Ok(UtilityValues { per_dim })
    }

    /// Splits a flat network output row into per-dimension blocks.
    pub fn from_flat(spec: &ActionSpec, row: &[f64]) -> Result<Self> {
        if row.len() != spec.total_outputs() {
            return Err(Error::Dimension {
                context: "utility row",
                expected: spec.total_outputs(),
                got: row.len(),
            });
        }
        let mut rest = row;
        let per_dim = spec
            .sizes()
            .iter()
            .map(|&n| {
                let (head, tail) = rest.split_at(n);
                rest = tail;
                head.to_vec()
            })
            .collect();
        Ok(UtilityValues { per_dim })
    }

    pub fn dims(&self) -> usize {
        self.per_dim.len()
    }

    pub fn dim(&self, i: usize) -> &[f64] {
        &self.per_dim[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.per_dim.iter().map(Vec::as_slice)
    }

    pub fn spec(&self) -> ActionSpec {
        ActionSpec {
            sizes: self.per_dim.iter().map(Vec::len).collect(),
        }
    }

    /// Per-dimension maxima.
    pub fn maxima(&self) -> Vec<f64> {
        self.per_dim.iter().map(|u| max(u)).collect()
    }

    fn check(&self, action: &FactoredAction) -> Result<()> {
        self.spec().validate(action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecompMode {
    /// `Q = (1/N) sum_i U^i` (DecQN).
    #[default]
    Mean,
    /// `Q = sum_i U^i`.
    Sum,
    /// Each `U^i` is its own Q-function (BDQ-style independent learners).
    Independent,
}

impl DecompMode {
    pub fn name(self) -> &'static str {
        match self {
            DecompMode::Mean => "mean",
            DecompMode::Sum => "sum",
            DecompMode::Independent => "independent",
        }
    }

    /// Factor applied to the sum of per-dimension terms.
    pub fn scale(self, dims: usize) -> Result<f64> {
        match self {
            DecompMode::Mean => Ok(1.0 / dims as f64),
            DecompMode::Sum => Ok(1.0),
            DecompMode::Independent => Err(Error::UnsupportedMode(self.name())),
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Global Q-value of `action` under `mode`.
pub fn q_value(utilities: &UtilityValues, action: &FactoredAction, mode: DecompMode) -> Result<f64> {
    let scale = mode.scale(utilities.dims())?;
    utilities.check(action)?;
    let total: f64 = utilities
        .iter()
        .zip(action.indices())
        .map(|(u, &a)| u[a])
        .sum();
    Ok(scale * total)
}

/// Per-dimension argmax; identical under mean and sum aggregation.
pub fn greedy_action(utilities: &UtilityValues) -> FactoredAction {
    FactoredAction(utilities.iter().map(argmax).collect())
}

/// Bootstrapped target `r + gamma * scale * sum_i max U^i(s', .)`; `r` when terminal.
pub fn decqn_target(
    reward: f64,
    next_utilities: &UtilityValues,
    gamma: f64,
    mode: DecompMode,
    terminal: bool,
) -> Result<f64> {
    let scale = mode.scale(next_utilities.dims())?;
    if terminal {
        return Ok(reward);
    }
    let total: f64 = next_utilities.iter().map(max).sum();
    Ok(reward + gamma * scale * total)
}

/// Independent per-dimension targets `r + gamma * max U^i(s', .)`.
pub fn bdq_targets(reward: f64, next_utilities: &UtilityValues, gamma: f64, terminal: bool) -> Vec<f64> {
    next_utilities
        .iter()
        .map(|u| if terminal { reward } else { reward + gamma * max(u) })
        .collect()
}

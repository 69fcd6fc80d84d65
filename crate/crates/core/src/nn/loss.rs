//! Scalar losses and the batch objectives that drive [`NetParams::backward`].
//!
//! Every objective is a mean over the batch. Network outputs for factorised
//! heads are laid out as one flat row per sample, dimension blocks in order
//! (see [`ActionSpec::offsets`]).
//!
//! [`NetParams::backward`]: super::NetParams::backward

use super::matrix::Matrix;
use crate::decomp::{ActionSpec, DecompMode};
use crate::error::{Error, Result};

/// Huber loss of `pred - target`.
pub fn huber(pred: f64, target: f64, delta: f64) -> f64 {
    let u = pred - target;
    if u.abs() <= delta {
        0.5 * u * u
    } else {
        delta * (u.abs() - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to `pred`.
pub fn huber_grad(pred: f64, target: f64, delta: f64) -> f64 {
    (pred - target).clamp(-delta, delta)
}

/// Asymmetric squared loss `|tau - 1(u < 0)| u^2` with `u = q - v`.
pub fn expectile_loss(q: f64, v: f64, tau: f64) -> f64 {
    let u = q - v;
    expectile_weight(u, tau) * u * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Numerically stable `log sum exp`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-probabilities of a softmax over `logits`.
///
/// Panics on an empty slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "log_softmax of an empty array");
    let lse = logsumexp(logits);
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// TD regression data for a utility network.
#[derive(Debug, Clone, Copy)]
pub struct TdBatch<'a> {
    pub spec: &'a ActionSpec,
    pub mode: DecompMode,
    /// Row-major `(batch, N)` sub-action indices.
    pub actions: &'a [usize],
    /// One target per sample, or `(batch, N)` per-dimension targets in
    /// [`DecompMode::Independent`].
    pub targets: &'a [f64],
}

/// Batch objective understood by [`super::NetParams::backward`].
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// `mean_b sum_j (o_bj - t_bj)^2`.
    Mse { targets: &'a Matrix },
    /// Huber regression of the decomposed Q-value onto TD targets.
    Huber { delta: f64, td: TdBatch<'a> },
    /// Mean over dimensions of `-log softmax(logits^i)[a_i]`.
    Nll { spec: &'a ActionSpec, actions: &'a [usize] },
    /// Expectile regression of a scalar output onto `targets`.
    Expectile { tau: f64, targets: &'a [f64] },
    /// Huber TD loss plus `alpha * mean_i [logsumexp U^i - U^i(a_i)]`.
    CqlAugmented { delta: f64, alpha: f64, td: TdBatch<'a> },
}

impl Loss<'_> {
    /// Loss value and `dL/d output` for a batch of network outputs.
    pub fn evaluate(&self, outputs: &Matrix) -> Result<(f64, Matrix)> {
        let batch = outputs.rows();
        if batch == 0 {
            return Err(Error::precondition("empty batch"));
        }
        let inv_b = 1.0 / batch as f64;
        let mut grad = Matrix::zeros(batch, outputs.cols());
        let mut total = 0.0;
        for b in 0..batch {
            let row = outputs.row(b);
            let g = grad.row_mut(b);
            let value = match *self {
                Loss::Mse { targets } => {
                    check_cols(targets.cols(), row.len(), "mse targets")?;
                    let t = targets.row(b);
                    let mut v = 0.0;
                    for j in 0..row.len() {
                        let u = row[j] - t[j];
                        v += u * u;
                        g[j] = 2.0 * u * inv_b;
                    }
                    v
                }
                Loss::Huber { delta, td } => td_row(&td, b, row, g, delta, inv_b)?,
                Loss::Nll { spec, actions } => {
                    check_cols(spec.total_outputs(), row.len(), "policy logits")?;
                    let a = &actions[b * spec.dims()..(b + 1) * spec.dims()];
                    softmax_penalty_row(spec, a, row, g, inv_b)
                }
                Loss::Expectile { tau, targets } => {
                    check_cols(1, row.len(), "value output")?;
                    let u = targets[b] - row[0];
                    let w = expectile_weight(u, tau);
                    g[0] = -2.0 * w * u * inv_b;
                    w * u * u
                }
                Loss::CqlAugmented { delta, alpha, td } => {
                    let v = td_row(&td, b, row, g, delta, inv_b)?;
                    let a = &td.actions[b * td.spec.dims()..(b + 1) * td.spec.dims()];
                    let mut pg = vec![0.0; row.len()];
                    let p = softmax_penalty_row(td.spec, a, row, &mut pg, inv_b);
                    for (gj, pj) in g.iter_mut().zip(&pg) {
                        *gj += alpha * pj;
                    }
                    v + alpha * p
                }
            };
            if !value.is_finite() {
                return Err(Error::Divergence {
                    quantity: "loss",
                    batch_index: b,
                });
            }
            total += value;
        }
        Ok((total * inv_b, grad))
    }
}

fn check_cols(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// Huber TD loss for one sample; writes `dL/d row` scaled by `inv_b` into `g`.
fn td_row(td: &TdBatch<'_>, b: usize, row: &[f64], g: &mut [f64], delta: f64, inv_b: f64) -> Result<f64> {
    let spec = td.spec;
    check_cols(spec.total_outputs(), row.len(), "utility outputs")?;
    let n = spec.dims();
    let a = &td.actions[b * n..(b + 1) * n];
    let offsets = spec.offsets();
    match td.mode {
        DecompMode::Independent => {
            let y = &td.targets[b * n..(b + 1) * n];
            let inv_n = 1.0 / n as f64;
            let mut v = 0.0;
            for i in 0..n {
                let k = offsets[i] + a[i];
                v += huber(row[k], y[i], delta);
                g[k] = huber_grad(row[k], y[i], delta) * inv_n * inv_b;
            }
            Ok(v * inv_n)
        }
        mode => {
            let scale = mode.scale(n)?;
            let q = scale * (0..n).map(|i| row[offsets[i] + a[i]]).sum::<f64>();
            let y = td.targets[b];
            let dq = huber_grad(q, y, delta) * scale * inv_b;
            for i in 0..n {
                g[offsets[i] + a[i]] = dq;
            }
            Ok(huber(q, y, delta))
        }
    }
}

/// `(1/N) sum_i [logsumexp(row^i) - row^i[a_i]]`, i.e. the mean per-dimension
/// softmax NLL; its gradient `(softmax - onehot) / N` is written into `g`.
fn softmax_penalty_row(spec: &ActionSpec, a: &[usize], row: &[f64], g: &mut [f64], inv_b: f64) -> f64 {
    let inv_n = 1.0 / spec.dims() as f64;
    let mut v = 0.0;
    let mut start = 0;
    for (i, &size) in spec.sizes().iter().enumerate() {
        let logits = &row[start..start + size];
        let lse = logsumexp(logits);
        v += lse - logits[a[i]];
        for j in 0..size {
            let p = (logits[j] - lse).exp();
            let onehot = if j == a[i] { 1.0 } else { 0.0 };
            g[start + j] = (p - onehot) * inv_n * inv_b;
        }
        start += size;
    }
    v * inv_n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn huber_examples() {
        assert_eq!(huber(1.0, 1.0, 1.0), 0.0);
        assert_eq!(huber(1.5, 1.0, 1.0), 0.125);
        assert_eq!(huber(3.0, 0.0, 1.0), 2.5);
        assert_eq!(huber(-3.0, 0.0, 1.0), 2.5);
    }

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(2.0, 0.0, 0.5), 2.0);
        assert!((expectile_loss(-1.0, 0.0, 0.8) - 0.2).abs() < 1e-15);
        assert_eq!(expectile_loss(1.0, 0.0, 0.8), 0.8);
    }

    #[test]
    fn log_softmax_examples() {
        let out = log_softmax(&[0.0, 0.0]);
        assert_eq!(out, vec![0.5f64.ln(), 0.5f64.ln()]);
        let big = log_softmax(&[1000.0, 0.0]);
        assert!(big.iter().all(|x| x.is_finite()));
        assert!(big[0].abs() < 1e-12);
    }

    #[test]
    fn mse_single_weight() {
        use crate::nn::{Layer, NetParams};
        let net = NetParams::from_layers(vec![Layer::new(1, 1, vec![3.0], vec![0.0]).unwrap()]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![1.0]);
        let t = Matrix::from_vec(1, 1, vec![0.0]);
        let (loss, g) = net.backward(&x, &Loss::Mse { targets: &t }).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(g.layers()[0].weights(), &[6.0]);
    }

    #[test]
    fn non_finite_loss_reports_row() {
        let spec = ActionSpec::uniform(1, 2).unwrap();
        let outputs = Matrix::from_rows(&[[0.0, 1.0], [f64::NAN, 0.0]]);
        let actions = [0, 0];
        let err = Loss::Nll { spec: &spec, actions: &actions }
            .evaluate(&outputs)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { batch_index: 1, .. }));
    }

    #[test]
    fn empty_batch_rejected() {
        let targets = Matrix::zeros(0, 1);
        let err = Loss::Mse { targets: &targets }.evaluate(&Matrix::zeros(0, 1)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    proptest! {
        #[test]
        fn log_softmax_normalises(logits in prop::collection::vec(-50.0..50.0f64, 1..10), c in -100.0..100.0f64) {
            let lp = log_softmax(&logits);
            let total: f64 = lp.iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
            for (a, b) in lp.iter().zip(log_softmax(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn expectile_half_is_half_square(q in -10.0..10.0f64, v in -10.0..10.0f64) {
            let u = q - v;
            prop_assert_eq!(expectile_loss(q, v, 0.5), 0.5 * u * u);
        }
    }
}

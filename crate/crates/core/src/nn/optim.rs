use super::mlp::NetParams;
use crate::error::{Error, Result};

/// Adam moment estimates; shapes mirror the parameters they update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: NetParams,
    pub second_moment: NetParams,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        Self::with_constants(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(params: &NetParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// A gradient containing NaN/Inf leaves both `params` and `state` untouched.
pub fn adam_step(params: &mut NetParams, grads: &NetParams, state: &mut AdamState, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0) {
        return Err(Error::precondition("learning rate must be positive"));
    }
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(Error::precondition("parameter, gradient and moment shapes differ"));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let moments = state.first_moment.tensors_mut().zip(state.second_moment.tensors_mut());
    for ((p, g), (m, v)) in params.tensors_mut().zip(grads.tensors()).zip(moments) {
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `target <- mu * online + (1 - mu) * target`, element-wise.
pub fn polyak(target: &mut NetParams, online: &NetParams, mu: f64) {
    assert!(target.same_shape(online), "polyak: shapes differ");
    for (t, o) in target.tensors_mut().zip(online.tensors()) {
        for (tj, oj) in t.iter_mut().zip(o) {
            *tj = mu * oj + (1.0 - mu) * *tj;
        }
    }
}

pub fn global_norm(grads: &NetParams) -> f64 {
    grads
        .tensors()
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut NetParams, max_norm: f64) {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

/// Moment estimates and hyperparameters for bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state for parameters shaped like `like`, with the usual betas.
    pub fn new(like: &ParamVector, lr: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update. Returns the new parameters and the advanced state.
///
/// `m_t = b1 m + (1-b1) g`, `v_t = b2 v + (1-b2) g^2`,
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)` with `m_hat = m_t / (1 - b1^t)`
/// and `v_hat = v_t / (1 - b2^t)`.
pub fn adam_step(
    params: &ParamVector,
    grads: &ParamVector,
    state: &AdamState,
) -> Result<(ParamVector, AdamState)> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    params.check_aligned(&state.v)?;
    if state.lr.is_nan() || state.lr <= 0.0 {
        return Err(Error::Config(format!("Adam learning rate must be > 0, got {}", state.lr)));
    }
    let t = state.step_count + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);

    let mut next = state.clone();
    next.step_count = t;
    let mut out = params.clone();
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, g), m), v) in out
        .iter_mut()
        .zip(grads.iter())
        .zip(next.m.iter_mut())
        .zip(next.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok((out, next))
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::params::{Frozen, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count, one slot per tensor.
///
/// Step counts are per tensor so a tensor that was frozen for a while
/// starts with a fresh bias correction when it is unfrozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub steps: Vec<u64>,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            steps: vec![0; params.len()],
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Bias-corrected adaptive-moment update of one tensor at step `t` (≥ 1).
pub fn adam_update(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hyper: &AdamHyper,
) {
    let c1 = 1.0 - hyper.beta1.powi(t as i32);
    let c2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        value[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// One optimizer step over every non-frozen tensor. Rejects non-finite
/// gradients before touching any state.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    hyper: &AdamHyper,
    frozen: Frozen,
) -> Result<()> {
    params.check_same_layout(grads)?;
    params.check_same_layout(&state.m)?;
    for (name, g) in grads.iter() {
        if !frozen.contains(name) && g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    for i in 0..params.len() {
        if frozen.contains(&params.names()[i]) {
            continue;
        }
        state.steps[i] += 1;
        adam_update(
            &mut params.tensor_mut(i).data,
            &grads.tensors()[i].data,
            &mut state.m.tensor_mut(i).data,
            &mut state.v.tensor_mut(i).data,
            state.steps[i],
            hyper,
        );
    }
    Ok(())
}

//! AdamW: Adam with decoupled weight decay.
//!
//! Decay multiplies parameters by `1 - lr * weight_decay` before the
//! moment-based update, so it never flows through the moment estimates.

use crate::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates for one flat parameter list, plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct OptimState {
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptimState {
    /// Zero-initialised state for parameter tensors of the given lengths.
    pub fn new(param_lens: &[usize]) -> Self {
        OptimState {
            step: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }
}

/// One AdamW update over every parameter tensor. `params[i]` and
/// `grads[i]` must have the length `state` was built with.
pub fn adamw_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut OptimState,
    hp: &AdamW,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adamw_step got {} params / {} grads for state with {} slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - f64::from(hp.beta1).powi(t);
    let bc2 = 1.0 - f64::from(hp.beta2).powi(t);
    let lr = f64::from(hp.lr);
    let (b1, b2) = (f64::from(hp.beta1), f64::from(hp.beta2));
    let eps = f64::from(hp.eps);
    let decay = 1.0 - lr * f64::from(hp.weight_decay);

    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if param.len() != m.len() || grad.len() != m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adamw_step slot expects length {}, got param {} / grad {}",
                m.len(),
                param.len(),
                grad.len()
            )));
        }
        for i in 0..param.len() {
            let g = f64::from(grad[i]);
            let mi = b1 * f64::from(m[i]) + (1.0 - b1) * g;
            let vi = b2 * f64::from(v[i]) + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let theta = f64::from(param[i]) * decay;
            param[i] = (theta - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamWState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. `lrs[i]` is the learning rate for `params[i]`, which
/// lets callers express parameter groups.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    lrs: &[f64],
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != lrs.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} lrs, {} state slots",
            params.len(),
            grads.len(),
            lrs.len(),
            state.m.len()
        )));
    }
    for ((p, g), &lr) in params.iter().zip(grads).zip(lrs) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "adamw: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("adamw gradient".into()));
        }
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = lrs[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `base · ½(1 + cos(π·step/total))`; `total = 0` keeps the base rate.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * frac).cos())
}

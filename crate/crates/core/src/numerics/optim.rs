use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TplError};
use crate::numerics::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(TplError::invalid(format!("bad AdamW hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            config,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(param: &mut Tensor, state: &mut AdamWState, lr: f64) -> Result<()> {
    state.config.validate()?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TplError::invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    if state.m.len() != param.len() {
        return Err(TplError::ShapeMismatch {
            op: "adamw_step",
            lhs: param.shape().to_vec(),
            rhs: vec![state.m.len()],
        });
    }
    let grad = param
        .grad()
        .ok_or_else(|| TplError::invalid("adamw_step: parameter has no gradient"))?
        .to_vec();
    let AdamWConfig { beta1, beta2, eps, weight_decay } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    for (i, p) in param.values_mut().iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Cosine annealing from `base` at `t = 0` to `floor` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, base: f64, floor: f64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(TplError::invalid(format!("cosine_lr: iteration {t} outside 0..={total}")));
    }
    if floor > base {
        return Err(TplError::invalid(format!("cosine_lr: floor {floor} above base {base}")));
    }
    let frac = t as f64 / total as f64;
    Ok(floor + 0.5 * (base - floor) * (1.0 + (PI * frac).cos()))
}

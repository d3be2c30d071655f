// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW with decoupled weight decay and linear learning-rate warmup.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{CloomError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Warmup multiplier for the `step`-th update (1-based).
    pub fn warmup_factor(&self, step: u64) -> f32 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            1.0
        } else {
            step as f32 / w as f32
        }
    }

    /// Learning rate applied on the `step`-th update (1-based).
    pub fn effective_lr(&self, step: u64) -> f32 {
        self.config.lr * self.warmup_factor(step)
    }
}

/// One AdamW update over `params` in place.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CloomError::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(CloomError::shape(
                "adamw_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(CloomError::NonFinite("adamw_step gradient"));
        }
    }

    let t = state.step + 1;
    let cfg = state.config;
    let lr = state.effective_lr(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *pj -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *pj);
        }
    }
    state.step = t;
    Ok(())
}

//! Adam and the step learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tape::Gradients;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// L2 penalty added to the gradient (PyTorch `Adam` semantics).
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let cfg = state.config.clone();
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(TensorError::Invalid(format!("learning rate {}", cfg.lr)));
    }
    for (name, g) in grads.named() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.named() {
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i] + cfg.weight_decay * pd[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `base_lr * k^floor(epoch / n_steps)`.
pub fn steplr(epoch: usize, base_lr: f64, k: f64, n_steps: usize) -> f64 {
    let n = n_steps.max(1);
    base_lr * k.powi((epoch / n) as i32)
}

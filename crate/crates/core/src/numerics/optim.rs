use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW moments and schedule position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub total_steps: usize,
    pub step: usize,
    /// Moments indexed like the parameter store; empty for frozen parameters.
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, total_steps: usize, store: &ParamStore) -> Self {
        let n = store.iter().count();
        let first_moment = vec![Vec::new(); n];
        let second_moment = vec![Vec::new(); n];
        OptimizerState { config, total_steps, step: 0, first_moment, second_moment }
    }

    /// Linear warmup over the first `warmup_fraction` of all steps, then flat.
    /// `t` is 1-based.
    pub fn lr_at(&self, t: usize) -> f64 {
        let warm = self.config.warmup_fraction * self.total_steps as f64;
        if warm <= 0.0 {
            return self.config.lr;
        }
        self.config.lr * (t as f64 / warm).min(1.0)
    }
}

/// Rescales accumulated gradients of trainable parameters so their joint L2
/// norm does not exceed `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.trainable) {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// One AdamW update of every trainable parameter from its accumulated gradient.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(Error::Training(format!(
            "optimizer tracks {} parameters, model has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
        return Err(Error::Training(format!("no gradient for trainable parameter {}", p.name)));
    }
    state.step += 1;
    let t = state.step;
    let lr = state.lr_at(t);
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let g = p.grad.as_ref().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        if m.is_empty() {
            m.resize(g.len(), 0.0);
            v.resize(g.len(), 0.0);
        }
        for j in 0..g.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            let w = &mut p.tensor.data[j];
            *w -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *w);
        }
    }
    Ok(())
}

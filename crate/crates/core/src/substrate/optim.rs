use super::params::{Gradients, ParamStore};
use crate::error::{GridError, Result};
use crate::substrate::array::RealArray;

/// AdamW moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<RealArray>,
    pub second_moment: Vec<RealArray>,
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    /// Whether weight decay applies to each parameter (weight matrices only).
    pub decay_mask: Vec<bool>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, weight_decay: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || beta1 == 0.0 || !(0.0..1.0).contains(&beta2) || beta2 == 0.0 {
            return Err(GridError::Config(format!("betas must lie in (0, 1), got {beta1}, {beta2}")));
        }
        Ok(Self {
            step_count: 0,
            first_moment: store.iter().map(|p| RealArray::zeros(p.value.shape())).collect(),
            second_moment: store.iter().map(|p| RealArray::zeros(p.value.shape())).collect(),
            beta1,
            beta2,
            learning_rate,
            weight_decay,
            epsilon,
            decay_mask: store.iter().map(|p| p.value.shape().len() >= 2 && p.name.ends_with(".weight")).collect(),
        })
    }
}

/// One AdamW update at rate `lr` with bias correction and decoupled decay.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.0.len() != store.len() || state.first_moment.len() != store.len() {
        return Err(GridError::Config("optimizer state does not match parameter set".into()));
    }
    for ((p, g), m) in store.iter().zip(&grads.0).zip(&state.first_moment) {
        if g.shape() != p.value.shape() || m.shape() != p.value.shape() {
            return Err(GridError::Config(format!("shape mismatch for parameter {}", p.name)));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let g = grads.0[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let wd = if state.decay_mask[i] { state.weight_decay } else { 0.0 };
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            let denom = vhat.sqrt() + state.epsilon;
            let update = if denom > 0.0 { mhat / denom } else { 0.0 };
            *w -= lr * (update + wd * *w);
        }
    }
    Ok(())
}

/// Linear warmup to the base rate, then constant.
pub fn scheduled_lr(base: f64, warmup_steps: u64, step: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base
    } else {
        base * (step + 1) as f64 / warmup_steps as f64
    }
}

//! Adam with a linear-warmup constant schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl OptState {
    pub fn new(config: AdamConfig) -> Self {
        OptState { config, ..Default::default() }
    }
}

/// Learning rate at `step` (0-based): linear ramp over the first
/// `warmup_frac * total` steps, constant afterwards.
pub fn scheduled_lr(base: f32, step: usize, total: usize, warmup_frac: f32) -> f32 {
    let warmup = (warmup_frac * total as f32).ceil() as usize;
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f32 / warmup as f32
    }
}

/// One Adam update of every trainable entry; frozen entries are skipped and
/// all gradients are cleared afterwards.
pub fn optimizer_step(params: &mut ParamStore, lr: f32, state: &mut OptState) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.frozen && p.tensor.grad().is_none()) {
        return Err(Error::contract(format!("trainable parameter {name} has no gradient")));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let grad = p.tensor.take_grad();
        if p.frozen {
            continue;
        }
        let grad = grad.expect("checked above");
        let n = grad.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (((x, g), mi), vi) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

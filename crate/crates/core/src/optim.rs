//! Adam with decoupled weight decay, linear warmup and step decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub base_lr: f64,
    /// Linear ramp length in optimizer steps; 0 disables warmup.
    pub warmup_steps: u64,
    /// Epochs at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { base_lr: 1e-3, warmup_steps: 0, decay_epochs: vec![80, 180, 300], decay_factor: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Completed optimizer steps.
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(schedule: Schedule, adam: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            schedule,
            adam,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }
}

/// Learning rate for optimizer step `step` taken during `epoch`.
pub fn lr_at(step: u64, epoch: usize, schedule: &Schedule) -> f64 {
    if step < schedule.warmup_steps {
        return schedule.base_lr * (step + 1) as f64 / schedule.warmup_steps as f64;
    }
    let passed = schedule.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    schedule.base_lr * schedule.decay_factor.powi(passed as i32)
}

/// One Adam update at rate `lr`. Weight decay is applied as `−lr·wd·param`
/// alongside the moment step.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], opt: &mut OptimState, lr: f64, epoch: usize) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    assert_eq!(params.len(), opt.first.len(), "optimizer state does not match parameters");
    for (i, g) in grads.iter().enumerate() {
        if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step: opt.step,
                epoch,
                detail: format!("non-finite gradient in tensor {i} at index {pos}"),
            });
        }
    }
    let AdamConfig { beta1, beta2, eps, weight_decay } = opt.adam;
    let t = (opt.step + 1) as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut opt.first).zip(&mut opt.second) {
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            p[j] -= lr * (update + weight_decay * p[j]);
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step: opt.step,
                epoch,
                detail: "parameter became non-finite".into(),
            });
        }
    }
    opt.step += 1;
    Ok(())
}

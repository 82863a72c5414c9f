//! Adam-style optimizer with decoupled weight decay, global-norm gradient
//! clipping, and a linear-warmup / cosine-decay learning-rate schedule.
//!
//! All state updates run in the model's element type with a fixed reduction
//! order, so a given seed reproduces bit-identical parameter trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::{Elem, Tensor};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; applied to the parameter directly, not
    /// through the gradient moments.
    pub weight_decay: f64,
    /// Global-norm clip threshold.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, lo, hi) in [
            ("beta1", self.beta1, 0.0, 1.0),
            ("beta2", self.beta2, 0.0, 1.0),
        ] {
            if !(lo..hi).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi})")));
            }
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("optimizer eps/decay/clip out of range".into()));
        }
        Ok(())
    }
}

/// First and second gradient moments, aligned with the parameter order.
pub struct OptimState<E> {
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Elem> OptimState<E> {
    pub fn new(params: &ParamSet<E>) -> Self {
        let zeros: Vec<Tensor<E>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        OptimState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One optimizer update in place. `grads` must align with the parameter
/// order; non-finite gradients are an error.
pub fn apply_update<E: Elem>(
    params: &mut ParamSet<E>,
    grads: &[Tensor<E>],
    state: &mut OptimState<E>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<UpdateStats> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut sq_sum = 0.0f64;
    for (g, p) in grads.iter().zip(params.tensors()) {
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        sq_sum += g.data().iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>();
    }
    let grad_norm = sq_sum.sqrt();
    let clipped = grad_norm > cfg.clip_norm;
    let clip_scale = E::from_f64(if clipped {
        cfg.clip_norm / grad_norm
    } else {
        1.0
    });

    state.step += 1;
    let t = state.step as i32;
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let one = E::one();
    let bc1 = E::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = E::from_f64(1.0 - cfg.beta2.powi(t));
    let eps = E::from_f64(cfg.eps);
    let lre = E::from_f64(lr);
    let wd = E::from_f64(cfg.weight_decay);

    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensors_mut()[i].data_mut();
        for j in 0..g.len() {
            let gj = g.data()[j] * clip_scale;
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] - lre * (m_hat / (v_hat.sqrt() + eps) + wd * p[j]);
        }
    }
    Ok(UpdateStats { grad_norm, clipped })
}

/// Linear warmup to `peak`, then cosine decay to `peak * floor_frac`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_frac: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.peak;
        }
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let floor = self.peak * self.floor_frac;
        if step >= self.total_steps {
            return floor;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        floor + (self.peak - floor) * cosine
    }
}

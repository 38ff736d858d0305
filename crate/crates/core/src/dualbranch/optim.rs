use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::AslParams;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub ema_decay: f64,
    pub t_max: usize,
    pub alpha: f64,
    pub asl: AslParams,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_temperature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-6,
            lr_min: 0.0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            ema_decay: 0.999,
            t_max: 7,
            alpha: 1.5,
            asl: AslParams::default(),
            batch_size: 64,
            epochs: 7,
            seed: 0,
            freeze_temperature: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::invalid("lr_max", format!("{} must be positive", self.lr_max)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::invalid("lr_min", format!("{} must be in [0, lr_max]", self.lr_min)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::invalid("ema_decay", format!("{} not in (0, 1)", self.ema_decay)));
        }
        if self.t_max == 0 {
            return Err(Error::invalid("t_max", "must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("{} must be >= 0", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid("betas", format!("{:?} must lie in [0, 1)", self.betas)));
        }
        self.asl.validate()
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
        }
    }
}

/// AdamW hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update. Weight decay `θ ← θ − lr·wd·θ` is applied separately
/// from the bias-corrected adaptive step.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, opt: &AdamW) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let shrink = 1.0 - lr * opt.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * shrink - lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/t_max))`; epochs past
/// `t_max` clamp to `lr_min`.
pub fn cosine_lr(epoch: usize, lr_max: f64, lr_min: f64, t_max: usize) -> f64 {
    if epoch >= t_max {
        if epoch > t_max {
            log::warn!("epoch {epoch} beyond t_max {t_max}; using lr_min");
        }
        return lr_min;
    }
    if epoch == 0 {
        return lr_max;
    }
    let phase = std::f64::consts::PI * epoch as f64 / t_max as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

/// Schedule value for `cfg`.
pub fn scheduled_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    cosine_lr(epoch, cfg.lr_max, cfg.lr_min, cfg.t_max)
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) {
    assert_eq!(shadow.len(), params.len());
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}

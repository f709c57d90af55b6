//! AdamW, the warmup + cosine learning-rate schedule, and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{grad_norm, Elem, Tensor};

/// AdamW hyperparameters. The defaults for the betas, epsilon and weight
/// decay are conventional values; the learning rate is normally overridden
/// every epoch by [`lr_at_epoch`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<E: Elem> {
    pub first: Vec<E>,
    pub second: Vec<E>,
}

/// Optimizer state: per-parameter moments keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW<E: Elem = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<E>>,
}

impl<E: Elem> AdamW<E> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One decoupled-weight-decay update of every parameter at `lr`.
    pub fn step(&mut self, params: &[(String, Tensor<E>)], lr: f64) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad_ref().is_none()) {
            return Err(Error::Usage(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr_e = E::from_f64(lr);
        let b1 = E::from_f64(c.beta1);
        let b2 = E::from_f64(c.beta2);
        let one = E::one();
        let bc1 = one - E::from_f64(c.beta1.powi(t));
        let bc2 = one - E::from_f64(c.beta2.powi(t));
        let decay = one - E::from_f64(lr * c.weight_decay);
        let eps = E::from_f64(c.eps);

        for (name, param) in params {
            let grad_slot = param.grad_ref();
            let grad = grad_slot.as_ref().expect("checked above");
            let n = grad.len();
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![E::zero(); n],
                second: vec![E::zero(); n],
            });
            if m.first.len() != n {
                return Err(Error::shape(format!(
                    "moment buffer for {name} has {} entries, parameter has {n}",
                    m.first.len()
                )));
            }
            let mut data = param.data_mut();
            for i in 0..n {
                let g = grad[i];
                m.first[i] = b1 * m.first[i] + (one - b1) * g;
                m.second[i] = b2 * m.second[i] + (one - b2) * g * g;
                let m_hat = m.first[i] / bc1;
                let v_hat = m.second[i] / bc2;
                data[i] = data[i] * decay - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine annealing, evaluated per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub total_epochs: usize,
}

impl ScheduleConfig {
    /// Recipe for the pseudo-label transformers.
    pub fn pseudo_labeler() -> Self {
        Self {
            warmup_epochs: 10,
            peak_lr: 1e-4,
            min_lr: 1e-5,
            total_epochs: 80,
        }
    }

    /// Recipe for the inference model.
    pub fn inference() -> Self {
        Self {
            min_lr: 5e-6,
            ..Self::pseudo_labeler()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "schedule needs 0 <= warmup ({}) <= total ({}) and total > 0",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.min_lr.is_nan() || self.peak_lr.is_nan() || self.min_lr > self.peak_lr || self.min_lr < 0.0 {
            return Err(Error::Config(format!(
                "schedule needs 0 <= min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::inference()
    }
}

/// Learning rate for `epoch` (0-based).
pub fn lr_at_epoch(cfg: &ScheduleConfig, epoch: usize) -> Result<f64> {
    cfg.validate()?;
    if epoch >= cfg.total_epochs {
        return Err(Error::Usage(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.peak_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let decay_epochs = cfg.total_epochs - cfg.warmup_epochs;
    // The last epoch lands exactly on min_lr.
    let progress = if decay_epochs <= 1 {
        1.0
    } else {
        (epoch - cfg.warmup_epochs) as f64 / (decay_epochs - 1) as f64
    };
    let cos = (std::f64::consts::PI * progress).cos();
    Ok(cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + cos))
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when no clipping was needed).
pub fn clip_grad_norm<E: Elem>(params: &[Tensor<E>], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = E::from_f64(scale);
    for p in params {
        if let Some(g) = p.grad_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    scale
}

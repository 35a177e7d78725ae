//! Adam optimizer with bias-corrected first and second moments.
//!
//! Moment buffers are stored in f32 (matching the parameters) but every
//! per-element update is computed in f64 so results do not depend on
//! intermediate rounding.

use super::ParamSet;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("adam: lr must be finite and > 0, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("adam: {name} must be in [0, 1), got {beta}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam: eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Optimizer state: one pair of moment buffers per parameter tensor,
/// matched to the parameter set by position.
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|(_, t)| vec![0f32; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0f32; t.numel()]).collect();
        Ok(Self { cfg, step_count: 0, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update using the gradients stored on each parameter.
    /// Every parameter must carry a finite gradient of matching length.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: optimizer built for {} parameters, given {}",
                self.m.len(),
                params.len()
            )));
        }
        // Validate everything before touching any state so a failed
        // call leaves parameters and moments unchanged.
        for (name, tensor) in params.iter() {
            let grad = tensor.grad().ok_or_else(|| {
                Error::Contract(format!("adam: parameter '{name}' has no gradient"))
            })?;
            if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "adam: non-finite gradient for parameter '{name}' at element {idx}"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for (idx, (_, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor.grad().expect("validated above").to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (j, g) in grad.iter().enumerate() {
                let g = *g as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let p = tensor.data()[j] as f64 - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                tensor.data_mut()[j] = p as f32;
            }
            tensor.validate_finite("adam-updated parameter")?;
        }
        Ok(())
    }
}

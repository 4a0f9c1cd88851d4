use serde::{Deserialize, Serialize};

use super::LayerParams;
use crate::error::{Error, Result};

/// Solver settings; the defaults are the text CNN training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub drop_factor: f64,
    pub drop_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.05,
            drop_factor: 0.1,
            drop_every: 1000,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.drop_factor > 0.0
            && self.drop_factor <= 1.0
            && self.drop_every > 0
            && self.momentum >= 0.0
            && self.momentum < 1.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver settings {self:?}")))
        }
    }
}

/// Step schedule: `base_lr * drop_factor ^ floor(iter / drop_every)`.
pub fn lr_at(iter: usize, cfg: &SgdConfig) -> f64 {
    cfg.base_lr * cfg.drop_factor.powi((iter / cfg.drop_every) as i32)
}

/// Momentum SGD with L2 weight decay on non-bias tensors:
/// `v <- momentum * v - lr * (g + wd * theta); theta <- theta + v`.
pub fn sgd_step(params: &mut LayerParams, lr: f64, cfg: &SgdConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient in `{}`", p.name)));
    }
    for p in params.iter_mut() {
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        let theta = p.value.data_mut();
        let v = p.velocity.data_mut();
        for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
            *v = cfg.momentum * *v - lr * (g + wd * *t);
            *t += *v;
        }
    }
    Ok(())
}

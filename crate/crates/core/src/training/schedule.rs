use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::GrowthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// Optimization settings of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub max_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Huber threshold in meters (pretraining only).
    #[serde(default = "default_delta")]
    pub huber_delta: f64,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Pseudo-label construction (fine-tuning only).
    #[serde(default)]
    pub growth: GrowthConfig,
}

fn default_warmup() -> f64 {
    0.3
}
fn default_clip() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1.0
}
fn default_decay() -> f64 {
    0.01
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}

impl PhaseConfig {
    fn with(phase: Phase, max_lr: f64, batch_size: usize, total_steps: usize) -> Self {
        PhaseConfig {
            phase,
            max_lr,
            warmup_fraction: default_warmup(),
            total_steps,
            batch_size,
            grad_clip: default_clip(),
            huber_delta: default_delta(),
            weight_decay: default_decay(),
            betas: default_betas(),
            eps: default_eps(),
            growth: GrowthConfig::default(),
        }
    }

    /// Masked-Huber pretraining: peak rate 1e-4, batches of 16.
    pub fn pretrain(total_steps: usize) -> Self {
        Self::with(Phase::Pretrain, 1e-4, 16, total_steps)
    }

    /// Growth-loss fine-tuning: peak rate 3e-3, batches of 8.
    pub fn finetune(total_steps: usize) -> Self {
        Self::with(Phase::Finetune, 3e-3, 8, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad("max_lr must be positive");
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        self.growth.validate()
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }
}

/// Linear ramp from 0 to `max_lr` over the warmup, then cosine decay to 0.
pub fn lr_at(step: usize, cfg: &PhaseConfig) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside a schedule of {} steps",
            cfg.total_steps
        )));
    }
    let s = step as f64;
    let warm = cfg.warmup_steps();
    if s < warm {
        return Ok(cfg.max_lr * s / warm);
    }
    let progress = (s - warm) / (cfg.total_steps as f64 - warm);
    Ok(cfg.max_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

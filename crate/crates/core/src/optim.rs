//! Linear-warmup cosine learning-rate schedule and first-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub final_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be > 0"));
        }
        if !(self.final_lr >= 0.0 && self.final_lr.is_finite()) {
            return Err(Error::config("final_lr", "must be >= 0"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!(
                    "must be below total epochs ({} >= {})",
                    self.warmup_epochs, self.total_epochs
                ),
            ));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::config("steps_per_epoch", "must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Learning rate at optimizer step `step` (0-based).
///
/// Warmup ramps linearly to `base_lr` over whole epochs; the rest of the run
/// follows a half cosine from `base_lr` down to `final_lr`, reached at
/// `step == total_steps`.
pub fn lr_at(step: usize, config: &ScheduleConfig) -> Result<f64> {
    let total = config.total_steps();
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let warmup = config.warmup_steps();
    if step < warmup {
        return Ok(config.base_lr * (step + 1) as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(config.final_lr + (config.base_lr - config.final_lr) * cosine)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            ..Self::default()
        }
    }
}

/// Moment buffers, flat and aligned with the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let n = params.num_scalars();
        let second = match config.kind {
            OptimizerKind::Adam => vec![0.0; n],
            OptimizerKind::SgdMomentum => Vec::new(),
        };
        Self {
            config,
            step: 0,
            first: vec![0.0; n],
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One optimizer step; returns the new parameters.
pub fn apply_update(
    params: &ParamSet,
    gradient: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<ParamSet> {
    let n = params.num_scalars();
    for len in [gradient.len(), state.first.len()] {
        if len != n {
            return Err(Error::LayoutMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let mut flat = params.flatten();
    state.step += 1;
    let c = &state.config;
    match c.kind {
        OptimizerKind::SgdMomentum => {
            for ((p, v), &g) in flat.iter_mut().zip(&mut state.first).zip(gradient) {
                *v = c.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            for (((p, m), v), &g) in flat
                .iter_mut()
                .zip(&mut state.first)
                .zip(&mut state.second)
                .zip(gradient)
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
    params.with_flat(&flat)
}

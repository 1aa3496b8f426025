use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the one-cycle schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneCycleConfig {
    pub warmup_fraction: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        OneCycleConfig {
            warmup_fraction: 0.25,
            start_div: 25.0,
            final_div: 1e4,
        }
    }
}

impl OneCycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidArgument(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        for (name, v) in [("start_div", self.start_div), ("final_div", self.final_div)] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 1, got {v}")));
            }
        }
        Ok(())
    }

    pub fn lr(&self, step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
        one_cycle_lr(step, total_steps, base_lr, self.warmup_fraction, self.start_div, self.final_div)
    }
}

/// Step index of the peak.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1))
}

/// Cosine warm-up from `base/start_div` to `base` over the first
/// `round(warmup_fraction·total)` steps, then cosine annealing to
/// `base/final_div` at the last step.
pub fn one_cycle_lr(
    step: usize,
    total_steps: usize,
    base_lr: f64,
    warmup_fraction: f64,
    start_div: f64,
    final_div: f64,
) -> Result<f64> {
    OneCycleConfig {
        warmup_fraction,
        start_div,
        final_div,
    }
    .validate()?;
    if step >= total_steps {
        return Err(Error::InvalidArgument(format!("step {step} is not below total {total_steps}")));
    }
    if !(base_lr.is_finite() && base_lr > 0.0) {
        return Err(Error::InvalidArgument(format!("base learning rate must be positive, got {base_lr}")));
    }
    let peak = warmup_steps(total_steps, warmup_fraction);
    let cos_interp = |from: f64, to: f64, t: f64| {
        let w = (1.0 - (PI * t).cos()) / 2.0;
        from * (1.0 - w) + to * w
    };
    if step < peak {
        return Ok(cos_interp(base_lr / start_div, base_lr, step as f64 / peak as f64));
    }
    let tail = total_steps - 1 - peak;
    if tail == 0 {
        return Ok(base_lr);
    }
    Ok(cos_interp(base_lr, base_lr / final_div, (step - peak) as f64 / tail as f64))
}

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datapipe::StageSpec;
use crate::error::{Error, Result};

/// One training session at a fixed stage resolution: `frozen_epochs` with
/// the encoder frozen at `frozen_lr`, then `main_epochs` at `base_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub stage: StageSpec,
    pub frozen_epochs: usize,
    pub frozen_lr: f64,
    pub main_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
}

impl SessionSpec {
    /// Low-resolution session with a frozen warm-up.
    pub fn canonical_low() -> Self {
        SessionSpec {
            stage: StageSpec::LOW,
            frozen_epochs: 10,
            frozen_lr: 0.01,
            main_epochs: 200,
            base_lr: 1e-3,
            weight_decay: 1e-5,
        }
    }

    /// High-resolution session continuing from the low-resolution one.
    pub fn canonical_high() -> Self {
        SessionSpec {
            stage: StageSpec::HIGH,
            frozen_epochs: 0,
            frozen_lr: 1e-4,
            main_epochs: 200,
            base_lr: 1e-4,
            weight_decay: 1e-5,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.frozen_epochs + self.main_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        if self.total_epochs() == 0 {
            return Err(Error::Config("a session needs at least one epoch".into()));
        }
        for (name, v) in [("frozen_lr", self.frozen_lr), ("base_lr", self.base_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub sessions: Vec<SessionSpec>,
}

impl TrainingPlan {
    pub fn canonical() -> Self {
        TrainingPlan {
            sessions: vec![SessionSpec::canonical_low(), SessionSpec::canonical_high()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::Config("training plan has no sessions".into()));
        }
        self.sessions.iter().try_for_each(SessionSpec::validate)
    }
}

/// The best checkpoint of a session. `epoch` counts from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub session_index: usize,
    pub epoch: usize,
    pub tuning_dice: f64,
    pub path: PathBuf,
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network input extent and batch size of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub batch_size: usize,
}

impl StageSpec {
    /// Low-resolution stage.
    pub const LOW: StageSpec = StageSpec {
        depth: 18,
        height: 112,
        width: 112,
        batch_size: 6,
    };
    /// High-resolution stage.
    pub const HIGH: StageSpec = StageSpec {
        depth: 20,
        height: 256,
        width: 256,
        batch_size: 1,
    };

    pub fn new(depth: usize, height: usize, width: usize, batch_size: usize) -> Result<Self> {
        let s = StageSpec {
            depth,
            height,
            width,
            batch_size,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 8 || self.height < 32 || self.width < 32 {
            return Err(Error::InvalidArgument(format!(
                "stage extent ({}, {}, {}) is below the minimum (8, 32, 32)",
                self.depth, self.height, self.width
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }
}

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture description of the 3D U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNet3dConfig {
    /// Output classes; class 0 is background.
    pub num_classes: usize,
    /// Channels of the stem and of the four residual stages.
    pub encoder_channels: [usize; 5],
    /// Encoder weights in the 18-layer video ResNet naming scheme
    /// (`stem.0.weight`, `layer1.0.conv1.0.weight`, ...).
    pub pretrained_weights_path: Option<PathBuf>,
    /// Instance-normalize skip features before concatenation.
    pub instance_norm_on_skip: bool,
    /// Seed for the random initialization of every parameter that does not
    /// come from pretrained weights.
    pub init_seed: u64,
}

impl Default for UNet3dConfig {
    fn default() -> Self {
        UNet3dConfig {
            num_classes: 2,
            encoder_channels: [64, 64, 128, 256, 512],
            pretrained_weights_path: None,
            instance_norm_on_skip: true,
            init_seed: 0,
        }
    }
}

impl UNet3dConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.encoder_channels.iter().any(|&c| c < 4) {
            return Err(Error::Config(format!(
                "encoder channels must all be >= 4, got {:?}",
                self.encoder_channels
            )));
        }
        Ok(())
    }

    /// Channels leaving the last upscaling block.
    pub fn decoder_out_channels(&self) -> usize {
        (self.encoder_channels[0] / 2).max(2)
    }

    /// Channels of the full-resolution residual head.
    pub fn head_channels(&self) -> usize {
        (self.encoder_channels[0] / 4).max(2)
    }
}

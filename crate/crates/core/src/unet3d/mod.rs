//! Fully 3D U-Net with an 18-layer residual video encoder.

mod config;
mod decoder;
mod encoder;
mod model;
mod predict;
pub mod weights;

pub use config::UNet3dConfig;
pub use decoder::{Decoder, DecoderPlan};
pub use encoder::{Encoder, FeaturePyramid, PyramidShapes, STAGE_STRIDES, STEM_GEOM};
pub use model::{UNet3d, MIN_INPUT};
pub use predict::{predict_labels, predict_mask};
pub use weights::{CheckpointMeta, LoadReport};

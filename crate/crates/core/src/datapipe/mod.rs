//! NIfTI pairs to model-ready batches.

pub mod augment;
pub mod intensity;
pub mod resample;
pub mod source;
pub mod split;
pub mod stage;

pub use augment::{augment, AugmentationConfig, InPlaneTransform, ModelSample, SpatialDraw};
pub use intensity::{normalize_intensity, replicate_channels};
pub use resample::{resample_nearest, resample_pair, resample_trilinear};
pub use source::{assemble_batch, epoch_batches, load_study, prepare_sample, stream_rng, StudySource};
pub use split::{split_dataset, tune_size, DatasetSplit};
pub use stage::StageSpec;

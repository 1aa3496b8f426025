//! A small CPU tensor engine for volumetric networks.
//!
//! Activations are `(batch, channels, depth, height, width)` arrays in
//! standard layout. Every layer caches what it needs during a training
//! forward pass and implements its own backward pass; there is no tape.
//! Convolutions lower to `sgemm` over depth-chunked column buffers so peak
//! memory stays bounded for large inputs.

mod columns;
mod conv;
mod norm;
mod ops;
mod optim;
mod param;

pub use columns::ConvGeom;
pub use conv::{resolve_transposed_axis, Conv3d, ConvTranspose3d};
pub use norm::{BatchNorm3d, InstanceNorm3d};
pub use ops::{add_into, concat_channels, split_channels, Relu};
pub use optim::{zero_grad, AdamW, AdamWConfig};
pub(crate) use param::join as param_join;
pub use param::{Param, Slot, Visit};

/// Activation tensor, `(N, C, D, H, W)`.
pub type Tensor = ndarray::Array5<f32>;

/// Spatial extent `(D, H, W)` of a tensor.
pub fn spatial(t: &Tensor) -> [usize; 3] {
    let s = t.shape();
    [s[2], s[3], s[4]]
}

/// Whether a forward pass records state for a later backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers, caches kept.
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

impl Mode {
    pub fn caches(self) -> bool {
        self == Mode::Train
    }
}

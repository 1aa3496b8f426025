//! CT volumes and their label masks, axis order `(depth, height, width)`.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Lower and upper HU bounds applied at conversion time.
pub const HU_CLIP: (f32, f32) = (-2000.0, 500.0);

/// Voxel-to-world transform mapping `(i, j, k, 1)` with `i` along width,
/// `j` along height and `k` along depth to RAS millimetres.
pub type Affine = [[f64; 4]; 4];

pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    let [sd, sh, sw] = spacing;
    [
        [sw, 0.0, 0.0, 0.0],
        [0.0, sh, 0.0, 0.0],
        [0.0, 0.0, sd, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Length of each affine column, i.e. the voxel spacing `(D, H, W)`.
pub fn affine_spacing(a: &Affine) -> [f64; 3] {
    let col = |c: usize| (0..3).map(|r| a[r][c] * a[r][c]).sum::<f64>().sqrt();
    [col(2), col(1), col(0)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    /// Hounsfield units.
    pub voxels: Array3<f32>,
    /// Millimetres per voxel along `(D, H, W)`.
    pub spacing: [f64; 3],
    pub study_instance_uid: String,
    /// SOP instance UIDs in slice order; empty for volumes not built from
    /// DICOM.
    pub slice_order: Vec<String>,
    pub affine: Affine,
}

impl CtVolume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3], study: impl Into<String>) -> Self {
        CtVolume {
            voxels,
            affine: diagonal_affine(spacing),
            spacing,
            study_instance_uid: study.into(),
            slice_order: Vec::new(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    /// Clamps every voxel into `[lo, hi]`.
    pub fn clip(&mut self, lo: f32, hi: f32) {
        self.voxels.mapv_inplace(|v| v.clamp(lo, hi));
    }
}

/// Binary infiltrate mask aligned with a [`CtVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub voxels: Array3<u8>,
    pub spacing: [f64; 3],
}

impl LabelMask {
    pub fn new(voxels: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        if let Some(v) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not 0 or 1")));
        }
        Ok(LabelMask { voxels, spacing })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        LabelMask {
            voxels: Array3::zeros(shape),
            spacing,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn positive_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }
}

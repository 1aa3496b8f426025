use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::volume::HU_CLIP;

/// Maps the clip window `[-2000, 500]` HU linearly onto `[0, 1]`.
pub fn normalize_intensity(hu: ArrayView3<f32>) -> Result<Array3<f32>> {
    let (lo, hi) = HU_CLIP;
    if let Some(v) = hu.iter().find(|&&v| !(lo..=hi).contains(&v)) {
        return Err(Error::OutOfRange(format!(
            "value {v} HU lies outside [{lo}, {hi}]; the volume was not clipped"
        )));
    }
    Ok(hu.mapv(|v| (v - lo) / (hi - lo)))
}

/// Stacks three copies of a volume on a leading channel axis.
pub fn replicate_channels(image: ArrayView3<f32>) -> Array4<f32> {
    let img = image.insert_axis(Axis(0));
    ndarray::concatenate(Axis(0), &[img, img, img]).expect("equal shapes")
}

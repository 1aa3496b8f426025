use ndarray::{Array3, Array4, Axis};

use crate::datapipe::resample::resample_nearest;
use crate::datapipe::source::{prepare_sample, single_batch};
use crate::datapipe::StageSpec;
use crate::error::Result;
use crate::losses::argmax_labels;
use crate::nn::Mode;
use crate::volume::{CtVolume, LabelMask};

use super::model::UNet3d;

/// Class map `(D, H, W)` of one prepared `(3, D, H, W)` image.
pub fn predict_labels(model: &mut UNet3d, image: &Array4<f32>) -> Result<Array3<u8>> {
    let scores = model.forward(&single_batch(image), Mode::Eval)?;
    Ok(argmax_labels(&scores).index_axis_move(Axis(0), 0))
}

/// Segments a volume at stage resolution and maps the class map back to
/// the native grid by nearest neighbour. Classes other than 0 count as
/// foreground.
pub fn predict_mask(model: &mut UNet3d, volume: &CtVolume, stage: &StageSpec) -> Result<LabelMask> {
    let empty = LabelMask::zeros(volume.shape(), volume.spacing);
    let sample = prepare_sample(volume, &empty, stage)?;
    let labels = predict_labels(model, &sample.image)?;
    let native = resample_nearest(labels.view(), volume.shape())?;
    Ok(LabelMask {
        voxels: native.mapv(|c| u8::from(c != 0)),
        spacing: volume.spacing,
    })
}

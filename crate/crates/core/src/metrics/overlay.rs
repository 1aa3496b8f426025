use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::volume::{CtVolume, LabelMask};

/// Lung window centre and width in HU.
pub const LUNG_WINDOW: (f32, f32) = (-600.0, 1500.0);

pub const GT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
/// Pixels on both contours.
pub const SHARED_COLOR: Rgb<u8> = Rgb([255, 255, 0]);

/// Foreground pixels with a 4-connected neighbour that is background or
/// outside the slice.
pub fn contour_2d(mask: ArrayView2<u8>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] != 0
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (yi, xi) = (y as isize, x as isize);
        mask[[y, x]] != 0
            && !(fg(yi - 1, xi) && fg(yi + 1, xi) && fg(yi, xi - 1) && fg(yi, xi + 1))
    })
}

/// Windowed grey value of a HU sample.
pub fn window_gray(hu: f32) -> u8 {
    let (level, width) = LUNG_WINDOW;
    let lo = level - width / 2.0;
    (((hu - lo) / width).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A rendered slice and the contour pixel sets drawn onto it.
#[derive(Debug, Clone)]
pub struct Overlay {
    pub image: RgbImage,
    pub gt_contour: Array2<bool>,
    pub pred_contour: Array2<bool>,
}

pub fn overlay_slice(
    volume: &CtVolume,
    gt: &LabelMask,
    pred: &LabelMask,
    slice_index: usize,
) -> Result<Overlay> {
    if gt.shape() != volume.shape() || pred.shape() != volume.shape() {
        return Err(Error::Shape(format!(
            "volume {:?}, ground truth {:?} and prediction {:?} must share a shape",
            volume.shape(),
            gt.shape(),
            pred.shape()
        )));
    }
    let depth = volume.shape()[0];
    if slice_index >= depth {
        return Err(Error::OutOfRange(format!(
            "slice {slice_index} outside a volume of {depth} slices"
        )));
    }
    let ct = volume.voxels.index_axis(Axis(0), slice_index);
    let gt_contour = contour_2d(gt.voxels.index_axis(Axis(0), slice_index));
    let pred_contour = contour_2d(pred.voxels.index_axis(Axis(0), slice_index));
    let (h, w) = ct.dim();
    let image = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        match (gt_contour[[y, x]], pred_contour[[y, x]]) {
            (true, true) => SHARED_COLOR,
            (true, false) => GT_COLOR,
            (false, true) => PRED_COLOR,
            (false, false) => {
                let g = window_gray(ct[[y, x]]);
                Rgb([g, g, g])
            }
        }
    });
    Ok(Overlay {
        image,
        gt_contour,
        pred_contour,
    })
}

/// Writes the overlay of one slice as PNG.
pub fn render_overlay(
    volume: &CtVolume,
    gt: &LabelMask,
    pred: &LabelMask,
    slice_index: usize,
    path: &Path,
) -> Result<()> {
    let o = overlay_slice(volume, gt, pred, slice_index)?;
    o.image.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// `k` slice indices spread evenly over `depth` slices.
pub fn evenly_spaced_slices(depth: usize, k: usize) -> Vec<usize> {
    if depth == 0 {
        return Vec::new();
    }
    (0..k.min(depth))
        .map(|i| ((2 * i + 1) * depth) / (2 * k.min(depth)))
        .collect()
}

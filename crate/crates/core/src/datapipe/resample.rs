//! Whole-volume resizing. Output voxel `o` along an axis of input length `n`
//! and output length `m` samples the source at `(o + 0.5)·n/m − 0.5`
//! (voxel centres aligned), clamped to the grid.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::volume::{CtVolume, LabelMask};

use super::stage::StageSpec;

fn check(shape: &[usize], out: [usize; 3]) -> Result<()> {
    if let Some(a) = shape.iter().position(|&n| n < 2) {
        return Err(Error::Shape(format!(
            "cannot resample: axis {a} of input {shape:?} has fewer than 2 voxels"
        )));
    }
    if out.contains(&0) {
        return Err(Error::Shape(format!("empty resample target {out:?}")));
    }
    Ok(())
}

/// Source coordinate of output index `o`.
pub fn source_coord(o: usize, n: usize, m: usize) -> f64 {
    ((o as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64)
}

/// Nearest source index of output index `o`.
pub fn nearest_index(o: usize, n: usize, m: usize) -> usize {
    (((o as f64 + 0.5) * n as f64 / m as f64).floor() as usize).min(n - 1)
}

struct Taps {
    lo: Vec<usize>,
    frac: Vec<f32>,
}

fn taps(n: usize, m: usize) -> Taps {
    let mut lo = Vec::with_capacity(m);
    let mut frac = Vec::with_capacity(m);
    for o in 0..m {
        let s = source_coord(o, n, m);
        let i = (s.floor() as usize).min(n - 2);
        lo.push(i);
        frac.push((s - i as f64) as f32);
    }
    Taps { lo, frac }
}

/// Trilinear resize to `out` = `(D, H, W)`.
pub fn resample_trilinear(src: ArrayView3<f32>, out: [usize; 3]) -> Result<Array3<f32>> {
    check(src.shape(), out)?;
    let (n0, n1, n2) = src.dim();
    let (t0, t1, t2) = (taps(n0, out[0]), taps(n1, out[1]), taps(n2, out[2]));
    Ok(Array3::from_shape_fn(out, |(d, h, w)| {
        let (i, j, k) = (t0.lo[d], t1.lo[h], t2.lo[w]);
        let (fd, fh, fw) = (t0.frac[d], t1.frac[h], t2.frac[w]);
        let lerp = |a: f32, b: f32, t: f32| a * (1.0 - t) + b * t;
        let plane = |i: usize| {
            let r0 = lerp(src[[i, j, k]], src[[i, j, k + 1]], fw);
            let r1 = lerp(src[[i, j + 1, k]], src[[i, j + 1, k + 1]], fw);
            lerp(r0, r1, fh)
        };
        lerp(plane(i), plane(i + 1), fd)
    }))
}

/// Nearest-neighbour resize to `out`.
pub fn resample_nearest<T: Copy>(src: ArrayView3<T>, out: [usize; 3]) -> Result<Array3<T>> {
    check(src.shape(), out)?;
    let (n0, n1, n2) = src.dim();
    let i0: Vec<usize> = (0..out[0]).map(|o| nearest_index(o, n0, out[0])).collect();
    let i1: Vec<usize> = (0..out[1]).map(|o| nearest_index(o, n1, out[1])).collect();
    let i2: Vec<usize> = (0..out[2]).map(|o| nearest_index(o, n2, out[2])).collect();
    Ok(Array3::from_shape_fn(out, |(d, h, w)| src[[i0[d], i1[h], i2[w]]]))
}

/// Resizes an aligned volume/mask pair to the stage extent.
pub fn resample_pair(volume: &CtVolume, mask: &LabelMask, spec: &StageSpec) -> Result<(Array3<f32>, Array3<u8>)> {
    if volume.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "volume {:?} and mask {:?} are not aligned",
            volume.shape(),
            mask.shape()
        )));
    }
    Ok((
        resample_trilinear(volume.voxels.view(), spec.shape())?,
        resample_nearest(mask.voxels.view(), spec.shape())?,
    ))
}

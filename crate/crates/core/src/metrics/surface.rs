use ndarray::{Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Boundary voxels of a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    /// `(d, h, w)` indices in raster order.
    pub voxels: Vec<[usize; 3]>,
    /// Millimetres per voxel along `(D, H, W)`.
    pub spacing: [f64; 3],
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Physical voxel-center positions in millimetres.
    pub fn positions_mm(&self) -> Vec<[f64; 3]> {
        self.voxels
            .iter()
            .map(|v| std::array::from_fn(|a| v[a] as f64 * self.spacing[a]))
            .collect()
    }
}

/// Foreground voxels with at least one six-connected neighbour that is
/// background or outside the volume.
pub fn surface_mask(mask: ArrayView3<u8>) -> Array3<bool> {
    let (d, h, w) = mask.dim();
    let fg = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[[z as usize, y as usize, x as usize]] != 0
    };
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if mask[[z, y, x]] == 0 {
            return false;
        }
        let (z, y, x) = (z as isize, y as isize, x as isize);
        !(fg(z - 1, y, x)
            && fg(z + 1, y, x)
            && fg(z, y - 1, x)
            && fg(z, y + 1, x)
            && fg(z, y, x - 1)
            && fg(z, y, x + 1))
    })
}

pub fn extract_surface(mask: ArrayView3<u8>, spacing: [f64; 3]) -> SurfaceSet {
    let voxels = surface_mask(mask)
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|((z, y, x), _)| [z, y, x])
        .collect();
    SurfaceSet { voxels, spacing }
}

/// One-dimensional squared distance transform of a sampled function with
/// sample spacing `s` (lower envelope of parabolas). Infinite samples are
/// not sites.
fn dt1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let s2 = s * s;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let inter = ((fq + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            if inter <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(inter);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `true` voxel of `sites`, honouring anisotropic spacing. Voxels are
/// infinitely far when there are no sites. Axes are processed in the order
/// width, height, depth.
pub fn squared_edt(sites: ArrayView3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut g = sites.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    let longest = *g.shape().iter().max().unwrap_or(&0);
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest));
    let mut buf = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    for axis in [2, 1, 0] {
        let n = g.shape()[axis];
        for mut lane in g.lanes_mut(Axis(axis)) {
            for (b, x) in buf.iter_mut().zip(lane.iter()) {
                *b = *x;
            }
            dt1d(&buf[..n], spacing[axis], &mut out[..n], &mut v, &mut z);
            for (x, o) in lane.iter_mut().zip(out.iter()) {
                *x = *o;
            }
        }
    }
    g
}

fn check_pair(a: &ArrayView3<u8>, b: &ArrayView3<u8>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Fraction of both surfaces lying within `tolerance_mm` of the other
/// surface. Both surfaces empty gives 1, exactly one empty gives 0.
pub fn normalized_surface_dice(
    pred: ArrayView3<u8>,
    gt: ArrayView3<u8>,
    spacing: [f64; 3],
    tolerance_mm: f64,
) -> Result<f64> {
    check_pair(&pred, &gt)?;
    if !(tolerance_mm > 0.0 && tolerance_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive and finite, got {tolerance_mm}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("invalid spacing {spacing:?}")));
    }
    let sp = surface_mask(pred);
    let sg = surface_mask(gt);
    let np = sp.iter().filter(|&&b| b).count();
    let ng = sg.iter().filter(|&&b| b).count();
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let tau2 = tolerance_mm * tolerance_mm;
    let within = |from: &Array3<bool>, to: &Array3<bool>| -> usize {
        let dist = squared_edt(to.view(), spacing);
        from.iter()
            .zip(dist.iter())
            .filter(|(&b, &d)| b && d <= tau2)
            .count()
    };
    let hits = within(&sp, &sg) + within(&sg, &sp);
    Ok(hits as f64 / (np + ng) as f64)
}

//! Training-time augmentation. Spatial transforms act in-plane (identical
//! on every slice) and on image and mask alike; photometric transforms act
//! on the image only.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image `(3, D, H, W)` and mask `(D, H, W)` of one study at stage
/// resolution, plus what is needed to map predictions back.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSample {
    pub image: Array4<f32>,
    pub mask: Array3<u8>,
    pub study_id: String,
    pub native_shape: [usize; 3],
    pub native_spacing: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perspective {
    pub enabled: bool,
    pub p: f64,
    /// Maximum corner displacement as a fraction of the in-plane extent.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rotation {
    pub enabled: bool,
    pub p: f64,
    pub max_degrees: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mirror {
    pub enabled: bool,
    /// Per-axis flip probability.
    pub p: f64,
    /// Axes `(D, H, W)` that may be flipped.
    pub axes: [bool; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastBrightness {
    pub enabled: bool,
    pub p: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
    /// Offset drawn from `[-brightness, brightness]` in normalized units.
    pub brightness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Noise {
    pub enabled: bool,
    pub p: f64,
    /// Standard deviation in normalized intensity.
    pub sigma: f64,
}

impl Default for Perspective {
    fn default() -> Self {
        Perspective {
            enabled: true,
            p: 0.5,
            magnitude: 0.1,
        }
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation {
            enabled: true,
            p: 0.5,
            max_degrees: 15.0,
        }
    }
}

impl Default for Mirror {
    fn default() -> Self {
        Mirror {
            enabled: true,
            p: 0.5,
            axes: [false, false, true],
        }
    }
}

impl Default for ContrastBrightness {
    fn default() -> Self {
        ContrastBrightness {
            enabled: true,
            p: 0.5,
            contrast: 0.2,
            brightness: 0.2,
        }
    }
}

impl Default for Noise {
    fn default() -> Self {
        Noise {
            enabled: true,
            p: 0.5,
            sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub perspective: Perspective,
    pub rotation: Rotation,
    pub mirror: Mirror,
    pub contrast_brightness: ContrastBrightness,
    pub noise: Noise,
}

impl AugmentationConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.perspective.enabled = false;
        c.rotation.enabled = false;
        c.mirror.enabled = false;
        c.contrast_brightness.enabled = false;
        c.noise.enabled = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("perspective.p", self.perspective.p),
            ("rotation.p", self.rotation.p),
            ("mirror.p", self.mirror.p),
            ("contrast_brightness.p", self.contrast_brightness.p),
            ("noise.p", self.noise.p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation {name} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("perspective.magnitude", self.perspective.magnitude, 0.5),
            ("rotation.max_degrees", self.rotation.max_degrees, 180.0),
            ("contrast_brightness.contrast", self.contrast_brightness.contrast, 1.0),
            ("contrast_brightness.brightness", self.contrast_brightness.brightness, f64::MAX),
            ("noise.sigma", self.noise.sigma, f64::MAX),
        ];
        for (name, v, max) in ranges {
            if !v.is_finite() || v < 0.0 || v > max {
                return Err(Error::Config(format!("augmentation {name} = {v} is outside [0, {max}]")));
            }
        }
        Ok(())
    }
}

/// In-plane projective map from output pixel `(x, y)` = (w, h) to the
/// source position sampled there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InPlaneTransform {
    pub out_to_src: Matrix3<f64>,
}

impl InPlaneTransform {
    pub fn identity() -> Self {
        InPlaneTransform {
            out_to_src: Matrix3::identity(),
        }
    }

    fn centre(h: usize, w: usize) -> (f64, f64) {
        ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
    }

    /// Content rotates by `degrees` about the slice centre: a source point
    /// at offset `(x, y)` from the centre moves to
    /// `(x cos θ − y sin θ, x sin θ + y cos θ)`.
    pub fn rotation(degrees: f64, h: usize, w: usize) -> Self {
        let (cx, cy) = Self::centre(h, w);
        let t = degrees.to_radians();
        let (s, c) = t.sin_cos();
        let to_origin = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        let back = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        // Inverse rotation, since this maps output to source.
        let rot = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        InPlaneTransform {
            out_to_src: back * rot * to_origin,
        }
    }

    /// The projective map sending each `dst[i]` to `src[i]`.
    pub fn from_correspondences(dst: [[f64; 2]; 4], src: [[f64; 2]; 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let ([x, y], [u, v]) = (dst[i], src[i]);
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InvalidArgument("degenerate point correspondences".into()))?;
        Ok(InPlaneTransform {
            out_to_src: Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0),
        })
    }

    /// Random corner displacement of up to `magnitude` of the extent.
    pub fn random_perspective(magnitude: f64, h: usize, w: usize, rng: &mut impl Rng) -> Result<Self> {
        let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
        let corners = [[0.0, 0.0], [xm, 0.0], [xm, ym], [0.0, ym]];
        let mut moved = corners;
        for c in &mut moved {
            c[0] += rng.random_range(-magnitude..=magnitude) * xm;
            c[1] += rng.random_range(-magnitude..=magnitude) * ym;
        }
        Self::from_correspondences(corners, moved)
    }

    /// Applies `self` after `first`: the output of `first` is the source
    /// of `self`.
    pub fn then(&self, first: &InPlaneTransform) -> Self {
        InPlaneTransform {
            out_to_src: first.out_to_src * self.out_to_src,
        }
    }

    pub fn source_of(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.out_to_src * Vector3::new(x, y, 1.0);
        (p[2].abs() > 1e-12).then(|| (p[0] / p[2], p[1] / p[2]))
    }

    pub fn is_identity(&self) -> bool {
        self.out_to_src == Matrix3::identity()
    }
}

/// Bilinear in-plane warp of every slice, replicating the border.
pub fn warp_image(src: ArrayView3<f32>, t: &InPlaneTransform) -> Array3<f32> {
    if t.is_identity() {
        return src.to_owned();
    }
    let (d, h, w) = src.dim();
    let mut out = Array3::<f32>::zeros((d, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source_of(x as f64, y as f64).unwrap_or((f64::NAN, f64::NAN));
            let sx = if sx.is_finite() { sx.clamp(0.0, (w - 1) as f64) } else { 0.0 };
            let sy = if sy.is_finite() { sy.clamp(0.0, (h - 1) as f64) } else { 0.0 };
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for k in 0..d {
                let top = src[[k, y0, x0]] * (1.0 - fx) + src[[k, y0, x1]] * fx;
                let bot = src[[k, y1, x0]] * (1.0 - fx) + src[[k, y1, x1]] * fx;
                out[[k, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour in-plane warp; positions outside the slice become 0.
pub fn warp_mask(src: ArrayView3<u8>, t: &InPlaneTransform) -> Array3<u8> {
    if t.is_identity() {
        return src.to_owned();
    }
    let (d, h, w) = src.dim();
    let mut out = Array3::<u8>::zeros((d, h, w));
    for y in 0..h {
        for x in 0..w {
            let Some((sx, sy)) = t.source_of(x as f64, y as f64) else {
                continue;
            };
            let (rx, ry) = (sx.round(), sy.round());
            if rx < 0.0 || ry < 0.0 || rx > (w - 1) as f64 || ry > (h - 1) as f64 {
                continue;
            }
            for k in 0..d {
                out[[k, y, x]] = src[[k, ry as usize, rx as usize]];
            }
        }
    }
    out
}

/// Spatial part of an augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialDraw {
    pub warp: InPlaneTransform,
    /// Flips along `(D, H, W)`, applied after the warp.
    pub flips: [bool; 3],
}

impl SpatialDraw {
    pub fn identity() -> Self {
        SpatialDraw {
            warp: InPlaneTransform::identity(),
            flips: [false; 3],
        }
    }

    pub fn apply_image(&self, img: ArrayView3<f32>) -> Array3<f32> {
        let mut out = warp_image(img, &self.warp);
        for (a, &f) in self.flips.iter().enumerate() {
            if f {
                out.invert_axis(Axis(a));
            }
        }
        out.as_standard_layout().into_owned()
    }

    pub fn apply_mask(&self, mask: ArrayView3<u8>) -> Array3<u8> {
        let mut out = warp_mask(mask, &self.warp);
        for (a, &f) in self.flips.iter().enumerate() {
            if f {
                out.invert_axis(Axis(a));
            }
        }
        out.as_standard_layout().into_owned()
    }
}

fn coin(p: f64, rng: &mut impl Rng) -> bool {
    p > 0.0 && rng.random_bool(p.min(1.0))
}

/// Draws the spatial transform for a slice extent `(h, w)`.
pub fn draw_spatial(cfg: &AugmentationConfig, h: usize, w: usize, rng: &mut impl Rng) -> Result<SpatialDraw> {
    let mut warp = InPlaneTransform::identity();
    if cfg.rotation.enabled && coin(cfg.rotation.p, rng) {
        let m = cfg.rotation.max_degrees;
        let deg = rng.random_range(-m..=m);
        warp = InPlaneTransform::rotation(deg, h, w);
    }
    if cfg.perspective.enabled && coin(cfg.perspective.p, rng) {
        let p = InPlaneTransform::random_perspective(cfg.perspective.magnitude, h, w, rng)?;
        warp = p.then(&warp);
    }
    let mut flips = [false; 3];
    if cfg.mirror.enabled {
        for (a, f) in flips.iter_mut().enumerate() {
            *f = cfg.mirror.axes[a] && coin(cfg.mirror.p, rng);
        }
    }
    Ok(SpatialDraw { warp, flips })
}

/// Augments one sample. Deterministic for a given `rng` state.
pub fn augment(sample: &ModelSample, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<ModelSample> {
    let (c, d, h, w) = sample.image.dim();
    if sample.mask.dim() != (d, h, w) {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ",
            sample.image.dim(),
            sample.mask.dim()
        )));
    }
    let spatial = draw_spatial(cfg, h, w, rng)?;
    let mut image = Array4::<f32>::zeros((c, d, h, w));
    for ch in 0..c {
        image
            .index_axis_mut(Axis(0), ch)
            .assign(&spatial.apply_image(sample.image.index_axis(Axis(0), ch)));
    }
    let mask = spatial.apply_mask(sample.mask.view());
    let cb = &cfg.contrast_brightness;
    if cb.enabled && coin(cb.p, rng) {
        let k = rng.random_range(1.0 - cb.contrast..=1.0 + cb.contrast) as f32;
        let b = rng.random_range(-cb.brightness..=cb.brightness) as f32;
        image.mapv_inplace(|v| (k * v + b).clamp(0.0, 1.0));
    }
    if cfg.noise.enabled && cfg.noise.sigma > 0.0 && coin(cfg.noise.p, rng) {
        let n = Normal::new(0.0f32, cfg.noise.sigma as f32).map_err(|e| Error::Config(e.to_string()))?;
        image.mapv_inplace(|v| v + n.sample(rng));
    }
    Ok(ModelSample {
        image,
        mask,
        study_id: sample.study_id.clone(),
        native_shape: sample.native_shape,
        native_spacing: sample.native_spacing,
    })
}

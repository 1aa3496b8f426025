//! Synthetic fixtures: DICOM series, annotation exports and sphere phantoms.
//! Used by the test suites and by `ctseg` smoke runs.

use std::path::{Path, PathBuf};

use dicom_core::{DataElement, PrimitiveValue, VR};
use dicom_dictionary_std::{tags, uids};
use dicom_object::{FileMetaTableBuilder, InMemDicomObject};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::ingest::manifest::{Manifest, ManifestEntry};
use crate::ingest::nifti_io::write_nifti_pair;
use crate::volume::{CtVolume, LabelMask};

/// Geometry and tags of a synthetic CT series.
#[derive(Debug, Clone)]
pub struct SeriesSpec {
    pub study_uid: String,
    pub series_uid: String,
    pub rows: usize,
    pub cols: usize,
    /// Row spacing, column spacing in mm.
    pub pixel_spacing: (f64, f64),
    pub slice_spacing: f64,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    /// Stored values are signed 16-bit when set, else unsigned.
    pub signed: bool,
    pub write_rescale: bool,
    pub write_position: bool,
    /// Instance number of each slice, in anatomical order.
    pub instance_numbers: Vec<i64>,
}

impl SeriesSpec {
    pub fn new(study_uid: &str, series_uid: &str, slices: usize, rows: usize, cols: usize) -> Self {
        SeriesSpec {
            study_uid: study_uid.into(),
            series_uid: series_uid.into(),
            rows,
            cols,
            pixel_spacing: (0.7, 0.7),
            slice_spacing: 5.0,
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
            signed: false,
            write_rescale: true,
            write_position: true,
            instance_numbers: (1..=slices as i64).collect(),
        }
    }

    pub fn sop_uid(&self, k: usize) -> String {
        format!("{}.{}", self.series_uid, k + 1)
    }
}

fn ds(v: f64) -> String {
    let s = format!("{v}");
    if s.len() > 16 {
        format!("{v:.6}")
    } else {
        s
    }
}

fn ds_multi(vals: &[f64]) -> PrimitiveValue {
    PrimitiveValue::Strs(vals.iter().map(|&v| ds(v)).collect())
}

/// Writes one Part-10 file per slice into `dir` (explicit VR little endian)
/// and returns the SOP instance UIDs in anatomical order. File names do
/// not follow slice order.
pub fn write_dicom_series(dir: &Path, spec: &SeriesSpec, stored: &[Array2<i32>]) -> Result<Vec<String>> {
    if stored.len() != spec.instance_numbers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} slices but {} instance numbers",
            stored.len(),
            spec.instance_numbers.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut sops = Vec::new();
    for (k, px) in stored.iter().enumerate() {
        if px.dim() != (spec.rows, spec.cols) {
            return Err(Error::Shape(format!("slice {k} is {:?}, expected {:?}", px.dim(), (spec.rows, spec.cols))));
        }
        let sop = spec.sop_uid(k);
        let mut obj = InMemDicomObject::new_empty();
        let mut put = |tag, vr, value: PrimitiveValue| {
            obj.put(DataElement::new(tag, vr, value));
        };
        put(tags::SOP_CLASS_UID, VR::UI, uids::CT_IMAGE_STORAGE.into());
        put(tags::SOP_INSTANCE_UID, VR::UI, sop.as_str().into());
        put(tags::STUDY_INSTANCE_UID, VR::UI, spec.study_uid.as_str().into());
        put(tags::SERIES_INSTANCE_UID, VR::UI, spec.series_uid.as_str().into());
        put(tags::MODALITY, VR::CS, "CT".into());
        put(tags::INSTANCE_NUMBER, VR::IS, spec.instance_numbers[k].to_string().into());
        put(tags::ROWS, VR::US, PrimitiveValue::from(spec.rows as u16));
        put(tags::COLUMNS, VR::US, PrimitiveValue::from(spec.cols as u16));
        put(tags::PIXEL_SPACING, VR::DS, ds_multi(&[spec.pixel_spacing.0, spec.pixel_spacing.1]));
        put(tags::SLICE_THICKNESS, VR::DS, ds(spec.slice_spacing).into());
        if spec.write_position {
            put(tags::IMAGE_POSITION_PATIENT, VR::DS, ds_multi(&[0.0, 0.0, k as f64 * spec.slice_spacing]));
            put(tags::IMAGE_ORIENTATION_PATIENT, VR::DS, ds_multi(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        }
        if spec.write_rescale {
            put(tags::RESCALE_SLOPE, VR::DS, ds(spec.rescale_slope).into());
            put(tags::RESCALE_INTERCEPT, VR::DS, ds(spec.rescale_intercept).into());
        }
        put(tags::SAMPLES_PER_PIXEL, VR::US, PrimitiveValue::from(1u16));
        put(tags::PHOTOMETRIC_INTERPRETATION, VR::CS, "MONOCHROME2".into());
        put(tags::BITS_ALLOCATED, VR::US, PrimitiveValue::from(16u16));
        put(tags::BITS_STORED, VR::US, PrimitiveValue::from(16u16));
        put(tags::HIGH_BIT, VR::US, PrimitiveValue::from(15u16));
        put(tags::PIXEL_REPRESENTATION, VR::US, PrimitiveValue::from(u16::from(spec.signed)));
        let mut bytes = Vec::with_capacity(px.len() * 2);
        for &v in px.iter() {
            let raw = if spec.signed {
                i16::try_from(v).map(|x| x as u16)
            } else {
                u16::try_from(v)
            }
            .map_err(|_| Error::OutOfRange(format!("stored value {v} does not fit 16 bits")))?;
            bytes.extend_from_slice(&raw.to_le_bytes());
        }
        put(tags::PIXEL_DATA, VR::OW, PrimitiveValue::from(bytes));
        let file = obj
            .with_meta(FileMetaTableBuilder::new().transfer_syntax(uids::EXPLICIT_VR_LITTLE_ENDIAN))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        // Reverse file naming so directory order is not slice order.
        let path = dir.join(format!("img{:04}.dcm", stored.len() - k));
        file.write_to_file(&path)
            .map_err(|e| Error::InvalidDicom {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        sops.push(sop);
    }
    Ok(sops)
}

/// One polygon annotation record in the default export layout.
pub fn annotation_record(study: &str, sop: &str, annotator: &str, vertices: &[[f64; 2]]) -> Value {
    json!({
        "StudyInstanceUID": study,
        "SOPInstanceUID": sop,
        "createdById": annotator,
        "labelId": "L_infiltrate",
        "data": { "vertices": vertices },
    })
}

/// Wraps records into a document matching the default schema.
pub fn annotation_export(records: Vec<Value>) -> Value {
    json!({ "datasets": [ { "id": "D_synthetic", "annotations": records } ] })
}

/// A sphere of tissue-like HU inside lung-like background.
#[derive(Debug, Clone, Copy)]
pub struct Sphere {
    /// Centre `(d, h, w)` in voxels.
    pub center: [f64; 3],
    /// Radius in mm.
    pub radius_mm: f64,
}

pub const BACKGROUND_HU: f32 = -800.0;
pub const LESION_HU: f32 = -100.0;

/// Volume and mask of spheres with voxel spacing `spacing` (D, H, W).
/// `noise_hu` adds uniform noise of that amplitude.
pub fn sphere_phantom(
    study: &str,
    shape: [usize; 3],
    spacing: [f64; 3],
    spheres: &[Sphere],
    noise_hu: f32,
    seed: u64,
) -> (CtVolume, LabelMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array3::<u8>::zeros(shape);
    for ((d, h, w), m) in mask.indexed_iter_mut() {
        let inside = spheres.iter().any(|s| {
            let dz = (d as f64 - s.center[0]) * spacing[0];
            let dy = (h as f64 - s.center[1]) * spacing[1];
            let dx = (w as f64 - s.center[2]) * spacing[2];
            dz * dz + dy * dy + dx * dx <= s.radius_mm * s.radius_mm
        });
        *m = u8::from(inside);
    }
    let voxels = mask.mapv(|m| {
        let base = if m == 1 { LESION_HU } else { BACKGROUND_HU };
        let n = if noise_hu > 0.0 { rng.random_range(-noise_hu..=noise_hu) } else { 0.0 };
        base + n
    });
    (
        CtVolume::new(voxels, spacing, study),
        LabelMask {
            voxels: mask,
            spacing,
        },
    )
}

/// A random single-sphere phantom whose sphere lies fully inside the grid.
pub fn random_phantom(study: &str, shape: [usize; 3], spacing: [f64; 3], rng: &mut impl Rng) -> (CtVolume, LabelMask) {
    let min_extent = (0..3).map(|a| shape[a] as f64 * spacing[a]).fold(f64::INFINITY, f64::min);
    let radius = rng.random_range(0.2..0.35) * min_extent;
    let center = std::array::from_fn(|a| {
        let r_vox = radius / spacing[a];
        let lo = r_vox;
        let hi = (shape[a] as f64 - 1.0 - r_vox).max(lo + 1e-9);
        rng.random_range(lo..hi)
    });
    let seed = rng.random();
    sphere_phantom(
        study,
        shape,
        spacing,
        &[Sphere {
            center,
            radius_mm: radius,
        }],
        30.0,
        seed,
    )
}

/// Writes `n` random phantoms as NIfTI pairs plus `manifest.json` into
/// `dir` and returns the manifest path.
pub fn write_phantom_dataset(dir: &Path, name: &str, n: usize, shape: [usize; 3], spacing: [f64; 3], seed: u64) -> Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest {
        dataset: name.into(),
        entries: Vec::new(),
        base_dir: dir.to_path_buf(),
    };
    for i in 0..n {
        let study = format!("phantom{i:03}");
        let (vol, mask) = random_phantom(&study, shape, spacing, &mut rng);
        let (ct, seg) = write_nifti_pair(&vol, &mask, dir)?;
        manifest.entries.push(ManifestEntry {
            study_id: study,
            ct_path: ct,
            seg_path: seg,
            shape,
            spacing,
            positive_voxels: mask.positive_count() as u64,
            annotator: None,
        });
    }
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

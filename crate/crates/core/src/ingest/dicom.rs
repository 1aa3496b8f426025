//! Reading single-series CT directories of DICOM Part-10 files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dicom_dictionary_std::tags;
use dicom_object::{open_file, DefaultDicomObject};
use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::volume::{Affine, CtVolume};

/// Uncompressed transfer syntaxes whose pixel data is little-endian.
const NATIVE_SYNTAXES: [&str; 3] = [
    "1.2.840.10008.1.2",
    "1.2.840.10008.1.2.1",
    "1.2.840.10008.1.2.1.99",
];

/// Per-slice metadata needed to rebuild the volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomSliceMeta {
    pub study_instance_uid: String,
    pub sop_instance_uid: String,
    pub series_instance_uid: String,
    pub instance_number: i64,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    /// Row spacing (between rows) and column spacing, in mm.
    pub pixel_spacing: (f64, f64),
    /// Spacing between slices, else slice thickness, in mm.
    pub slice_thickness_or_spacing: f64,
    pub rows: usize,
    pub cols: usize,
    pub image_position_patient: Option<[f64; 3]>,
    pub image_orientation_patient: Option<[f64; 6]>,
}

/// Slices of one series in anatomical order with their stored pixel values.
#[derive(Debug, Clone)]
pub struct DicomSeries {
    pub slices: Vec<DicomSliceMeta>,
    pub pixels: Vec<Array2<i32>>,
}

fn invalid(path: &Path, reason: impl Into<String>) -> Error {
    Error::InvalidDicom {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn text(obj: &DefaultDicomObject, tag: dicom_core::Tag, name: &'static str, path: &Path) -> Result<String> {
    let e = obj
        .element_opt(tag)
        .map_err(|e| invalid(path, e.to_string()))?
        .ok_or_else(|| Error::MissingTag {
            tag: name,
            path: path.to_path_buf(),
        })?;
    let s = e.to_str().map_err(|e| invalid(path, format!("{name}: {e}")))?;
    Ok(s.trim_end_matches(['\0', ' ']).trim().to_string())
}

fn floats(obj: &DefaultDicomObject, tag: dicom_core::Tag, name: &'static str, path: &Path) -> Result<Option<Vec<f64>>> {
    match obj.element_opt(tag).map_err(|e| invalid(path, e.to_string()))? {
        None => Ok(None),
        Some(e) => e
            .to_multi_float64()
            .map(Some)
            .map_err(|e| invalid(path, format!("{name}: {e}"))),
    }
}

fn required_float(obj: &DefaultDicomObject, tag: dicom_core::Tag, name: &'static str, path: &Path) -> Result<f64> {
    floats(obj, tag, name, path)?
        .and_then(|v| v.first().copied())
        .ok_or_else(|| Error::MissingTag {
            tag: name,
            path: path.to_path_buf(),
        })
}

fn optional_float(obj: &DefaultDicomObject, tag: dicom_core::Tag, name: &'static str, path: &Path) -> Result<Option<f64>> {
    Ok(floats(obj, tag, name, path)?.and_then(|v| v.first().copied()))
}

fn integer(obj: &DefaultDicomObject, tag: dicom_core::Tag, name: &'static str, path: &Path) -> Result<Option<i64>> {
    match obj.element_opt(tag).map_err(|e| invalid(path, e.to_string()))? {
        None => Ok(None),
        Some(e) => e
            .to_int::<i64>()
            .map(Some)
            .map_err(|e| invalid(path, format!("{name}: {e}"))),
    }
}

fn fixed<const N: usize>(v: Option<Vec<f64>>, name: &str, path: &Path) -> Result<Option<[f64; N]>> {
    match v {
        None => Ok(None),
        Some(v) => v
            .try_into()
            .map(Some)
            .map_err(|v: Vec<f64>| invalid(path, format!("{name} has {} values, expected {N}", v.len()))),
    }
}

fn read_meta(obj: &DefaultDicomObject, path: &Path) -> Result<DicomSliceMeta> {
    let spacing = floats(obj, tags::PIXEL_SPACING, "PixelSpacing", path)?.ok_or_else(|| {
        Error::MissingTag {
            tag: "PixelSpacing",
            path: path.to_path_buf(),
        }
    })?;
    if spacing.len() != 2 || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid(path, format!("invalid PixelSpacing {spacing:?}")));
    }
    let thickness = match optional_float(obj, tags::SPACING_BETWEEN_SLICES, "SpacingBetweenSlices", path)? {
        Some(s) if s > 0.0 => s,
        _ => optional_float(obj, tags::SLICE_THICKNESS, "SliceThickness", path)?.unwrap_or(0.0),
    };
    let slope = required_float(obj, tags::RESCALE_SLOPE, "RescaleSlope", path)?;
    if slope == 0.0 || !slope.is_finite() {
        return Err(invalid(path, format!("RescaleSlope must be finite and nonzero, got {slope}")));
    }
    let rows = integer(obj, tags::ROWS, "Rows", path)?.unwrap_or(0);
    let cols = integer(obj, tags::COLUMNS, "Columns", path)?.unwrap_or(0);
    if rows <= 0 || cols <= 0 {
        return Err(invalid(path, format!("invalid image size {rows}x{cols}")));
    }
    Ok(DicomSliceMeta {
        study_instance_uid: text(obj, tags::STUDY_INSTANCE_UID, "StudyInstanceUID", path)?,
        sop_instance_uid: text(obj, tags::SOP_INSTANCE_UID, "SOPInstanceUID", path)?,
        series_instance_uid: text(obj, tags::SERIES_INSTANCE_UID, "SeriesInstanceUID", path)?,
        instance_number: integer(obj, tags::INSTANCE_NUMBER, "InstanceNumber", path)?.unwrap_or(0),
        rescale_slope: slope,
        rescale_intercept: required_float(obj, tags::RESCALE_INTERCEPT, "RescaleIntercept", path)?,
        pixel_spacing: (spacing[0], spacing[1]),
        slice_thickness_or_spacing: thickness,
        rows: rows as usize,
        cols: cols as usize,
        image_position_patient: fixed(
            floats(obj, tags::IMAGE_POSITION_PATIENT, "ImagePositionPatient", path)?,
            "ImagePositionPatient",
            path,
        )?,
        image_orientation_patient: fixed(
            floats(obj, tags::IMAGE_ORIENTATION_PATIENT, "ImageOrientationPatient", path)?,
            "ImageOrientationPatient",
            path,
        )?,
    })
}

fn read_pixels(obj: &DefaultDicomObject, meta: &DicomSliceMeta, path: &Path) -> Result<Array2<i32>> {
    let ts = obj.meta().transfer_syntax().trim_end_matches('\0');
    if !NATIVE_SYNTAXES.contains(&ts) {
        return Err(invalid(path, format!("unsupported transfer syntax {ts}; only uncompressed little-endian is read")));
    }
    let bits = integer(obj, tags::BITS_ALLOCATED, "BitsAllocated", path)?.unwrap_or(16);
    let stored = integer(obj, tags::BITS_STORED, "BitsStored", path)?.unwrap_or(bits);
    let signed = integer(obj, tags::PIXEL_REPRESENTATION, "PixelRepresentation", path)?.unwrap_or(0) == 1;
    let spp = integer(obj, tags::SAMPLES_PER_PIXEL, "SamplesPerPixel", path)?.unwrap_or(1);
    if spp != 1 {
        return Err(invalid(path, format!("expected one sample per pixel, got {spp}")));
    }
    let elem = obj
        .element_opt(tags::PIXEL_DATA)
        .map_err(|e| invalid(path, e.to_string()))?
        .ok_or_else(|| Error::MissingTag {
            tag: "PixelData",
            path: path.to_path_buf(),
        })?;
    let bytes = elem
        .to_bytes()
        .map_err(|e| invalid(path, format!("PixelData: {e}")))?;
    let n = meta.rows * meta.cols;
    let width = match bits {
        8 => 1,
        16 => 2,
        other => return Err(invalid(path, format!("unsupported BitsAllocated {other}"))),
    };
    if bytes.len() < n * width {
        return Err(invalid(path, format!("PixelData holds {} bytes, need {}", bytes.len(), n * width)));
    }
    let stored = stored.clamp(1, bits) as u32;
    let mask = if stored >= 32 { u32::MAX } else { (1u32 << stored) - 1 };
    let decode = |raw: u32| -> i32 {
        let v = raw & mask;
        if signed && (v >> (stored - 1)) & 1 == 1 {
            v as i32 - (1i64 << stored) as i32
        } else {
            v as i32
        }
    };
    let values: Vec<i32> = if width == 1 {
        bytes[..n].iter().map(|&b| decode(u32::from(b))).collect()
    } else {
        bytes[..2 * n]
            .chunks_exact(2)
            .map(|c| decode(u32::from(u16::from_le_bytes([c[0], c[1]]))))
            .collect()
    };
    Ok(Array2::from_shape_vec((meta.rows, meta.cols), values).expect("length checked"))
}

fn is_part10(path: &Path) -> bool {
    use std::io::Read;
    let mut head = [0u8; 132];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| &head[128..] == b"DICM")
        .unwrap_or(false)
}

/// Part-10 files directly inside `dir`, sorted by name.
pub fn dicom_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && is_part10(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn normal(iop: &[f64; 6]) -> [f64; 3] {
    let (r, c) = (&iop[..3], &iop[3..]);
    [
        r[1] * c[2] - r[2] * c[1],
        r[2] * c[0] - r[0] * c[2],
        r[0] * c[1] - r[1] * c[0],
    ]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Reads every Part-10 file in `dir` as one CT series, sorted by position
/// along the slice normal, or by instance number when positions or
/// orientations are missing.
pub fn read_dicom_series(dir: &Path) -> Result<DicomSeries> {
    let files = dicom_files(dir)?;
    if files.is_empty() {
        return Err(invalid(dir, "directory holds no DICOM Part-10 files"));
    }
    let mut items = Vec::with_capacity(files.len());
    for path in &files {
        let obj = open_file(path).map_err(|e| invalid(path, e.to_string()))?;
        let meta = read_meta(&obj, path)?;
        let px = read_pixels(&obj, &meta, path)?;
        items.push((meta, px));
    }
    let series: BTreeSet<&str> = items.iter().map(|(m, _)| m.series_instance_uid.as_str()).collect();
    if series.len() > 1 {
        return Err(Error::Ambiguous(format!(
            "{} holds several series: {}",
            dir.display(),
            series.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut seen = BTreeSet::new();
    for (m, _) in &items {
        if !seen.insert(m.sop_instance_uid.as_str()) {
            return Err(Error::Ambiguous(format!(
                "SOP instance {} appears twice in {}",
                m.sop_instance_uid,
                dir.display()
            )));
        }
    }
    let (r0, c0) = (items[0].0.rows, items[0].0.cols);
    if let Some((m, _)) = items.iter().find(|(m, _)| (m.rows, m.cols) != (r0, c0)) {
        return Err(Error::Ambiguous(format!(
            "slice {} is {}x{} while the series starts at {r0}x{c0}",
            m.sop_instance_uid, m.rows, m.cols
        )));
    }
    let geometric = items
        .iter()
        .all(|(m, _)| m.image_position_patient.is_some() && m.image_orientation_patient.is_some());
    if geometric {
        let n = normal(&items[0].0.image_orientation_patient.expect("checked"));
        items.sort_by(|(a, _), (b, _)| {
            let pa = dot(&a.image_position_patient.expect("checked"), &n);
            let pb = dot(&b.image_position_patient.expect("checked"), &n);
            pa.total_cmp(&pb).then(a.instance_number.cmp(&b.instance_number))
        });
    } else {
        items.sort_by_key(|(m, _)| m.instance_number);
    }
    let (slices, pixels) = items.into_iter().unzip();
    Ok(DicomSeries { slices, pixels })
}

/// `clamp(slope·stored + intercept, clip_lo, clip_hi)` per pixel.
pub fn rescale_and_clip(
    stored: ArrayView2<i32>,
    meta: &DicomSliceMeta,
    clip_lo: f64,
    clip_hi: f64,
) -> Result<Array2<f32>> {
    if !(clip_lo < clip_hi) {
        return Err(Error::InvalidArgument(format!(
            "clip range [{clip_lo}, {clip_hi}] is empty"
        )));
    }
    let (s, b) = (meta.rescale_slope, meta.rescale_intercept);
    Ok(stored.mapv(|v| (s * f64::from(v) + b).clamp(clip_lo, clip_hi) as f32))
}

impl DicomSeries {
    pub fn study_instance_uid(&self) -> &str {
        &self.slices[0].study_instance_uid
    }

    pub fn series_instance_uid(&self) -> &str {
        &self.slices[0].series_instance_uid
    }

    /// Distance between slice centres along the stack, in mm.
    pub fn slice_spacing(&self) -> Result<f64> {
        let first = &self.slices[0];
        if self.slices.len() > 1 {
            if let (Some(iop), true) = (
                first.image_orientation_patient,
                self.slices.iter().all(|m| m.image_position_patient.is_some()),
            ) {
                let n = normal(&iop);
                let p0 = dot(&first.image_position_patient.expect("checked"), &n);
                let p1 = dot(&self.slices.last().expect("nonempty").image_position_patient.expect("checked"), &n);
                let s = (p1 - p0).abs() / (self.slices.len() - 1) as f64;
                if s > 0.0 {
                    return Ok(s);
                }
            }
        }
        let s = first.slice_thickness_or_spacing;
        if s > 0.0 {
            Ok(s)
        } else {
            Err(Error::MissingTag {
                tag: "SliceThickness",
                path: PathBuf::from(&first.sop_instance_uid),
            })
        }
    }

    /// Voxel-to-RAS affine from orientation, spacing and first position.
    pub fn affine(&self) -> Result<Affine> {
        let first = &self.slices[0];
        let (row_sp, col_sp) = first.pixel_spacing;
        let dz = self.slice_spacing()?;
        let (iop, origin) = match (first.image_orientation_patient, first.image_position_patient) {
            (Some(iop), Some(ipp)) => (iop, ipp),
            _ => ([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], [0.0; 3]),
        };
        let n = normal(&iop);
        // Columns in LPS: i steps along the row direction, j down the
        // column direction, k along the slice normal.
        let cols_lps = [
            [iop[0] * col_sp, iop[1] * col_sp, iop[2] * col_sp],
            [iop[3] * row_sp, iop[4] * row_sp, iop[5] * row_sp],
            [n[0] * dz, n[1] * dz, n[2] * dz],
        ];
        let flip = [-1.0, -1.0, 1.0];
        let mut a = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] = flip[r] * cols_lps[c][r];
            }
            a[r][3] = flip[r] * origin[r];
        }
        a[3][3] = 1.0;
        Ok(a)
    }

    /// Stacks rescaled, clipped slices into a volume.
    pub fn to_volume(&self, clip_lo: f64, clip_hi: f64) -> Result<CtVolume> {
        let first = &self.slices[0];
        let (h, w) = (first.rows, first.cols);
        let mut voxels = Array3::<f32>::zeros((self.slices.len(), h, w));
        for (k, (meta, px)) in self.slices.iter().zip(&self.pixels).enumerate() {
            let hu = rescale_and_clip(px.view(), meta, clip_lo, clip_hi)?;
            voxels.index_axis_mut(ndarray::Axis(0), k).assign(&hu);
        }
        let spacing = [self.slice_spacing()?, first.pixel_spacing.0, first.pixel_spacing.1];
        Ok(CtVolume {
            voxels,
            spacing,
            study_instance_uid: first.study_instance_uid.clone(),
            slice_order: self.slices.iter().map(|m| m.sop_instance_uid.clone()).collect(),
            affine: self.affine()?,
        })
    }
}

/// Study, series and SOP instance UIDs of a series directory, read without
/// pixel data.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesIndex {
    pub dir: PathBuf,
    pub study_instance_uid: String,
    pub series_instance_uid: String,
    pub sop_instance_uids: Vec<String>,
}

pub fn index_series(dir: &Path) -> Result<SeriesIndex> {
    let files = dicom_files(dir)?;
    let mut study = BTreeSet::new();
    let mut series = BTreeSet::new();
    let mut sops = Vec::with_capacity(files.len());
    for path in &files {
        let obj = dicom_object::OpenFileOptions::new()
            .read_until(tags::PIXEL_DATA)
            .open_file(path)
            .map_err(|e| invalid(path, e.to_string()))?;
        study.insert(text(&obj, tags::STUDY_INSTANCE_UID, "StudyInstanceUID", path)?);
        series.insert(text(&obj, tags::SERIES_INSTANCE_UID, "SeriesInstanceUID", path)?);
        sops.push(text(&obj, tags::SOP_INSTANCE_UID, "SOPInstanceUID", path)?);
    }
    if series.len() != 1 || study.len() != 1 {
        return Err(Error::Ambiguous(format!(
            "{} must hold exactly one series, found series {}",
            dir.display(),
            series.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(SeriesIndex {
        dir: dir.to_path_buf(),
        study_instance_uid: study.into_iter().next().expect("one study"),
        series_instance_uid: series.into_iter().next().expect("one series"),
        sop_instance_uids: sops,
    })
}

/// Every directory under `root` (inclusive) that directly holds Part-10
/// files, sorted.
pub fn find_series_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingInput(root.to_path_buf()));
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut has_dicom = false;
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !has_dicom && is_part10(&p) {
                has_dicom = true;
            }
        }
        if has_dicom {
            out.push(dir);
        }
    }
    out.sort();
    Ok(out)
}

//! NIfTI-1 volume and mask files. On disk `i` runs along width, `j` along
//! height and `k` along depth; in memory arrays are `(D, H, W)`.

use std::path::{Path, PathBuf};

use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use ndarray::{Array3, Ix3};

use crate::error::{Error, Result};
use crate::volume::{affine_spacing, Affine, CtVolume, LabelMask};

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn header_for(affine: &Affine, spacing: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0];
    h.sform_code = 1;
    h.qform_code = 0;
    let row = |r: usize| [affine[r][0] as f32, affine[r][1] as f32, affine[r][2] as f32, affine[r][3] as f32];
    h.srow_x = row(0);
    h.srow_y = row(1);
    h.srow_z = row(2);
    h.xyzt_units = 2; // millimetres
    h
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn write_volume(volume: &CtVolume, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let header = header_for(&volume.affine, volume.spacing);
    let data = volume.voxels.view().permuted_axes([2, 1, 0]);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| nifti_err(path, e))
}

pub fn write_mask(mask: &LabelMask, affine: &Affine, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let header = header_for(affine, mask.spacing);
    let data = mask.voxels.view().permuted_axes([2, 1, 0]);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| nifti_err(path, e))
}

/// Affine from the sform when set, else the qform, else the pixel sizes.
pub fn header_affine(h: &NiftiHeader) -> Affine {
    let mut a = [[0.0; 4]; 4];
    a[3][3] = 1.0;
    let pixdim_ok = h.pixdim[1..4].iter().all(|&p| p > 0.0) && (h.pixdim[0] == 1.0 || h.pixdim[0] == -1.0);
    if h.sform_code > 0 {
        for (r, row) in [h.srow_x, h.srow_y, h.srow_z].iter().enumerate() {
            for c in 0..4 {
                a[r][c] = f64::from(row[c]);
            }
        }
    } else if h.qform_code > 0 && pixdim_ok {
        let m = h.qform_affine::<f64>();
        for (r, row) in a.iter_mut().enumerate().take(3) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
    } else {
        for i in 0..3 {
            a[i][i] = f64::from(h.pixdim[i + 1].abs()).max(f64::MIN_POSITIVE);
        }
    }
    a
}

/// Voxel spacing `(D, H, W)` from the header.
pub fn header_spacing(h: &NiftiHeader) -> [f64; 3] {
    let s = affine_spacing(&header_affine(h));
    if s.iter().all(|&v| v > 0.0) {
        s
    } else {
        [
            f64::from(h.pixdim[3].abs()),
            f64::from(h.pixdim[2].abs()),
            f64::from(h.pixdim[1].abs()),
        ]
    }
}

pub fn read_header(path: &Path) -> Result<NiftiHeader> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    NiftiHeader::from_file(path).map_err(|e| nifti_err(path, e))
}

/// Spatial shape `(D, H, W)` stored in a header.
pub fn header_shape(h: &NiftiHeader, path: &Path) -> Result<[usize; 3]> {
    let dim = h.dim().map_err(|e| nifti_err(path, e))?;
    if dim.len() < 3 || dim[3..].iter().any(|&d| d > 1) {
        return Err(nifti_err(path, format!("expected a 3D volume, got dimensions {dim:?}")));
    }
    Ok([usize::from(dim[2]), usize::from(dim[1]), usize::from(dim[0])])
}

fn read_array(path: &Path) -> Result<(NiftiHeader, Array3<f32>)> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let shape = header_shape(&header, path)?;
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| nifti_err(path, e))?;
    let mut arr = arr;
    while arr.ndim() > 3 {
        let last = ndarray::Axis(arr.ndim() - 1);
        arr = arr.index_axis_move(last, 0);
    }
    let arr = arr.into_dimensionality::<Ix3>().map_err(|e| nifti_err(path, e))?;
    if arr.dim() != (shape[2], shape[1], shape[0]) {
        return Err(nifti_err(path, format!("data shape {:?} disagrees with header", arr.dim())));
    }
    let arr = arr.permuted_axes([2, 1, 0]).as_standard_layout().into_owned();
    Ok((header, arr))
}

/// Reads a CT volume; the study id is taken from the file name.
pub fn read_volume(path: &Path) -> Result<CtVolume> {
    let (h, voxels) = read_array(path)?;
    let spacing = header_spacing(&h);
    Ok(CtVolume {
        voxels,
        spacing,
        study_instance_uid: study_id_from_path(path),
        slice_order: Vec::new(),
        affine: header_affine(&h),
    })
}

/// Reads a mask; any nonzero voxel is foreground.
pub fn read_mask(path: &Path) -> Result<(LabelMask, Affine)> {
    let (h, v) = read_array(path)?;
    let spacing = header_spacing(&h);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(nifti_err(path, "mask contains non-finite values"));
    }
    let mask = LabelMask {
        voxels: v.mapv(|x| u8::from(x != 0.0)),
        spacing,
    };
    Ok((mask, header_affine(&h)))
}

/// File name without `.nii` / `.nii.gz`.
pub fn nifti_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name)
        .to_string()
}

fn study_id_from_path(path: &Path) -> String {
    let stem = nifti_stem(path);
    stem.strip_suffix("_ct").unwrap_or(&stem).to_string()
}

pub fn pair_paths(out_dir: &Path, study: &str) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("{study}_ct.nii.gz")),
        out_dir.join(format!("{study}_seg.nii.gz")),
    )
}

/// Writes `<study>_ct.nii.gz` and `<study>_seg.nii.gz` sharing the volume's
/// affine.
pub fn write_nifti_pair(volume: &CtVolume, mask: &LabelMask, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if volume.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "volume {:?} and mask {:?} differ",
            volume.shape(),
            mask.shape()
        )));
    }
    let (ct, seg) = pair_paths(out_dir, &volume.study_instance_uid);
    write_volume(volume, &ct)?;
    write_mask(mask, &volume.affine, &seg)?;
    Ok((ct, seg))
}

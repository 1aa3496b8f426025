//! Whole-dataset conversion into NIfTI pairs plus a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::HU_CLIP;

use super::annotations::{read_annotations, AnnotationSchema};
use super::dicom::{find_series_dirs, index_series, read_dicom_series, SeriesIndex};
use super::manifest::{Manifest, ManifestEntry};
use super::nifti_io::{
    header_shape, header_spacing, nifti_stem, pair_paths, read_header, read_mask, write_mask,
    write_volume,
};
use super::rasterize::{merge_masks, rasterize_by_annotator, MergeRule};

/// Source layout of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// DICOM series plus a JSON polygon export.
    RicordDicom,
    /// Existing NIfTI volume/mask pairs, referenced in place.
    NiftiPassthrough,
}

#[derive(Debug, Clone)]
pub struct DicomConversion<'a> {
    pub dicom_root: &'a Path,
    pub annotations: &'a Path,
    pub schema: &'a AnnotationSchema,
    pub merge: MergeRule,
    pub out_dir: &'a Path,
    pub dataset_name: &'a str,
}

/// Per-study result line.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub study_id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub positive_voxels: u64,
}

/// Converted studies and the studies that failed, with their errors.
#[derive(Debug)]
pub struct ConversionOutcome {
    pub manifest: Manifest,
    pub summaries: Vec<StudySummary>,
    pub failures: Vec<(String, Error)>,
}

/// Picks, per study, the series holding the most annotated instances
/// (ties and unannotated studies: the most slices, then the first).
fn choose_series(indices: Vec<SeriesIndex>, annotated: &BTreeMap<String, Vec<String>>) -> BTreeMap<String, SeriesIndex> {
    let mut best: BTreeMap<String, (usize, usize, SeriesIndex)> = BTreeMap::new();
    for idx in indices {
        let hits = annotated.get(&idx.study_instance_uid).map_or(0, |sops| {
            sops.iter().filter(|s| idx.sop_instance_uids.contains(s)).count()
        });
        let key = (hits, idx.sop_instance_uids.len());
        match best.get(&idx.study_instance_uid) {
            Some((h, n, _)) if (*h, *n) >= key => {}
            _ => {
                best.insert(idx.study_instance_uid.clone(), (key.0, key.1, idx));
            }
        }
    }
    best.into_iter().map(|(k, (_, _, v))| (k, v)).collect()
}

fn convert_study(
    series: &SeriesIndex,
    doc: &super::annotations::AnnotationDocument,
    job: &DicomConversion<'_>,
) -> Result<(Vec<ManifestEntry>, StudySummary)> {
    let s = read_dicom_series(&series.dir)?;
    let volume = s.to_volume(f64::from(HU_CLIP.0), f64::from(HU_CLIP.1))?;
    let study = volume.study_instance_uid.clone();
    let masks = rasterize_by_annotator(&doc.for_study(&study), &volume)?;
    if masks.is_empty() {
        log::warn!("study {study} has no polygon annotations; writing an empty mask");
    }
    let (ct_path, seg_path) = pair_paths(job.out_dir, &study);
    write_volume(&volume, &ct_path)?;
    let mut entries = Vec::new();
    let entry = |id: String, seg: PathBuf, positive: u64, annotator: Option<String>| ManifestEntry {
        study_id: id,
        ct_path: ct_path.clone(),
        seg_path: seg,
        shape: volume.shape(),
        spacing: volume.spacing,
        positive_voxels: positive,
        annotator,
    };
    let positive;
    if job.merge == MergeRule::PerAnnotator && !masks.is_empty() {
        let mut total = 0;
        for (who, mask) in &masks {
            let tag = if who.is_empty() { "anonymous" } else { who.as_str() };
            let id = format!("{study}__{tag}");
            let seg = job.out_dir.join(format!("{id}_seg.nii.gz"));
            write_mask(mask, &volume.affine, &seg)?;
            let n = mask.positive_count() as u64;
            total += n;
            entries.push(entry(id, seg, n, Some(who.clone())));
        }
        positive = total;
    } else {
        let rule = if job.merge == MergeRule::PerAnnotator { MergeRule::Union } else { job.merge };
        let mask = merge_masks(&masks, rule, volume.shape(), volume.spacing)?;
        write_mask(&mask, &volume.affine, &seg_path)?;
        positive = mask.positive_count() as u64;
        entries.push(entry(study.clone(), seg_path, positive, None));
    }
    let summary = StudySummary {
        study_id: study,
        shape: volume.shape(),
        spacing: volume.spacing,
        positive_voxels: positive,
    };
    Ok((entries, summary))
}

/// Converts every study under `dicom_root`. Failures are collected per
/// study rather than aborting the run.
pub fn convert_dicom_dataset(job: &DicomConversion<'_>) -> Result<ConversionOutcome> {
    let doc = read_annotations(job.annotations, job.schema)?;
    let mut annotated: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in &doc.entries {
        annotated
            .entry(e.study_instance_uid.clone())
            .or_default()
            .push(e.sop_instance_uid.clone());
    }
    let mut failures = Vec::new();
    let mut indices = Vec::new();
    for dir in find_series_dirs(job.dicom_root)? {
        match index_series(&dir) {
            Ok(idx) => indices.push(idx),
            Err(e) => failures.push((dir.display().to_string(), e)),
        }
    }
    let chosen = choose_series(indices, &annotated);
    for study in annotated.keys().filter(|s| !chosen.contains_key(*s)) {
        failures.push((
            study.clone(),
            Error::MissingInput(job.dicom_root.join(study)),
        ));
    }
    std::fs::create_dir_all(job.out_dir)?;
    let mut manifest = Manifest {
        dataset: job.dataset_name.to_string(),
        entries: Vec::new(),
        base_dir: job.out_dir.to_path_buf(),
    };
    let mut summaries = Vec::new();
    for (study, series) in &chosen {
        match convert_study(series, &doc, job) {
            Ok((entries, summary)) => {
                manifest.entries.extend(entries);
                summaries.push(summary);
            }
            Err(e) => failures.push((study.clone(), e)),
        }
    }
    Ok(ConversionOutcome {
        manifest,
        summaries,
        failures,
    })
}

fn is_nifti(p: &Path) -> bool {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    p.is_file() && (name.ends_with(".nii") || name.ends_with(".nii.gz"))
}

fn find_mask(stem: &str, masks_dir: &Path, suffix: &str, same_dir: bool) -> Option<PathBuf> {
    let mut names = vec![format!("{stem}{suffix}.nii.gz"), format!("{stem}{suffix}.nii")];
    if !same_dir {
        names.push(format!("{stem}.nii.gz"));
        names.push(format!("{stem}.nii"));
    }
    names.into_iter().map(|n| masks_dir.join(n)).find(|p| p.is_file())
}

/// Indexes existing NIfTI pairs without rewriting them. A volume
/// `<stem>.nii[.gz]` in `images_dir` pairs with `<stem><suffix>.nii[.gz]`,
/// or with `<stem>.nii[.gz]` when masks live in a separate directory.
pub fn index_nifti_dataset(
    images_dir: &Path,
    masks_dir: &Path,
    mask_suffix: &str,
    dataset_name: &str,
) -> Result<ConversionOutcome> {
    if !images_dir.is_dir() {
        return Err(Error::MissingInput(images_dir.to_path_buf()));
    }
    if !masks_dir.is_dir() {
        return Err(Error::MissingInput(masks_dir.to_path_buf()));
    }
    let same_dir = images_dir.canonicalize()? == masks_dir.canonicalize()?;
    let mut images: Vec<PathBuf> = std::fs::read_dir(images_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    images.retain(|p| is_nifti(p));
    images.sort();
    let mut manifest = Manifest {
        dataset: dataset_name.to_string(),
        entries: Vec::new(),
        base_dir: PathBuf::new(),
    };
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for ct in images {
        let stem = nifti_stem(&ct);
        if !mask_suffix.is_empty() && stem.ends_with(mask_suffix) {
            continue;
        }
        let result = (|| -> Result<(ManifestEntry, StudySummary)> {
            let seg = find_mask(&stem, masks_dir, mask_suffix, same_dir)
                .ok_or_else(|| Error::MissingInput(masks_dir.join(format!("{stem}{mask_suffix}.nii.gz"))))?;
            let h = read_header(&ct)?;
            let shape = header_shape(&h, &ct)?;
            let spacing = header_spacing(&h);
            let (mask, _) = read_mask(&seg)?;
            if mask.shape() != shape {
                return Err(Error::Shape(format!(
                    "{}: mask {:?} does not match volume {:?}",
                    stem,
                    mask.shape(),
                    shape
                )));
            }
            let positive = mask.positive_count() as u64;
            Ok((
                ManifestEntry {
                    study_id: stem.clone(),
                    ct_path: ct.clone(),
                    seg_path: seg,
                    shape,
                    spacing,
                    positive_voxels: positive,
                    annotator: None,
                },
                StudySummary {
                    study_id: stem.clone(),
                    shape,
                    spacing,
                    positive_voxels: positive,
                },
            ))
        })();
        match result {
            Ok((e, s)) => {
                manifest.entries.push(e);
                summaries.push(s);
            }
            Err(e) => failures.push((stem, e)),
        }
    }
    Ok(ConversionOutcome {
        manifest,
        summaries,
        failures,
    })
}

//! Run configuration read from TOML. Every field has a default, and the
//! defaults reproduce the canonical two-session plan.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::AugmentationConfig;
use crate::error::{Error, Result};
use crate::ingest::{AnnotationSchema, DatasetKind, MergeRule};
use crate::losses::LossConfig;
use crate::metrics::DEFAULT_NSD_TOLERANCE_MM;
use crate::nn::AdamWConfig;
use crate::trainengine::{OneCycleConfig, SessionSpec, TrainingPlan};
use crate::unet3d::UNet3dConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of the DICOM tree (`ricord-dicom`).
    pub raw_dicom: PathBuf,
    /// Annotation export (`ricord-dicom`).
    pub annotations: PathBuf,
    /// Volumes and masks (`nifti-passthrough`).
    pub nifti_images: PathBuf,
    pub nifti_masks: PathBuf,
    /// Output directory of `convert`.
    pub nifti_store: PathBuf,
    pub manifest: PathBuf,
    pub split: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            raw_dicom: "data/ricord/dicom".into(),
            annotations: "data/ricord/annotations.json".into(),
            nifti_images: "data/nifti_in/images".into(),
            nifti_masks: "data/nifti_in/masks".into(),
            nifti_store: "data/nifti".into(),
            manifest: "data/nifti/manifest.json".into(),
            split: "runs/split.json".into(),
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub name: String,
    pub merge: MergeRule,
    /// Suffix of mask files next to their volumes (`nifti-passthrough`).
    pub mask_suffix: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::RicordDicom,
            name: "ricord".into(),
            merge: MergeRule::Union,
            mask_suffix: "_mask".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub nsd_tolerance_mm: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            nsd_tolerance_mm: DEFAULT_NSD_TOLERANCE_MM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub annotation_schema: AnnotationSchema,
    pub model: UNet3dConfig,
    pub sessions: Vec<SessionSpec>,
    pub optimizer: AdamWConfig,
    pub schedule: OneCycleConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: Paths::default(),
            dataset: DatasetConfig::default(),
            annotation_schema: AnnotationSchema::default(),
            model: UNet3dConfig::default(),
            sessions: TrainingPlan::canonical().sessions,
            optimizer: AdamWConfig::default(),
            schedule: OneCycleConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Parses the right-hand side of `--set key=value`: a TOML literal when it
/// parses as one, else a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `a.b.c = value` in a TOML tree. Numeric segments index arrays.
fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("'{part}' in '{key}' must index an array")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} in '{key}' is out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("'{key}' descends into a non-table value"))),
        };
    }
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies `key=value` overrides,
    /// validates, and resolves relative paths against the config file's
    /// directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        let base = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(Error::MissingInput(p.to_path_buf()));
                }
                let text = std::fs::read_to_string(p)?;
                let file: toml::Table = text
                    .parse()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                if let toml::Value::Table(t) = &mut tree {
                    merge_tables(t, file);
                }
                p.parent().map(Path::to_path_buf).unwrap_or_default()
            }
            None => PathBuf::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_path(&mut tree, k.trim(), parse_literal(v.trim()))?;
        }
        let mut cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if base.as_os_str().is_empty() {
            return;
        }
        let p = &mut self.paths;
        for field in [
            &mut p.raw_dicom,
            &mut p.annotations,
            &mut p.nifti_images,
            &mut p.nifti_masks,
            &mut p.nifti_store,
            &mut p.manifest,
            &mut p.split,
            &mut p.checkpoints,
            &mut p.reports,
        ] {
            if field.is_relative() {
                *field = base.join(&*field);
            }
        }
        if let Some(w) = &mut self.model.pretrained_weights_path {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan().validate()?;
        self.schedule.validate()?;
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.augmentation.validate()?;
        let tol = self.evaluation.nsd_tolerance_mm;
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Error::Config(format!("nsd_tolerance_mm must be positive, got {tol}")));
        }
        Ok(())
    }

    pub fn plan(&self) -> TrainingPlan {
        TrainingPlan {
            sessions: self.sessions.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Overlays `src` onto `dst`; nested tables merge, everything else
/// (including arrays) is replaced.
fn merge_tables(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge_tables(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

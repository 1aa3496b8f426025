use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub study_id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub ct_path: PathBuf,
    pub seg_path: PathBuf,
    /// `(D, H, W)`.
    pub shape: [usize; 3],
    /// Millimetres along `(D, H, W)`.
    pub spacing: [f64; 3],
    pub positive_voxels: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

/// Index of converted volume/mask pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub dataset: String,
    pub entries: Vec<ManifestEntry>,
    /// Directory of the manifest file; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = std::collections::BTreeSet::new();
        for e in &m.entries {
            if !seen.insert(e.study_id.as_str()) {
                return Err(Error::Ambiguous(format!(
                    "study {} appears twice in {}",
                    e.study_id,
                    path.display()
                )));
            }
        }
        Ok(m)
    }

    /// Writes the manifest, storing paths under its directory relatively.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
        if let Some(d) = dir {
            std::fs::create_dir_all(d)?;
        }
        let mut out = self.clone();
        if let Some(d) = dir {
            for e in &mut out.entries {
                for p in [&mut e.ct_path, &mut e.seg_path] {
                    if let Ok(rel) = p.strip_prefix(d) {
                        *p = rel.to_path_buf();
                    }
                }
            }
        }
        let mut s = serde_json::to_string_pretty(&out)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, study_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.study_id == study_id)
    }

    pub fn study_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.study_id.clone()).collect()
    }
}

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TUNE_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub tune_ids: Vec<String>,
    pub seed: u64,
}

/// Tuning-set size: `floor(0.15·n)`, at least one.
pub fn tune_size(n: usize) -> usize {
    ((n as f64 * TUNE_FRACTION + 1e-9).floor() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Shuffles `ids` with a seeded generator and cuts off the tuning set.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 studies to split, got {}",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Ambiguous("duplicate study ids in split input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let k = tune_size(sorted.len());
    let tune_ids = sorted.split_off(sorted.len() - k);
    Ok(DatasetSplit {
        train_ids: sorted,
        tune_ids,
        seed,
    })
}

impl DatasetSplit {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d)?;
        }
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

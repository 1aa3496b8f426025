//! Safetensors I/O: pretrained encoder import, checkpoints, optimizer state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{AdamW, Slot, Visit};

use super::config::UNet3dConfig;

/// Outcome of importing pretrained encoder weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    /// Parameters and buffers initialized from the file.
    pub matched: usize,
    /// Encoder entries the file did not provide.
    pub missing: Vec<String>,
    /// File entries with no encoder counterpart (classifier head excluded).
    pub unexpected: Vec<String>,
}

/// Metadata stored alongside the arrays of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: UNet3dConfig,
    pub session_index: usize,
    pub epoch: usize,
    pub tuning_dice: f64,
}

const META_KEY: &str = "checkpoint";
const STEPS_KEY: &str = "adamw_steps";

struct F32Bytes {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &F32Bytes {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_bytes(a: &ArrayD<f32>) -> F32Bytes {
    let mut bytes = Vec::with_capacity(a.len() * 4);
    for v in a.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    F32Bytes {
        shape: a.shape().to_vec(),
        bytes,
    }
}

fn write_file(
    path: &Path,
    arrays: BTreeMap<String, F32Bytes>,
    meta: HashMap<String, String>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // serialize_to_file writes a sibling temp file and renames it into place.
    safetensors::serialize_to_file(arrays.iter().map(|(k, v)| (k.as_str(), v)), Some(meta), path)
        .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<SafeTensors<'a>> {
    SafeTensors::deserialize(bytes).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))
}

fn metadata(path: &Path, bytes: &[u8]) -> Result<HashMap<String, String>> {
    let (_, m) = SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    Ok(m.metadata().clone().unwrap_or_default())
}

fn view_to_array(name: &str, view: &safetensors::tensor::TensorView<'_>) -> Result<ArrayD<f32>> {
    let data = view.data();
    let values: Vec<f32> = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")) as f32)
            .collect(),
        other => {
            return Err(Error::Weights(format!(
                "{name}: unsupported dtype {other:?}, expected F32 or F64"
            )))
        }
    };
    ArrayD::from_shape_vec(IxDyn(view.shape()), values)
        .map_err(|e| Error::Weights(format!("{name}: {e}")))
}

fn collect(model: &mut dyn Visit) -> BTreeMap<String, F32Bytes> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, slot| {
        let a = match slot {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => &*b,
        };
        out.insert(name.to_string(), to_bytes(a));
    });
    out
}

/// Assigns arrays by name. Every slot must be present with the same shape;
/// the first mismatch is reported.
fn assign(
    model: &mut dyn Visit,
    arrays: &HashMap<String, ArrayD<f32>>,
    require_all: bool,
) -> Result<(usize, Vec<String>)> {
    let mut matched = 0;
    let mut missing = Vec::new();
    let mut err: Option<Error> = None;
    model.visit("", &mut |name, slot| {
        if err.is_some() {
            return;
        }
        let target = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        match arrays.get(name) {
            Some(a) if a.shape() == target.shape() => {
                target.assign(a);
                matched += 1;
            }
            Some(a) => {
                err = Some(Error::Weights(format!(
                    "shape mismatch for {name}: file has {:?}, model expects {:?}",
                    a.shape(),
                    target.shape()
                )))
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if require_all && !missing.is_empty() {
        return Err(Error::Weights(format!(
            "{} entries missing from file, first: {}",
            missing.len(),
            missing[0]
        )));
    }
    Ok((matched, missing))
}

fn is_ignored_pretrained(name: &str) -> bool {
    name.starts_with("fc.") || name.ends_with("num_batches_tracked")
}

/// Loads pretrained encoder weights named in the 18-layer video ResNet
/// layout. The classification head and batch counters are ignored; any
/// other name the encoder lacks, or any shape disagreement, is an error.
pub fn load_pretrained_encoder(encoder: &mut dyn Visit, path: &Path) -> Result<LoadReport> {
    let bytes = read_bytes(path)?;
    let st = parse(path, &bytes)?;
    let mut arrays = HashMap::new();
    for (name, view) in st.tensors() {
        if is_ignored_pretrained(&name) {
            continue;
        }
        let a = view_to_array(&name, &view)?;
        arrays.insert(name, a);
    }
    let mut known = Vec::new();
    encoder.visit("", &mut |name, _| known.push(name.to_string()));
    let mut unexpected: Vec<String> =
        arrays.keys().filter(|k| !known.contains(k)).cloned().collect();
    unexpected.sort();
    if let Some(first) = unexpected.first() {
        return Err(Error::Weights(format!(
            "{}: {} entries have no encoder counterpart, first: {first}",
            path.display(),
            unexpected.len()
        )));
    }
    let (matched, missing) = assign(encoder, &arrays, false)?;
    Ok(LoadReport {
        matched,
        missing,
        unexpected,
    })
}

/// Writes every parameter and buffer of `model` plus `meta` to `path`.
pub fn save_checkpoint(model: &mut dyn Visit, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let arrays = collect(model);
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    write_file(path, arrays, info)
}

/// Reads only the metadata of a checkpoint.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = read_bytes(path)?;
    let info = metadata(path, &bytes)?;
    let raw = info
        .get(META_KEY)
        .ok_or_else(|| Error::Weights(format!("{}: no checkpoint metadata", path.display())))?;
    Ok(serde_json::from_str(raw)?)
}

/// Restores every parameter and buffer of `model` from a checkpoint.
pub fn load_checkpoint(model: &mut dyn Visit, path: &Path) -> Result<CheckpointMeta> {
    let bytes = read_bytes(path)?;
    let meta = read_checkpoint_meta(path)?;
    let st = parse(path, &bytes)?;
    let mut arrays = HashMap::new();
    for (name, view) in st.tensors() {
        let a = view_to_array(&name, &view)?;
        arrays.insert(name, a);
    }
    assign(model, &arrays, true)?;
    Ok(meta)
}

/// Persists AdamW moments (`<name>.m`, `<name>.v`) and step counts.
pub fn save_optimizer(opt: &AdamW, path: &Path) -> Result<()> {
    let mut arrays = BTreeMap::new();
    let mut steps = BTreeMap::new();
    for (name, m, v, t) in opt.state() {
        arrays.insert(format!("{name}.m"), to_bytes(m));
        arrays.insert(format!("{name}.v"), to_bytes(v));
        steps.insert(name.to_string(), t);
    }
    let mut info = HashMap::new();
    info.insert(STEPS_KEY.to_string(), serde_json::to_string(&steps)?);
    write_file(path, arrays, info)
}

pub fn load_optimizer(opt: &mut AdamW, path: &Path) -> Result<()> {
    let bytes = read_bytes(path)?;
    let info = metadata(path, &bytes)?;
    let steps: BTreeMap<String, u64> = serde_json::from_str(
        info.get(STEPS_KEY)
            .ok_or_else(|| Error::Weights(format!("{}: no optimizer metadata", path.display())))?,
    )?;
    let st = parse(path, &bytes)?;
    for (name, t) in steps {
        let get = |suffix: &str| -> Result<ArrayD<f32>> {
            let key = format!("{name}.{suffix}");
            let view = st
                .tensor(&key)
                .map_err(|e| Error::Weights(format!("{}: {key}: {e}", path.display())))?;
            view_to_array(&key, &view)
        };
        let (m, v) = (get("m")?, get("v")?);
        opt.restore(name, m, v, t);
    }
    Ok(())
}

/// SHA-256 over every parameter and buffer name, shape and value, in visit
/// order. Equal hashes mean bit-identical weights.
pub fn parameter_hash(model: &mut dyn Visit) -> String {
    let mut h = Sha256::new();
    model.visit("", &mut |name, slot| {
        let a = match slot {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => &*b,
        };
        h.update(name.as_bytes());
        for d in a.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// Writes arrays under the given names, for building weight files in tests
/// and tools.
pub fn save_named_arrays(arrays: &BTreeMap<String, ArrayD<f32>>, path: &Path) -> Result<()> {
    let arrays = arrays.iter().map(|(k, v)| (k.clone(), to_bytes(v))).collect();
    write_file(path, arrays, HashMap::new())
}

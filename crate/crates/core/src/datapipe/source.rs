//! Loading studies from a manifest and assembling batches.

use std::collections::BTreeMap;

use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::manifest::Manifest;
use crate::ingest::nifti_io::{read_mask, read_volume};
use crate::losses::Labels;
use crate::nn::Tensor;
use crate::volume::{CtVolume, LabelMask, HU_CLIP};

use super::augment::ModelSample;
use super::intensity::{normalize_intensity, replicate_channels};
use super::resample::resample_pair;
use super::stage::StageSpec;

/// Clip, resize, normalize and replicate one study.
pub fn prepare_sample(volume: &CtVolume, mask: &LabelMask, spec: &StageSpec) -> Result<ModelSample> {
    let mut vol = volume.clone();
    vol.clip(HU_CLIP.0, HU_CLIP.1);
    let (img, m) = resample_pair(&vol, mask, spec)?;
    Ok(ModelSample {
        image: replicate_channels(normalize_intensity(img.view())?.view()),
        mask: m,
        study_id: volume.study_instance_uid.clone(),
        native_shape: volume.shape(),
        native_spacing: volume.spacing,
    })
}

/// Reads a study's volume and mask through the manifest.
pub fn load_study(manifest: &Manifest, study_id: &str) -> Result<(CtVolume, LabelMask)> {
    let e = manifest
        .get(study_id)
        .ok_or_else(|| Error::MissingInput(format!("study {study_id} in manifest").into()))?;
    let mut vol = read_volume(&manifest.resolve(&e.ct_path))?;
    vol.study_instance_uid = e.study_id.clone();
    let (mask, _) = read_mask(&manifest.resolve(&e.seg_path))?;
    if mask.shape() != vol.shape() {
        return Err(Error::Shape(format!(
            "{study_id}: mask {:?} does not match volume {:?}",
            mask.shape(),
            vol.shape()
        )));
    }
    Ok((vol, mask))
}

/// Stage-resolution samples of a fixed set of studies, prepared once.
#[derive(Debug, Clone)]
pub struct StudySource {
    pub spec: StageSpec,
    samples: BTreeMap<String, ModelSample>,
    order: Vec<String>,
}

impl StudySource {
    pub fn from_manifest(manifest: &Manifest, ids: &[String], spec: StageSpec) -> Result<Self> {
        spec.validate()?;
        let mut samples = BTreeMap::new();
        for id in ids {
            let (vol, mask) = load_study(manifest, id)?;
            samples.insert(id.clone(), prepare_sample(&vol, &mask, &spec)?);
        }
        Ok(StudySource {
            spec,
            samples,
            order: ids.to_vec(),
        })
    }

    pub fn from_samples(samples: Vec<ModelSample>, spec: StageSpec) -> Result<Self> {
        spec.validate()?;
        let order: Vec<String> = samples.iter().map(|s| s.study_id.clone()).collect();
        let mut map = BTreeMap::new();
        for s in samples {
            if s.mask.shape() != spec.shape() {
                return Err(Error::Shape(format!(
                    "sample {} has extent {:?}, stage expects {:?}",
                    s.study_id,
                    s.mask.shape(),
                    spec.shape()
                )));
            }
            if map.insert(s.study_id.clone(), s).is_some() {
                return Err(Error::Ambiguous("duplicate study ids in sample set".into()));
            }
        }
        Ok(StudySource {
            spec,
            samples: map,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn sample(&self, i: usize) -> &ModelSample {
        &self.samples[&self.order[i]]
    }

    pub fn samples(&self) -> impl Iterator<Item = &ModelSample> {
        self.order.iter().map(|id| &self.samples[id])
    }
}

/// Shuffled index batches covering `0..n`; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Stacks samples into `(B, 3, D, H, W)` scores input and `(B, D, H, W)`
/// labels.
pub fn assemble_batch(samples: &[&ModelSample]) -> Result<(Tensor, Labels)> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let (c, d, h, w) = first.image.dim();
    let mut x = Tensor::zeros((samples.len(), c, d, h, w));
    let mut y = Labels::zeros((samples.len(), d, h, w));
    for (b, s) in samples.iter().enumerate() {
        if s.image.dim() != (c, d, h, w) || s.mask.dim() != (d, h, w) {
            return Err(Error::Shape(format!(
                "sample {} has image {:?} / mask {:?}, batch expects {:?}",
                s.study_id,
                s.image.dim(),
                s.mask.dim(),
                (c, d, h, w)
            )));
        }
        x.slice_mut(s![b, .., .., .., ..]).assign(&s.image);
        y.index_axis_mut(Axis(0), b).assign(&s.mask);
    }
    Ok((x, y))
}

/// One input image as a batch of one.
pub fn single_batch(image: &Array4<f32>) -> Tensor {
    image.clone().insert_axis(Axis(0))
}

/// Independent generator for a stream identified by `keys`.
pub fn stream_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    // SplitMix64 finalizer over the seed and each key.
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut h = mix(seed);
    for &k in keys {
        h = mix(h ^ mix(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, Array5};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctseg_core::datapipe::StageSpec;
use ctseg_core::losses::{combined_loss_grad_f32, LossConfig};
use ctseg_core::nn::{zero_grad, AdamW, AdamWConfig, Mode, Slot, Tensor, Visit};
use ctseg_core::unet3d::weights::{load_checkpoint, parameter_hash, save_checkpoint, save_named_arrays};
use ctseg_core::unet3d::{predict_mask, CheckpointMeta, UNet3d, UNet3dConfig};
use ctseg_core::volume::CtVolume;
use ctseg_core::Error;

fn narrow(seed: u64) -> UNet3dConfig {
    UNet3dConfig {
        encoder_channels: [4, 4, 8, 8, 16],
        init_seed: seed,
        ..UNet3dConfig::default()
    }
}

fn random_input(shape: [usize; 5], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array5::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
}

fn random_labels(b: usize, d: usize, h: usize, w: usize, seed: u64) -> ndarray::Array4<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ndarray::Array4::from_shape_simple_fn((b, d, h, w), || u8::from(rng.random_bool(0.3)))
}

/// Output length of a strided convolution.
fn conv_len(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Extents of the stem and the four stage outputs.
fn pyramid_oracle(input: [usize; 3]) -> [[usize; 3]; 5] {
    let stem = [
        conv_len(input[0], 3, 1, 1),
        conv_len(input[1], 7, 2, 3),
        conv_len(input[2], 7, 2, 3),
    ];
    let mut levels = [stem; 5];
    for i in 1..5 {
        let stride = if i == 1 { 1 } else { 2 };
        levels[i] = levels[i - 1].map(|n| conv_len(n, 3, stride, 1));
    }
    levels
}

#[test]
fn pyramid_extents_at_stage_sizes() {
    let model = UNet3d::new(narrow(0)).unwrap();
    let (low, _) = model.plan([18, 112, 112]).unwrap();
    assert_eq!(
        low.levels,
        [[18, 56, 56], [18, 56, 56], [9, 28, 28], [5, 14, 14], [3, 7, 7]]
    );
    let (high, _) = model.plan([20, 256, 256]).unwrap();
    assert_eq!(
        high.levels,
        [[20, 128, 128], [20, 128, 128], [10, 64, 64], [5, 32, 32], [3, 16, 16]]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn planned_extents_match_oracle(d in 8usize..64, h in 32usize..300, w in 32usize..300) {
        let model = UNet3d::new(narrow(0)).unwrap();
        let (shapes, plan) = model.plan([d, h, w]).unwrap();
        prop_assert_eq!(shapes.levels, pyramid_oracle([d, h, w]));
        for (i, (from, to)) in plan.blocks.iter().enumerate() {
            prop_assert_eq!(*from, shapes.levels[4 - i]);
            prop_assert_eq!(*to, shapes.levels[3 - i]);
        }
        prop_assert_eq!(plan.final_up, (shapes.levels[0], [d, h, w]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn forward_preserves_spatial_extent(d in 8usize..=24, h in 32usize..=128, w in 32usize..=128, seed in any::<u64>()) {
        let mut model = UNet3d::new(narrow(1)).unwrap();
        let x = random_input([1, 3, d, h, w], seed);
        let y = model.forward(&x, Mode::Eval).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, d, h, w]);
        prop_assert!(y.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn minimal_batch_forward_and_backward() {
    let mut model = UNet3d::new(narrow(2)).unwrap();
    let x = random_input([2, 3, 8, 32, 32], 3);
    let y = model.forward(&x, Mode::Train).unwrap();
    assert_eq!(y.shape(), &[2, 2, 8, 32, 32]);
    let g = Array5::from_elem(y.raw_dim(), 1e-3f32);
    model.backward(&g).unwrap();
    // A second backward needs a fresh forward pass.
    assert!(model.backward(&g).is_err());
}

#[test]
fn bad_inputs_are_rejected() {
    let mut model = UNet3d::new(narrow(2)).unwrap();
    for shape in [[1, 3, 7, 32, 32], [1, 3, 8, 31, 32], [1, 3, 8, 32, 16], [1, 1, 8, 32, 32], [0, 3, 8, 32, 32]] {
        let err = model.forward(&random_input(shape, 0), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{shape:?}: {err}");
    }
    let mut x = random_input([1, 3, 8, 32, 32], 0);
    x[[0, 1, 2, 3, 4]] = f32::NAN;
    assert!(model.forward(&x, Mode::Eval).is_err());
    let bad = UNet3dConfig {
        num_classes: 1,
        ..UNet3dConfig::default()
    };
    assert!(UNet3d::new(bad).is_err());
}

#[test]
fn construction_and_evaluation_are_deterministic() {
    let mut a = UNet3d::new(narrow(5)).unwrap();
    let mut b = UNet3d::new(narrow(5)).unwrap();
    let mut c = UNet3d::new(narrow(6)).unwrap();
    assert_eq!(parameter_hash(&mut a), parameter_hash(&mut b));
    assert_ne!(parameter_hash(&mut a), parameter_hash(&mut c));
    let x = random_input([1, 3, 8, 40, 36], 1);
    let y1 = a.forward(&x, Mode::Eval).unwrap();
    let y2 = a.forward(&x, Mode::Eval).unwrap();
    let y3 = b.forward(&x, Mode::Eval).unwrap();
    assert_eq!(y1, y2);
    assert_eq!(y1, y3);
}

fn params(model: &mut UNet3d) -> BTreeMap<String, (ArrayD<f32>, ArrayD<f32>, bool)> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            out.insert(name.to_string(), (p.value.clone(), p.grad.clone(), p.frozen));
        }
    });
    out
}

fn buffers(model: &mut UNet3d) -> BTreeMap<String, ArrayD<f32>> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, slot| {
        if let Slot::Buffer(b) = slot {
            out.insert(name.to_string(), b.clone());
        }
    });
    out
}

fn train_step(model: &mut UNet3d, opt: &mut AdamW, seed: u64) {
    let x = random_input([2, 3, 8, 32, 32], seed);
    let t = random_labels(2, 8, 32, 32, seed + 1);
    zero_grad(model);
    let y = model.forward(&x, Mode::Train).unwrap();
    let (_, g) = combined_loss_grad_f32(&y, &t, &LossConfig::default()).unwrap();
    model.backward(&g).unwrap();
    opt.step(model, 1e-3, 1e-5);
}

#[test]
fn every_parameter_gets_a_finite_nonzero_gradient() {
    let mut model = UNet3d::new(narrow(7)).unwrap();
    let x = random_input([2, 3, 8, 32, 32], 8);
    let t = random_labels(2, 8, 32, 32, 9);
    zero_grad(&mut model);
    let y = model.forward(&x, Mode::Train).unwrap();
    let (_, g) = combined_loss_grad_f32(&y, &t, &LossConfig::default()).unwrap();
    model.backward(&g).unwrap();
    let p = params(&mut model);
    assert!(p.len() > 50);
    for (name, (_, grad, _)) in &p {
        assert!(grad.iter().all(|v| v.is_finite()), "{name}: non-finite gradient");
        assert!(grad.iter().any(|&v| v != 0.0), "{name}: zero gradient");
    }
}

#[test]
fn freeze_contract() {
    let mut model = UNet3d::new(narrow(10)).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let before = params(&mut model);
    let stats_before = buffers(&mut model);
    model.set_encoder_frozen(true);
    assert!(model.encoder_frozen());
    train_step(&mut model, &mut opt, 20);
    let after = params(&mut model);
    let stats_after = buffers(&mut model);
    let mut decoder_moved = 0;
    for (name, (v0, _, _)) in &before {
        let (v1, g1, frozen) = &after[name];
        let delta = v0.iter().zip(v1.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        if name.starts_with("encoder.") {
            assert!(*frozen, "{name} not marked frozen");
            assert_eq!(delta, 0.0, "{name} moved while frozen");
            assert!(g1.iter().all(|&v| v == 0.0), "{name} received a gradient while frozen");
        } else if delta > 0.0 {
            decoder_moved += 1;
        }
    }
    assert!(decoder_moved > 0);
    for (name, s) in &stats_before {
        if name.starts_with("encoder.") {
            assert_eq!(s, &stats_after[name], "{name} running statistic changed while frozen");
        }
    }

    model.set_encoder_frozen(false);
    train_step(&mut model, &mut opt, 30);
    let thawed = params(&mut model);
    let encoder_moved = after
        .iter()
        .filter(|(n, (v, _, _))| n.starts_with("encoder.") && thawed[*n].0 != *v)
        .count();
    assert!(encoder_moved > 0);
}

/// An encoder weight file laid out like the 18-layer video ResNet export,
/// including the classification head and batch counters the loader skips.
fn write_pretrained(path: &std::path::Path, source: &mut UNet3d) -> BTreeMap<String, ArrayD<f32>> {
    let mut arrays = BTreeMap::new();
    source.encoder.visit("", &mut |name, slot| {
        let a = match slot {
            Slot::Param(p) => p.value.clone(),
            Slot::Buffer(b) => b.clone(),
        };
        arrays.insert(name.to_string(), a);
    });
    let mut file = arrays.clone();
    file.insert("fc.weight".into(), ArrayD::zeros(ndarray::IxDyn(&[400, 16])));
    file.insert("fc.bias".into(), ArrayD::zeros(ndarray::IxDyn(&[400])));
    file.insert("layer1.0.conv1.1.num_batches_tracked".into(), ArrayD::zeros(ndarray::IxDyn(&[])));
    save_named_arrays(&file, path).unwrap();
    arrays
}

#[test]
fn pretrained_encoder_loads_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r3d18.safetensors");
    let mut donor = UNet3d::new(narrow(40)).unwrap();
    let expected = write_pretrained(&path, &mut donor);
    assert!(expected.contains_key("stem.0.weight"));
    assert!(expected.contains_key("layer4.1.conv2.1.running_var"));

    let mut cfg = narrow(41);
    cfg.pretrained_weights_path = Some(path.clone());
    let mut model = UNet3d::new(cfg).unwrap();
    let report = model.pretrained.clone().unwrap();
    assert_eq!(report.matched, expected.len());
    assert!(report.missing.is_empty());
    assert!(report.unexpected.is_empty());
    let mut loaded = BTreeMap::new();
    model.encoder.visit("", &mut |name, slot| {
        let a = match slot {
            Slot::Param(p) => p.value.clone(),
            Slot::Buffer(b) => b.clone(),
        };
        loaded.insert(name.to_string(), a);
    });
    assert_eq!(loaded, expected);

    // The decoder keeps its own seeded initialization.
    let mut plain = UNet3d::new(narrow(41)).unwrap();
    assert_eq!(params(&mut plain).get("decoder.classifier.weight").unwrap().0, params(&mut model)["decoder.classifier.weight"].0);
    // And the encoder features differ from the random-init encoder.
    let x = random_input([1, 3, 8, 32, 32], 2);
    let a = model.encode(&x).unwrap();
    let b = plain.encode(&x).unwrap();
    assert_ne!(a.levels[4], b.levels[4]);
}

#[test]
fn pretrained_shape_mismatch_names_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.safetensors");
    let mut wide = UNet3d::new(UNet3dConfig {
        encoder_channels: [8, 8, 8, 8, 16],
        ..narrow(0)
    })
    .unwrap();
    write_pretrained(&path, &mut wide);
    let mut cfg = narrow(1);
    cfg.pretrained_weights_path = Some(path);
    let err = UNet3d::new(cfg).unwrap_err().to_string();
    assert!(err.contains("stem.0.weight") || err.contains("shape mismatch"), "{err}");
    assert!(err.contains("shape mismatch"), "{err}");

    let path = dir.path().join("extra.safetensors");
    let mut arrays = BTreeMap::new();
    arrays.insert("layer9.0.conv1.0.weight".to_string(), ArrayD::zeros(ndarray::IxDyn(&[1])));
    save_named_arrays(&arrays, &path).unwrap();
    let mut cfg = narrow(1);
    cfg.pretrained_weights_path = Some(path);
    let err = UNet3d::new(cfg).unwrap_err().to_string();
    assert!(err.contains("layer9.0.conv1.0.weight"), "{err}");

    let mut cfg = narrow(1);
    cfg.pretrained_weights_path = Some(dir.path().join("absent.safetensors"));
    assert!(matches!(UNet3d::new(cfg).unwrap_err(), Error::MissingInput(_)));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    let mut a = UNet3d::new(narrow(50)).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    train_step(&mut a, &mut opt, 1);
    let meta = CheckpointMeta {
        config: a.config.clone(),
        session_index: 1,
        epoch: 7,
        tuning_dice: 0.625,
    };
    save_checkpoint(&mut a, &meta, &path).unwrap();
    let mut b = UNet3d::new(narrow(51)).unwrap();
    assert_ne!(parameter_hash(&mut a), parameter_hash(&mut b));
    assert_eq!(load_checkpoint(&mut b, &path).unwrap(), meta);
    assert_eq!(parameter_hash(&mut a), parameter_hash(&mut b));

    let mut other = UNet3d::new(UNet3dConfig {
        encoder_channels: [4, 4, 8, 16, 16],
        ..narrow(0)
    })
    .unwrap();
    let err = load_checkpoint(&mut other, &path).unwrap_err().to_string();
    assert!(err.contains("layer3"), "{err}");
}

fn set_classifier_bias(model: &mut UNet3d, bias: [f32; 2]) {
    model.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            if name == "decoder.classifier.weight" {
                p.value.fill(0.0);
            }
            if name == "decoder.classifier.bias" {
                p.value[[0]] = bias[0];
                p.value[[1]] = bias[1];
            }
        }
    });
}

#[test]
fn predicted_masks_return_on_the_native_grid() {
    let mut model = UNet3d::new(narrow(60)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vol = CtVolume::new(
        Array3::from_shape_simple_fn((13, 50, 47), || rng.random_range(-1000.0f32..200.0)),
        [2.5, 0.7, 0.7],
        "native",
    );
    let stage = StageSpec::new(8, 32, 32, 1).unwrap();
    set_classifier_bias(&mut model, [5.0, -5.0]);
    let empty = predict_mask(&mut model, &vol, &stage).unwrap();
    assert_eq!(empty.shape(), [13, 50, 47]);
    assert_eq!(empty.spacing, vol.spacing);
    assert_eq!(empty.positive_count(), 0);
    set_classifier_bias(&mut model, [-5.0, 5.0]);
    let full = predict_mask(&mut model, &vol, &stage).unwrap();
    assert_eq!(full.positive_count(), 13 * 50 * 47);
}

use ctseg_core::datapipe::augment::{draw_spatial, warp_image};
use ctseg_core::datapipe::resample::{nearest_index, source_coord};
use ctseg_core::datapipe::*;
use ctseg_core::metrics::volumetric_dice;
use ctseg_core::synthetic::{sphere_phantom, Sphere};
use ctseg_core::volume::{CtVolume, LabelMask};
use ndarray::{Array3, Array4, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(shape: [usize; 3], seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(shape, |_| rng.random::<f32>())
}

// Direct trilinear evaluation in f64 from first principles.
fn oracle_trilinear(src: &Array3<f32>, out: [usize; 3]) -> Array3<f64> {
    let n = src.shape().to_vec();
    Array3::from_shape_fn(out, |(d, h, w)| {
        let pos: Vec<f64> = [d, h, w]
            .iter()
            .enumerate()
            .map(|(a, &o)| {
                let x = (o as f64 + 0.5) * (n[a] as f64 / out[a] as f64) - 0.5;
                x.max(0.0).min((n[a] - 1) as f64)
            })
            .collect();
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut weight = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let lo = pos[a].floor();
                let t = pos[a] - lo;
                let hi_side = corner >> a & 1 == 1;
                idx[a] = if hi_side { (lo as usize + 1).min(n[a] - 1) } else { lo as usize };
                weight *= if hi_side { t } else { 1.0 - t };
            }
            acc += weight * f64::from(src[idx]);
        }
        acc
    })
}

#[test]
fn trilinear_matches_direct_oracle() {
    let src = random_volume([36, 224, 224], 1);
    let out = resample_trilinear(src.view(), [18, 112, 112]).unwrap();
    let want = oracle_trilinear(&src, [18, 112, 112]);
    let worst = out
        .iter()
        .zip(want.iter())
        .map(|(&a, &b)| (f64::from(a) - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "max deviation {worst}");
}

#[test]
fn trilinear_upsampling_matches_oracle() {
    let src = random_volume([5, 7, 9], 2);
    let out = resample_trilinear(src.view(), [11, 16, 13]).unwrap();
    let want = oracle_trilinear(&src, [11, 16, 13]);
    for (&a, &b) in out.iter().zip(want.iter()) {
        assert!((f64::from(a) - b).abs() < 1e-5);
    }
}

#[test]
fn identity_resample_keeps_values() {
    let src = random_volume([8, 33, 40], 3).mapv(|v| v * 2500.0 - 2000.0);
    let out = resample_trilinear(src.view(), [8, 33, 40]).unwrap();
    for (&a, &b) in out.iter().zip(src.iter()) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    let m = src.mapv(|v| u8::from(v > 0.0));
    assert_eq!(resample_nearest(m.view(), [8, 33, 40]).unwrap(), m);
}

#[test]
fn constant_mask_stays_constant() {
    let ones = Array3::<u8>::ones((13, 50, 47));
    for out in [[18, 112, 112], [8, 32, 32], [20, 256, 256]] {
        assert!(resample_nearest(ones.view(), out).unwrap().iter().all(|&v| v == 1));
    }
}

#[test]
fn degenerate_axis_is_rejected() {
    let src = Array3::<f32>::zeros((1, 40, 40));
    assert!(resample_trilinear(src.view(), [8, 32, 32]).is_err());
    let vol = CtVolume::new(src, [1.0; 3], "s");
    let mask = LabelMask::zeros([1, 40, 40], [1.0; 3]);
    assert!(resample_pair(&vol, &mask, &StageSpec::LOW).is_err());
}

#[test]
fn index_helpers_are_in_range() {
    for n in 2..40 {
        for m in 1..40 {
            for o in 0..m {
                let s = source_coord(o, n, m);
                assert!((0.0..=(n - 1) as f64).contains(&s));
                assert!(nearest_index(o, n, m) < n);
            }
        }
    }
    // Same length maps each index onto itself.
    assert!((0..17).all(|o| nearest_index(o, 17, 17) == o && source_coord(o, 17, 17) == o as f64));
}

#[test]
fn sphere_round_trip_dice() {
    let shape = [40, 96, 96];
    for (i, radius) in [8.0, 11.0, 15.0].into_iter().enumerate() {
        let (_, mask) = sphere_phantom(
            "s",
            shape,
            [1.0; 3],
            &[Sphere {
                center: [19.3, 47.0 + i as f64, 45.6],
                radius_mm: radius,
            }],
            0.0,
            0,
        );
        let down = resample_nearest(mask.voxels.view(), [18, 48, 48]).unwrap();
        let up = resample_nearest(down.view(), shape).unwrap();
        let dice = volumetric_dice(up.view(), mask.voxels.view()).unwrap();
        assert!(dice >= 0.8, "radius {radius}: dice {dice}");
    }
}

#[test]
fn normalization_endpoints() {
    let hu = Array3::from_shape_vec((1, 1, 3), vec![-2000.0f32, 500.0, -750.0]).unwrap();
    let n = normalize_intensity(hu.view()).unwrap();
    assert_eq!(n.as_slice().unwrap(), &[0.0, 1.0, 0.5]);
    let bad = Array3::from_elem((1, 1, 1), 600.0f32);
    assert!(normalize_intensity(bad.view()).is_err());
    let nan = Array3::from_elem((1, 1, 1), f32::NAN);
    assert!(normalize_intensity(nan.view()).is_err());
}

#[test]
fn replication() {
    let img = random_volume([18, 112, 112], 4);
    let rep = replicate_channels(img.view());
    assert_eq!(rep.shape(), &[3, 18, 112, 112]);
    for c in 0..3 {
        assert_eq!(rep.index_axis(Axis(0), c), img);
    }
    let z = replicate_channels(Array3::<f32>::zeros((2, 3, 4)).view());
    assert_eq!(z, Array4::<f32>::zeros((3, 2, 3, 4)));
}

fn sample(shape: [usize; 3], seed: u64) -> ModelSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Array3::from_shape_fn(shape, |_| rng.random::<f32>());
    let mask = Array3::from_shape_fn(shape, |_| u8::from(rng.random_bool(0.3)));
    ModelSample {
        image: replicate_channels(img.view()),
        mask,
        study_id: "s".into(),
        native_shape: shape,
        native_spacing: [1.0; 3],
    }
}

#[test]
fn disabled_augmentation_is_identity() {
    let s = sample([8, 32, 32], 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&s, &AugmentationConfig::disabled(), &mut rng).unwrap(), s);
}

#[test]
fn width_mirror() {
    let s = sample([8, 32, 40], 6);
    let mut cfg = AugmentationConfig::disabled();
    cfg.mirror.enabled = true;
    cfg.mirror.p = 1.0;
    let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let w = 40;
    for ((c, d, h, x), &v) in out.image.indexed_iter() {
        assert_eq!(v, s.image[[c, d, h, w - 1 - x]]);
    }
    for ((d, h, x), &v) in out.mask.indexed_iter() {
        assert_eq!(v, s.mask[[d, h, w - 1 - x]]);
    }
}

#[test]
fn quarter_turn_moves_single_voxel_where_rotation_sends_it() {
    let (d, h, w) = (8, 33, 33);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let t = InPlaneTransform::rotation(90.0, h, w);
    let draw = SpatialDraw {
        warp: t,
        flips: [false; 3],
    };
    for (pd, ph, pw) in [(3, 5, 20), (0, 16, 16), (7, 0, 32), (2, 30, 1)] {
        let mut mask = Array3::<u8>::zeros((d, h, w));
        mask[[pd, ph, pw]] = 1;
        let out = draw.apply_mask(mask.view());
        // Rotate the offset from the centre by +90 degrees.
        let (x, y) = (pw as f64 - cx, ph as f64 - cy);
        let (xr, yr) = (-y, x);
        let want = (pd, (yr + cy).round() as usize, (xr + cx).round() as usize);
        let hits: Vec<_> = out.indexed_iter().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
        assert_eq!(hits, vec![want]);
    }
}

#[test]
fn homography_from_correspondences_maps_corners() {
    let dst = [[0.0, 0.0], [31.0, 0.0], [31.0, 31.0], [0.0, 31.0]];
    let src = [[1.5, -2.0], [30.0, 1.0], [33.0, 29.0], [-1.0, 30.5]];
    let t = InPlaneTransform::from_correspondences(dst, src).unwrap();
    for (a, b) in dst.iter().zip(&src) {
        let (x, y) = t.source_of(a[0], a[1]).unwrap();
        assert!((x - b[0]).abs() < 1e-9 && (y - b[1]).abs() < 1e-9);
    }
}

#[test]
fn identity_warp_is_exact() {
    let img = random_volume([2, 9, 11], 7);
    assert_eq!(warp_image(img.view(), &InPlaneTransform::identity()), img);
}

#[test]
fn augmentation_is_deterministic_per_stream() {
    let s = sample([8, 32, 32], 8);
    let cfg = AugmentationConfig::default();
    let a = augment(&s, &cfg, &mut stream_rng(7, &[1, 2, 3])).unwrap();
    let b = augment(&s, &cfg, &mut stream_rng(7, &[1, 2, 3])).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn augmented_masks_stay_binary(seed in any::<u64>()) {
        let s = sample([8, 32, 32], seed);
        let mut cfg = AugmentationConfig::default();
        cfg.rotation.p = 1.0;
        cfg.perspective.p = 1.0;
        cfg.mirror.p = 1.0;
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(out.mask.iter().all(|&v| v <= 1));
        prop_assert_eq!(out.image.dim(), s.image.dim());
        prop_assert!(out.image.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spatial_transforms_commute_with_replication(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Array3::from_shape_fn((8, 32, 36), |_| rng.random::<f32>());
        let mut cfg = AugmentationConfig::default();
        cfg.rotation.p = 1.0;
        cfg.perspective.p = 1.0;
        cfg.mirror.axes = [true, true, true];
        let draw = draw_spatial(&cfg, 32, 36, &mut rng).unwrap();
        let a = replicate_channels(draw.apply_image(img.view()).view());
        let rep = replicate_channels(img.view());
        for c in 0..3 {
            prop_assert_eq!(draw.apply_image(rep.index_axis(Axis(0), c)), a.index_axis(Axis(0), c).to_owned());
        }
    }

    #[test]
    fn batches_have_stage_shape(b in 1usize..4, d in 8usize..12, h in 32usize..40) {
        let samples: Vec<ModelSample> = (0..b).map(|i| sample([d, h, 33], i as u64)).collect();
        let refs: Vec<&ModelSample> = samples.iter().collect();
        let (x, y) = assemble_batch(&refs).unwrap();
        prop_assert_eq!(x.shape(), &[b, 3, d, h, 33]);
        prop_assert_eq!(y.shape(), &[b, d, h, 33]);
    }
}

#[test]
fn augmentation_config_validation() {
    let mut cfg = AugmentationConfig::default();
    assert!(cfg.validate().is_ok());
    cfg.noise.p = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = AugmentationConfig::default();
    cfg.rotation.max_degrees = f64::INFINITY;
    assert!(cfg.validate().is_err());
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("study{i:03}")).collect()
}

#[test]
fn split_sizes() {
    let s = split_dataset(&ids(117), 42).unwrap();
    assert_eq!((s.train_ids.len(), s.tune_ids.len()), (100, 17));
    let s = split_dataset(&ids(20), 42).unwrap();
    assert_eq!((s.train_ids.len(), s.tune_ids.len()), (17, 3));
    let s = split_dataset(&ids(2), 1).unwrap();
    assert_eq!((s.train_ids.len(), s.tune_ids.len()), (1, 1));
    assert!(split_dataset(&ids(1), 1).is_err());
}

#[test]
fn split_is_deterministic_and_covers() {
    let all = ids(117);
    let a = split_dataset(&all, 9).unwrap();
    assert_eq!(a, split_dataset(&all, 9).unwrap());
    let mut shuffled = all.clone();
    shuffled.reverse();
    assert_eq!(a, split_dataset(&shuffled, 9).unwrap(), "input order does not matter");
    assert_ne!(a.tune_ids, split_dataset(&all, 10).unwrap().tune_ids);
    let mut union: Vec<String> = a.train_ids.iter().chain(&a.tune_ids).cloned().collect();
    union.sort();
    assert_eq!(union, all);
}

#[test]
fn stage_validation() {
    assert!(StageSpec::new(8, 32, 32, 1).is_ok());
    assert!(StageSpec::new(7, 32, 32, 1).is_err());
    assert!(StageSpec::new(8, 31, 32, 1).is_err());
    assert!(StageSpec::new(8, 32, 32, 0).is_err());
    assert_eq!(StageSpec::LOW.shape(), [18, 112, 112]);
    assert_eq!(StageSpec::HIGH.batch_size, 1);
}

#[test]
fn prepared_sample_invariants() {
    let (vol, mask) = sphere_phantom("p", [30, 70, 60], [2.0, 0.8, 0.8], &[Sphere { center: [15.0, 35.0, 30.0], radius_mm: 12.0 }], 40.0, 1);
    let spec = StageSpec::new(8, 32, 32, 2).unwrap();
    let s = prepare_sample(&vol, &mask, &spec).unwrap();
    assert_eq!(s.image.shape(), &[3, 8, 32, 32]);
    assert_eq!(s.native_shape, [30, 70, 60]);
    assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(s.image.index_axis(Axis(0), 0), s.image.index_axis(Axis(0), 2));
    assert!(s.mask.iter().any(|&v| v == 1));
}

//! Acceptance checks, run in order with one result line per criterion.
//!
//! `cargo test -p ctseg-core --test acceptance`. Criterion 10 reads finished
//! evaluation reports from the directory in `CTSEG_REPRO_REPORTS` and is
//! skipped when that variable is unset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, Array4, Array5, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctseg_core::datapipe::{prepare_sample, split_dataset, AugmentationConfig, ModelSample, StageSpec, StudySource};
use ctseg_core::ingest::{
    convert_dicom_dataset, read_mask, read_volume, AnnotationSchema, DicomConversion, Manifest, MergeRule,
};
use ctseg_core::losses::{combined_loss, combined_loss_grad, combined_loss_grad_f32, LossConfig};
use ctseg_core::metrics::{format_table, normalized_surface_dice, volumetric_dice, MetricsReport, TableMetric};
use ctseg_core::nn::{zero_grad, AdamW, AdamWConfig, Mode, Slot, Tensor, Visit};
use ctseg_core::synthetic::{annotation_export, annotation_record, random_phantom, write_dicom_series, SeriesSpec};
use ctseg_core::trainengine::*;
use ctseg_core::unet3d::weights::{load_checkpoint, parameter_hash};
use ctseg_core::unet3d::{UNet3d, UNet3dConfig};

const METRIC_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(120);
const SHAPE_BUDGET: Duration = Duration::from_secs(180);
const OVERFIT_BUDGET: Duration = Duration::from_secs(900);
const FD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const OVERFIT_MIN_DICE: f64 = 0.8;
const REPRO_DICE: f64 = 0.679;
const REPRO_BAND: f64 = 0.10;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------------------------------------------------------------- metrics

fn random_mask(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Array3<u8> {
    let (d, h, w) = dims;
    let mut m = Array3::<u8>::zeros(dims);
    match rng.random_range(0..4) {
        0 => {
            let p = rng.random_range(0.05..0.6);
            m.mapv_inplace(|_| u8::from(rng.random_bool(p)));
        }
        1 => {
            for _ in 0..rng.random_range(1..4) {
                let c = [rng.random_range(0.0..d as f64), rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)];
                let r = [rng.random_range(0.5..d as f64 / 2.0 + 1.0), rng.random_range(0.5..h as f64 / 2.0 + 1.0), rng.random_range(0.5..w as f64 / 2.0 + 1.0)];
                for ((z, y, x), v) in m.indexed_iter_mut() {
                    let q = ((z as f64 - c[0]) / r[0]).powi(2) + ((y as f64 - c[1]) / r[1]).powi(2) + ((x as f64 - c[2]) / r[2]).powi(2);
                    if q <= 1.0 {
                        *v = 1;
                    }
                }
            }
        }
        2 => {
            for _ in 0..rng.random_range(1..4) {
                let z0 = rng.random_range(0..d);
                let y0 = rng.random_range(0..h);
                let x0 = rng.random_range(0..w);
                let z1 = rng.random_range(z0..d) + 1;
                let y1 = rng.random_range(y0..h) + 1;
                let x1 = rng.random_range(x0..w) + 1;
                m.slice_mut(s![z0..z1, y0..y1, x0..x1]).fill(1);
            }
        }
        _ => {}
    }
    // Salt noise on structured masks.
    if rng.random_bool(0.5) {
        let p = rng.random_range(0.0..0.05);
        m.mapv_inplace(|v| if rng.random_bool(p) { 1 - v } else { v });
    }
    m
}

fn perturbed(rng: &mut ChaCha8Rng, a: &Array3<u8>) -> Array3<u8> {
    let (d, h, w) = a.dim();
    match rng.random_range(0..3) {
        0 => random_mask(rng, (d, h, w)),
        1 => {
            let sh = [rng.random_range(-2i64..=2), rng.random_range(-3i64..=3), rng.random_range(-3i64..=3)];
            Array3::from_shape_fn((d, h, w), |(z, y, x)| {
                let src = [z as i64 - sh[0], y as i64 - sh[1], x as i64 - sh[2]];
                if src[0] >= 0 && src[1] >= 0 && src[2] >= 0 && (src[0] as usize) < d && (src[1] as usize) < h && (src[2] as usize) < w {
                    a[[src[0] as usize, src[1] as usize, src[2] as usize]]
                } else {
                    0
                }
            })
        }
        _ => {
            let p = rng.random_range(0.0..0.2);
            a.mapv(|v| if rng.random_bool(p) { 1 - v } else { v })
        }
    }
}

fn oracle_dice(p: &Array3<u8>, g: &Array3<u8>) -> f64 {
    let pc = p.iter().filter(|&&v| v != 0).count();
    let gc = g.iter().filter(|&&v| v != 0).count();
    let both = p.iter().zip(g).filter(|(&a, &b)| a != 0 && b != 0).count();
    if pc + gc == 0 {
        1.0
    } else {
        2.0 * both as f64 / (pc + gc) as f64
    }
}

/// Foreground voxels with at least one background or out-of-grid
/// six-neighbour.
fn oracle_surface(m: &Array3<u8>) -> Vec<[usize; 3]> {
    let (d, h, w) = m.dim();
    let get = |z: i64, y: i64, x: i64| -> u8 {
        if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
            0
        } else {
            m[[z as usize, y as usize, x as usize]]
        }
    };
    let mut out = Vec::new();
    for ((z, y, x), &v) in m.indexed_iter() {
        if v == 0 {
            continue;
        }
        let (z, y, x) = (z as i64, y as i64, x as i64);
        let nb = [(z - 1, y, x), (z + 1, y, x), (z, y - 1, x), (z, y + 1, x), (z, y, x - 1), (z, y, x + 1)];
        if nb.iter().any(|&(a, b, c)| get(a, b, c) == 0) {
            out.push([z as usize, y as usize, x as usize]);
        }
    }
    out
}

/// For each voxel of `from`, the squared distance to the nearest voxel of `to`.
fn nearest_sq(from: &[[usize; 3]], to: &[[usize; 3]], sp: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    let dz = (a[0] as f64 - b[0] as f64) * sp[0];
                    let dy = (a[1] as f64 - b[1] as f64) * sp[1];
                    let dx = (a[2] as f64 - b[2] as f64) * sp[2];
                    dz * dz + (dy * dy + dx * dx)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn criterion_metrics() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let taus = [0.5, 1.0, 3.0];
    let (mut worst_dice, mut worst_nsd) = (0.0f64, 0.0f64);
    for case in 0..200 {
        let dims = (rng.random_range(1..=32), rng.random_range(1..=32), rng.random_range(1..=32));
        let sp = [rng.random_range(0.3..5.0), rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)];
        let p = random_mask(&mut rng, dims);
        let g = perturbed(&mut rng, &p);
        let dice = volumetric_dice(p.view(), g.view()).unwrap();
        worst_dice = worst_dice.max((dice - oracle_dice(&p, &g)).abs());
        let (sp_, sg) = (oracle_surface(&p), oracle_surface(&g));
        let (dpg, dgp) = (nearest_sq(&sp_, &sg, sp), nearest_sq(&sg, &sp_, sp));
        for tau in taus {
            let want = if sp_.is_empty() && sg.is_empty() {
                1.0
            } else if sp_.is_empty() || sg.is_empty() {
                0.0
            } else {
                let hits = dpg.iter().chain(&dgp).filter(|&&d| d <= tau * tau).count();
                hits as f64 / (sp_.len() + sg.len()) as f64
            };
            let got = normalized_surface_dice(p.view(), g.view(), sp, tau).unwrap();
            let err = (got - want).abs();
            if err > METRIC_TOL {
                return Outcome::Fail(format!("case {case} tau {tau}: nsd {got} vs oracle {want}"));
            }
            worst_nsd = worst_nsd.max(err);
        }
    }
    let el = t0.elapsed();
    verdict(
        worst_dice <= METRIC_TOL && worst_nsd <= METRIC_TOL && el < METRIC_BUDGET,
        format!("200 pairs, max |dice err| {worst_dice:.1e}, max |nsd err| {worst_nsd:.1e}, tol {METRIC_TOL:.0e}, limit {}s", METRIC_BUDGET.as_secs()),
    )
}

// ------------------------------------------------------------------ model

fn random_input(shape: [usize; 5], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array5::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
}

fn random_labels(b: usize, d: usize, h: usize, w: usize, seed: u64) -> Array4<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((b, d, h, w), || u8::from(rng.random_bool(0.3)))
}

fn criterion_shapes() -> Outcome {
    let t0 = Instant::now();
    let mut model = UNet3d::new(UNet3dConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut shapes = vec![[18, 112, 112], [20, 256, 256]];
    for _ in 0..3 {
        shapes.push([rng.random_range(8..=24), rng.random_range(32..=128), rng.random_range(32..=128)]);
    }
    for (i, sh) in shapes.iter().enumerate() {
        let x = random_input([1, 3, sh[0], sh[1], sh[2]], i as u64);
        let y = match model.forward(&x, Mode::Eval) {
            Ok(y) => y,
            Err(e) => return Outcome::Fail(format!("{sh:?}: {e}")),
        };
        if y.shape() != [1, 2, sh[0], sh[1], sh[2]] {
            return Outcome::Fail(format!("{sh:?} gave {:?}", y.shape()));
        }
    }
    let el = t0.elapsed();
    verdict(
        el < SHAPE_BUDGET,
        format!("full-width model, shapes {shapes:?} preserved, limit {}s", SHAPE_BUDGET.as_secs()),
    )
}

fn param_values(model: &mut UNet3d) -> BTreeMap<String, ArrayD<f32>> {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            out.insert(name.to_string(), p.value.clone());
        }
    });
    out
}

fn step(model: &mut UNet3d, opt: &mut AdamW, seed: u64) {
    let x = random_input([2, 3, 8, 32, 32], seed);
    let t = random_labels(2, 8, 32, 32, seed + 1);
    zero_grad(model);
    let y = model.forward(&x, Mode::Train).unwrap();
    let (_, g) = combined_loss_grad_f32(&y, &t, &LossConfig::default()).unwrap();
    model.backward(&g).unwrap();
    opt.step(model, 1e-3, 1e-5);
}

fn max_delta(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn criterion_freeze() -> Outcome {
    let mut model = UNet3d::new(UNet3dConfig::default()).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let before = param_values(&mut model);
    model.set_encoder_frozen(true);
    step(&mut model, &mut opt, 1);
    let frozen = param_values(&mut model);
    let mut enc_max = 0.0f32;
    let mut dec_moved = 0;
    for (name, v0) in &before {
        let d = max_delta(v0, &frozen[name]);
        if name.starts_with("encoder.") {
            enc_max = enc_max.max(d);
        } else if d > 0.0 {
            dec_moved += 1;
        }
    }
    model.set_encoder_frozen(false);
    step(&mut model, &mut opt, 3);
    let thawed = param_values(&mut model);
    let enc_moved = frozen
        .iter()
        .filter(|(n, v)| n.starts_with("encoder.") && max_delta(v, &thawed[*n]) > 0.0)
        .count();
    verdict(
        enc_max == 0.0 && dec_moved >= 1 && enc_moved >= 1,
        format!("frozen step: encoder max |d| {enc_max}, {dec_moved} decoder tensors moved; unfrozen step: {enc_moved} encoder tensors moved"),
    )
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scores = Array5::from_shape_simple_fn((1, 2, 2, 2, 2), || rng.random_range(-3.0..3.0));
    let target = Array4::from_shape_fn((1, 2, 2, 2), |(_, z, y, x)| u8::from((z + y + x) % 2 == 0));
    let cfg = LossConfig::default();
    let (_, g) = combined_loss_grad(scores.view(), target.view(), &cfg).unwrap();
    let mut worst = 0.0f64;
    for i in 0..scores.len() {
        let mut up = scores.clone();
        let mut dn = scores.clone();
        up.as_slice_mut().unwrap()[i] += FD_STEP;
        dn.as_slice_mut().unwrap()[i] -= FD_STEP;
        let fu = combined_loss(up.view(), target.view(), &cfg).unwrap().total;
        let fd = combined_loss(dn.view(), target.view(), &cfg).unwrap().total;
        let numeric = (fu - fd) / (2.0 * FD_STEP);
        let analytic = g.as_slice().unwrap()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }

    let mut model = UNet3d::new(UNet3dConfig::default()).unwrap();
    let x = random_input([2, 3, 8, 32, 32], 5);
    let t = random_labels(2, 8, 32, 32, 6);
    zero_grad(&mut model);
    let y = model.forward(&x, Mode::Train).unwrap();
    let (_, gy) = combined_loss_grad_f32(&y, &t, &cfg).unwrap();
    model.backward(&gy).unwrap();
    let (mut total, mut finite, mut nonzero) = (0, 0, 0);
    model.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            total += 1;
            finite += usize::from(p.grad.iter().all(|v| v.is_finite()));
            nonzero += usize::from(p.grad.iter().any(|&v| v != 0.0));
        }
    });
    verdict(
        worst < FD_REL_TOL && finite == total,
        format!("2x2x2 loss: max rel err {worst:.2e} (tol {FD_REL_TOL:.0e}); {finite}/{total} parameter gradients finite, {nonzero} nonzero"),
    )
}

fn criterion_overfit() -> Outcome {
    let t0 = Instant::now();
    let stage = StageSpec::new(8, 64, 64, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<ModelSample> = (0..2)
        .map(|i| {
            let (v, m) = random_phantom(&format!("phantom{i}"), [16, 96, 96], [2.5, 0.8, 0.8], &mut rng);
            prepare_sample(&v, &m, &stage).unwrap()
        })
        .collect();
    let src = StudySource::from_samples(samples, stage).unwrap();
    let c0 = 16;
    let mut cfg = UNet3dConfig::default();
    cfg.encoder_channels = [c0, c0, 2 * c0, 4 * c0, 8 * c0];
    let mut model = UNet3d::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut opts = TrainOptions::new(dir.path(), 1);
    opts.augmentation = AugmentationConfig::disabled();
    opts.save_resume_state = false;
    let steps = 200;
    let lr = 3e-3;
    let spec = SessionSpec {
        stage,
        frozen_epochs: 0,
        frozen_lr: lr,
        main_epochs: steps,
        base_lr: lr,
        weight_decay: 1e-5,
    };
    // One batch per epoch; a rising script keeps the final weights.
    let script = (1..=steps).map(|e| e as f64 / steps as f64).collect();
    let mut data = SessionData {
        train: src.clone(),
        tune: Box::new(ScriptedEvaluator::new(script)),
    };
    if let Err(e) = run_session(&mut model, &mut data, &spec, 0, &opts, None) {
        return Outcome::Fail(format!("training failed: {e}"));
    }
    let taken = read_log(&opts.log_path())
        .unwrap()
        .iter()
        .filter(|r| matches!(r, LogRecord::Step { .. }))
        .count();
    let res = evaluate_samples(&mut model, src.samples(), &LossConfig::default()).unwrap();
    let el = t0.elapsed();
    verdict(
        taken == steps && res.dice >= OVERFIT_MIN_DICE && el < OVERFIT_BUDGET,
        format!(
            "{taken} steps at stage 8x64x64, encoder width {c0}, train dice {:.4} (need {OVERFIT_MIN_DICE}), limit {}s",
            res.dice,
            OVERFIT_BUDGET.as_secs()
        ),
    )
}

// ---------------------------------------------------------------- ingest

/// Even-odd membership by a leftward ray, with points on an edge counted
/// inside. Exact integer arithmetic.
fn inside(poly: &[[i64; 2]], x: i64, y: i64) -> bool {
    let n = poly.len();
    let mut odd = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let (px, py) = (x - a[0], y - a[1]);
        let on_line = ex * py - ey * px == 0;
        let dot = ex * px + ey * py;
        if on_line && dot >= 0 && dot <= ex * ex + ey * ey {
            return true;
        }
        if (a[1] <= y) != (b[1] <= y) {
            // Crossing abscissa a.x + py·ex/ey lies left of x.
            let lhs = px * ey;
            let rhs = py * ex;
            if (ey > 0 && lhs > rhs) || (ey < 0 && lhs < rhs) {
                odd = !odd;
            }
        }
    }
    odd
}

fn random_polygon(rng: &mut ChaCha8Rng, rows: i64, cols: i64) -> Vec<[i64; 2]> {
    (0..rng.random_range(3..8))
        .map(|_| [rng.random_range(-2..cols + 2), rng.random_range(-2..rows + 2)])
        .collect()
}

fn criterion_ingest() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("raw");
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (slices, rows, cols) = (5usize, 24usize, 20usize);
    let studies = [("1.3.6.1.100", 2.5, -1200.0, true), ("1.3.6.1.200", 1.0, -1024.0, false)];
    let mut records = Vec::new();
    let mut expected_hu = BTreeMap::new();
    let mut expected_mask = BTreeMap::new();
    for (i, &(uid, slope, intercept, signed)) in studies.iter().enumerate() {
        let mut spec = SeriesSpec::new(uid, &format!("{uid}.1"), slices, rows, cols);
        spec.rescale_slope = slope;
        spec.rescale_intercept = intercept;
        spec.signed = signed;
        let range = if signed { -800..1300 } else { 0..3000 };
        let stored: Vec<Array2<i32>> = (0..slices)
            .map(|_| Array2::from_shape_simple_fn((rows, cols), || rng.random_range(range.clone())))
            .collect();
        let sops = write_dicom_series(&root.join(format!("p{i}")), &spec, &stored).unwrap();
        let hu = Array3::from_shape_fn((slices, rows, cols), |(k, r, c)| {
            (slope * f64::from(stored[k][[r, c]]) + intercept).clamp(-2000.0, 500.0) as f32
        });
        let mut mask = Array3::<u8>::zeros((slices, rows, cols));
        for k in [1, 3] {
            let mut polys = Vec::new();
            for who in ["reader1", "reader2"] {
                for _ in 0..rng.random_range(1..3) {
                    let p = random_polygon(&mut rng, rows as i64, cols as i64);
                    let verts: Vec<[f64; 2]> = p.iter().map(|v| [v[0] as f64, v[1] as f64]).collect();
                    records.push(annotation_record(uid, &sops[k], who, &verts));
                    polys.push(p);
                }
            }
            for ((r, c), v) in mask.index_axis_mut(Axis(0), k).indexed_iter_mut() {
                *v = u8::from(polys.iter().any(|p| inside(p, c as i64, r as i64)));
            }
        }
        expected_hu.insert(uid.to_string(), hu);
        expected_mask.insert(uid.to_string(), mask);
    }
    let annotations = dir.path().join("annotations.json");
    std::fs::write(&annotations, serde_json::to_string(&annotation_export(records)).unwrap()).unwrap();
    let out = dir.path().join("nifti");
    let outcome = convert_dicom_dataset(&DicomConversion {
        dicom_root: &root,
        annotations: &annotations,
        schema: &AnnotationSchema::default(),
        merge: MergeRule::Union,
        out_dir: &out,
        dataset_name: "synthetic",
    })
    .unwrap();
    if !outcome.failures.is_empty() {
        return Outcome::Fail(format!("conversion failures: {:?}", outcome.failures));
    }
    let manifest_path = out.join("manifest.json");
    outcome.manifest.write(&manifest_path).unwrap();
    let manifest = Manifest::read(&manifest_path).unwrap();
    let (mut hu_bad, mut mask_bad, mut voxels, mut positives, mut clipped) = (0, 0, 0, 0, [0, 0]);
    for e in &manifest.entries {
        let vol = read_volume(&manifest.resolve(&e.ct_path)).unwrap();
        let (mask, _) = read_mask(&manifest.resolve(&e.seg_path)).unwrap();
        let hu = &expected_hu[&e.study_id];
        let m = &expected_mask[&e.study_id];
        hu_bad += vol.voxels.iter().zip(hu).filter(|(a, b)| a != b).count();
        mask_bad += mask.voxels.iter().zip(m).filter(|(a, b)| a != b).count();
        voxels += hu.len();
        positives += m.iter().filter(|&&v| v != 0).count();
        clipped[0] += hu.iter().filter(|&&v| v == -2000.0).count();
        clipped[1] += hu.iter().filter(|&&v| v == 500.0).count();
    }
    verdict(
        manifest.entries.len() == 2 && hu_bad == 0 && mask_bad == 0 && clipped[0] > 0 && clipped[1] > 0,
        format!(
            "{} studies, {voxels} voxels ({} at -2000, {} at 500), {hu_bad} intensity and {mask_bad} mask mismatches, {positives} labelled voxels",
            manifest.entries.len(),
            clipped[0],
            clipped[1]
        ),
    )
}

// --------------------------------------------------------------- schedule

fn criterion_schedule() -> Outcome {
    let (base, total) = (1e-3, 1000);
    let lr: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, base, 0.25, 25.0, 1e4).unwrap()).collect();
    let peak = warmup_steps(total, 0.25);
    let rising = (1..=peak).all(|s| lr[s] > lr[s - 1]);
    let falling = (peak + 1..total).all(|s| lr[s] < lr[s - 1]);
    verdict(
        lr[0] == base / 25.0 && peak == 250 && lr[peak] == base && rising && falling,
        format!("start {:e}, peak {:e} at step {peak}, end {:e}, monotone up {rising}, down {falling}", lr[0], lr[peak], lr[total - 1]),
    )
}

// ------------------------------------------------------------- checkpoint

fn criterion_checkpoint() -> Outcome {
    let stage = StageSpec::new(8, 32, 32, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<ModelSample> = (0..2)
        .map(|i| {
            let (v, m) = random_phantom(&format!("s{i}"), [10, 40, 40], [2.0, 0.8, 0.8], &mut rng);
            prepare_sample(&v, &m, &stage).unwrap()
        })
        .collect();
    let train = StudySource::from_samples(samples, stage).unwrap();
    let spec = SessionSpec {
        stage,
        frozen_epochs: 0,
        frozen_lr: 5e-3,
        main_epochs: 3,
        base_lr: 2e-3,
        weight_decay: 1e-5,
    };
    let script = vec![0.3, 0.5, 0.4];
    let tiny = || {
        let mut cfg = UNet3dConfig::default();
        cfg.encoder_channels = [4, 4, 8, 8, 16];
        UNet3d::new(cfg).unwrap()
    };
    let data = || SessionData {
        train: train.clone(),
        tune: Box::new(ScriptedEvaluator::new(script.clone())),
    };

    // Weights after exactly two epochs.
    let twin_dir = tempfile::tempdir().unwrap();
    let mut twin = tiny();
    let mut opts = TrainOptions::new(twin_dir.path(), 9);
    opts.stop_after_epochs = Some(2);
    let _ = run_session(&mut twin, &mut data(), &spec, 0, &opts, None);
    let epoch2 = parameter_hash(&mut twin);

    let dir = tempfile::tempdir().unwrap();
    let mut model = tiny();
    let opts = TrainOptions::new(dir.path(), 9);
    let rec = run_session(&mut model, &mut data(), &spec, 0, &opts, None).unwrap();
    let in_memory = parameter_hash(&mut model);
    let mut fresh = tiny();
    let meta = load_checkpoint(&mut fresh, &rec.path).unwrap();
    let reloaded = parameter_hash(&mut fresh);
    verdict(
        rec.epoch == 2 && meta.epoch == 2 && in_memory == epoch2 && reloaded == epoch2,
        format!(
            "kept epoch {} (dice {}), session-end weights match epoch 2: {}, checkpoint file matches: {}",
            rec.epoch,
            rec.tuning_dice,
            in_memory == epoch2,
            reloaded == epoch2
        ),
    )
}

// ------------------------------------------------------------------ split

fn criterion_split() -> Outcome {
    let ids: Vec<String> = (0..117).map(|i| format!("study{i:03}")).collect();
    let a = split_dataset(&ids, 42).unwrap();
    let b = split_dataset(&ids, 42).unwrap();
    let c = split_dataset(&ids, 43).unwrap();
    let mut all: Vec<&String> = a.train_ids.iter().chain(&a.tune_ids).collect();
    all.sort();
    all.dedup();
    verdict(
        (a.train_ids.len(), a.tune_ids.len()) == (100, 17) && a == b && a.tune_ids != c.tune_ids && all.len() == 117,
        format!(
            "117 -> ({}, {}), same seed identical: {}, disjoint cover: {}",
            a.train_ids.len(),
            a.tune_ids.len(),
            a == b,
            all.len() == 117
        ),
    )
}

// ----------------------------------------------------------- reproduction

fn row_is_well_formed(line: &str) -> bool {
    let cells: Vec<&str> = line.split('|').map(str::trim).collect();
    if cells.len() != 7 || !cells[0].is_empty() || !cells[6].is_empty() || cells[1].is_empty() {
        return false;
    }
    let three_dp = |s: &str| {
        s.parse::<f64>().is_ok() && s.split_once('.').is_some_and(|(_, f)| f.len() == 3)
    };
    let mean_std = cells[3].split_once(" ± ").is_some_and(|(m, s)| three_dp(m) && three_dp(s));
    cells[2].parse::<usize>().is_ok() && mean_std && three_dp(cells[4]) && three_dp(cells[5])
}

fn criterion_reproduction() -> Outcome {
    let Some(dir) = std::env::var_os("CTSEG_REPRO_REPORTS") else {
        return Outcome::Skip("set CTSEG_REPRO_REPORTS to a directory of *_report.json files".into());
    };
    let dir = Path::new(&dir);
    let mut paths: Vec<_> = match std::fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with("_report.json"))
            .collect(),
        Err(e) => return Outcome::Fail(format!("{}: {e}", dir.display())),
    };
    paths.sort();
    let reports: Vec<MetricsReport> = match paths.iter().map(|p| MetricsReport::read_json(p)).collect() {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("unreadable report: {e}")),
    };
    let Some(ricord) = reports.iter().find(|r| r.dataset_name.to_lowercase().contains("ricord")) else {
        return Outcome::Fail(format!("no RICORD report among {} files", reports.len()));
    };
    let mut formatted = true;
    for metric in [TableMetric::Dice, TableMetric::Nsd] {
        let table = format_table(&reports, metric);
        let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Dataset")).collect();
        formatted &= rows.len() == reports.len() && rows.iter().all(|l| row_is_well_formed(l));
    }
    let dice = ricord.dice.mean;
    verdict(
        formatted && (dice - REPRO_DICE).abs() <= REPRO_BAND,
        format!("{} reports, tables well formed: {formatted}, tuning dice {dice:.3} (target {REPRO_DICE} ± {REPRO_BAND})", reports.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric oracle equivalence", criterion_metrics),
        ("shape contract", criterion_shapes),
        ("freeze contract", criterion_freeze),
        ("gradient checks", criterion_gradients),
        ("overfit sanity", criterion_overfit),
        ("ingestion round trip", criterion_ingest),
        ("schedule contract", criterion_schedule),
        ("checkpoint selection", criterion_checkpoint),
        ("split contract", criterion_split),
        ("full reproduction (optional)", criterion_reproduction),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = check();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {}: {name}: {detail} ({secs:.1}s)", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

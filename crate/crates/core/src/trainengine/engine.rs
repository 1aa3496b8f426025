//! Session and plan execution: batches, schedule, freezing, tuning and
//! checkpoint selection.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{assemble_batch, augment, epoch_batches, stream_rng, AugmentationConfig, ModelSample, StudySource};
use crate::error::{Error, Result};
use crate::losses::{argmax_labels, combined_loss_f32, combined_loss_grad_f32, LossConfig};
use crate::metrics::volumetric_dice;
use crate::nn::{zero_grad, AdamW, AdamWConfig, Mode, Slot, Visit};
use crate::unet3d::weights::{load_checkpoint, load_optimizer, save_checkpoint, save_optimizer};
use crate::unet3d::{CheckpointMeta, UNet3d};

use super::plan::{CheckpointRecord, SessionSpec, TrainingPlan};
use super::schedule::OneCycleConfig;

/// Tuning score after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub dice: f64,
    pub loss: f64,
}

/// Scores the model between epochs.
pub trait TuneEvaluator {
    fn evaluate(&mut self, model: &mut UNet3d, session: usize, epoch: usize) -> Result<TuneResult>;
}

/// Mean volumetric Dice and loss over un-augmented samples at stage
/// resolution.
pub struct DiceEvaluator {
    pub source: StudySource,
    pub loss: LossConfig,
}

impl DiceEvaluator {
    pub fn new(source: StudySource, loss: LossConfig) -> Self {
        DiceEvaluator { source, loss }
    }
}

/// Mean Dice and loss of `model` over `samples`, one volume at a time.
pub fn evaluate_samples<'a>(
    model: &mut UNet3d,
    samples: impl Iterator<Item = &'a ModelSample>,
    loss: &LossConfig,
) -> Result<TuneResult> {
    let (mut dice, mut total, mut n) = (0.0, 0.0, 0usize);
    for s in samples {
        let (x, y) = assemble_batch(&[s])?;
        let scores = model.forward(&x, Mode::Eval)?;
        // Diverged weights surface here as a NaN loss rather than an error.
        total += if scores.iter().all(|v| v.is_finite()) {
            combined_loss_f32(&scores, &y, loss)?.total
        } else {
            f64::NAN
        };
        let pred = argmax_labels(&scores).mapv(|c| u8::from(c != 0));
        dice += volumetric_dice(pred.index_axis(ndarray::Axis(0), 0), s.mask.view())?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    Ok(TuneResult {
        dice: dice / n as f64,
        loss: total / n as f64,
    })
}

impl TuneEvaluator for DiceEvaluator {
    fn evaluate(&mut self, model: &mut UNet3d, _session: usize, _epoch: usize) -> Result<TuneResult> {
        evaluate_samples(model, self.source.samples(), &self.loss)
    }
}

/// Replays a fixed sequence of tuning scores, one per epoch.
#[derive(Debug, Clone)]
pub struct ScriptedEvaluator {
    pub dice: Vec<f64>,
}

impl ScriptedEvaluator {
    pub fn new(dice: Vec<f64>) -> Self {
        ScriptedEvaluator { dice }
    }
}

impl TuneEvaluator for ScriptedEvaluator {
    fn evaluate(&mut self, _model: &mut UNet3d, _session: usize, epoch: usize) -> Result<TuneResult> {
        let d = *self
            .dice
            .get(epoch - 1)
            .ok_or_else(|| Error::InvalidArgument(format!("no scripted score for epoch {epoch}")))?;
        Ok(TuneResult { dice: d, loss: 1.0 - d })
    }
}

/// Everything a session needs besides the model.
pub struct SessionData {
    pub train: StudySource,
    pub tune: Box<dyn TuneEvaluator>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub schedule: OneCycleConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    /// Write model and optimizer state after every epoch so an interrupted
    /// run can resume.
    pub save_resume_state: bool,
    /// Stop with [`Error::Interrupted`] after this many epochs in this call.
    pub stop_after_epochs: Option<usize>,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        TrainOptions {
            out_dir: out_dir.into(),
            seed,
            optimizer: AdamWConfig::default(),
            schedule: OneCycleConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
            save_resume_state: true,
            stop_after_epochs: None,
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.ndjson")
    }

    pub fn best_path(&self, session: usize) -> PathBuf {
        self.out_dir.join(format!("session{session}_best.safetensors"))
    }

    fn last_path(&self, session: usize) -> PathBuf {
        self.out_dir.join(format!("session{session}_last.safetensors"))
    }

    fn optim_path(&self, session: usize) -> PathBuf {
        self.out_dir.join(format!("session{session}_last_optim.safetensors"))
    }

    pub fn progress_path(&self) -> PathBuf {
        self.out_dir.join("progress.json")
    }

    pub fn diagnostic_path(&self) -> PathBuf {
        self.out_dir.join("diagnostic.json")
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        session: usize,
        epoch: usize,
        batch: usize,
        /// Step index within the current phase and the phase length.
        phase_step: usize,
        phase_steps: usize,
        frozen: bool,
        lr: f64,
        loss: f64,
    },
    Epoch {
        session: usize,
        epoch: usize,
        frozen: bool,
        train_loss: f64,
        tune_loss: f64,
        tune_dice: f64,
        lr: f64,
    },
    Checkpoint {
        session: usize,
        epoch: usize,
        tune_dice: f64,
        path: PathBuf,
    },
}

/// Reads a training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Resume point persisted after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub session: usize,
    /// Epochs of `session` already completed.
    pub epochs_done: usize,
    pub best: Option<CheckpointRecord>,
    /// Best records of earlier, finished sessions.
    pub finished: Vec<CheckpointRecord>,
}

fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(&tmp, s)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn append_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    /// `train` or `tune`.
    phase: &'static str,
    session: usize,
    epoch: usize,
    batch: usize,
    lr: f64,
    studies: Vec<&'a str>,
    dice_component: f64,
    ce_component: f64,
    reason: String,
}

fn parameters_finite(model: &mut UNet3d) -> bool {
    let mut ok = true;
    model.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            ok = ok && p.value.iter().all(|v| v.is_finite());
        }
    });
    ok
}

/// Steps per epoch for `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Learning rate at `batch` of `epoch` (both from 0) and whether the
/// encoder is frozen then.
pub fn scheduled_lr(
    spec: &SessionSpec,
    schedule: &OneCycleConfig,
    n_train: usize,
    epoch: usize,
    batch: usize,
) -> Result<(f64, usize, usize, bool)> {
    let spe = steps_per_epoch(n_train, spec.stage.batch_size);
    let frozen = epoch < spec.frozen_epochs;
    let (phase_start, phase_epochs, base) = if frozen {
        (0, spec.frozen_epochs, spec.frozen_lr)
    } else {
        (spec.frozen_epochs, spec.main_epochs, spec.base_lr)
    };
    let step = (epoch - phase_start) * spe + batch;
    let total = phase_epochs * spe;
    Ok((schedule.lr(step, total, base)?, step, total, frozen))
}

fn check_finite(
    loss: &crate::losses::LossBreakdown,
    scores_finite: bool,
) -> Option<String> {
    if !scores_finite {
        Some("model produced non-finite scores".into())
    } else if !loss.total.is_finite() {
        Some(format!("loss evaluated to {}", loss.total))
    } else {
        None
    }
}

/// Runs one session. Starts from the model's current weights, or from the
/// saved state when `resume` holds a matching progress record; reloads
/// the best checkpoint before returning it.
pub fn run_session(
    model: &mut UNet3d,
    data: &mut SessionData,
    spec: &SessionSpec,
    session: usize,
    opts: &TrainOptions,
    resume: Option<&Progress>,
) -> Result<CheckpointRecord> {
    spec.validate()?;
    opts.loss.validate()?;
    opts.schedule.validate()?;
    opts.augmentation.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if data.train.spec.shape() != spec.stage.shape() {
        return Err(Error::Shape(format!(
            "training samples are {:?}, session stage is {:?}",
            data.train.spec.shape(),
            spec.stage.shape()
        )));
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    let mut opt = AdamW::new(opts.optimizer);
    let mut best: Option<CheckpointRecord> = None;
    let mut start_epoch = 0;
    let finished = resume.map(|p| p.finished.clone()).unwrap_or_default();
    if let Some(p) = resume.filter(|p| p.session == session && p.epochs_done > 0) {
        load_checkpoint(model, &opts.last_path(session))?;
        load_optimizer(&mut opt, &opts.optim_path(session))?;
        best = p.best.clone();
        start_epoch = p.epochs_done;
        log::info!("session {session}: resuming after epoch {start_epoch}");
    }
    let n = data.train.len();
    let bs = spec.stage.batch_size;
    let mut ran = 0;
    for epoch in start_epoch..spec.total_epochs() {
        let mut records = Vec::new();
        let frozen = epoch < spec.frozen_epochs;
        model.set_encoder_frozen(frozen);
        let mut rng = stream_rng(opts.seed, &[session as u64, epoch as u64]);
        let batches = epoch_batches(n, bs, &mut rng);
        let (mut loss_sum, mut last_lr) = (0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let (lr, phase_step, phase_steps, _) = scheduled_lr(spec, &opts.schedule, n, epoch, bi)?;
            let mut augmented = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut srng = stream_rng(opts.seed, &[session as u64, epoch as u64, i as u64, 0xA0]);
                augmented.push(augment(data.train.sample(i), &opts.augmentation, &mut srng)?);
            }
            let refs: Vec<&ModelSample> = augmented.iter().collect();
            let (x, y) = assemble_batch(&refs)?;
            zero_grad(model);
            let scores = model.forward(&x, Mode::Train)?;
            let finite = scores.iter().all(|v| v.is_finite());
            let (breakdown, grad) = if finite {
                combined_loss_grad_f32(&scores, &y, &opts.loss)?
            } else {
                (
                    crate::losses::LossBreakdown {
                        dice_component: f64::NAN,
                        ce_component: f64::NAN,
                        total: f64::NAN,
                    },
                    scores.clone(),
                )
            };
            let mut failure = check_finite(&breakdown, finite);
            if failure.is_none() {
                model.backward(&grad)?;
                opt.step(model, lr, spec.weight_decay);
                if !parameters_finite(model) {
                    failure = Some("parameters became non-finite after the update".into());
                }
            }
            if let Some(reason) = failure {
                model.clear_cache();
                let diag = Diagnostic {
                    phase: "train",
                    session,
                    epoch: epoch + 1,
                    batch: bi,
                    lr,
                    studies: refs.iter().map(|s| s.study_id.as_str()).collect(),
                    dice_component: breakdown.dice_component,
                    ce_component: breakdown.ce_component,
                    reason,
                };
                write_json_atomic(&diag, &opts.diagnostic_path())?;
                append_log(&opts.log_path(), &records)?;
                return Err(Error::NonFiniteLoss {
                    session,
                    epoch: epoch + 1,
                    batch: bi,
                    lr,
                });
            }
            loss_sum += breakdown.total;
            last_lr = lr;
            records.push(LogRecord::Step {
                session,
                epoch: epoch + 1,
                batch: bi,
                phase_step,
                phase_steps,
                frozen,
                lr,
                loss: breakdown.total,
            });
        }
        model.clear_cache();
        let tune = data.tune.evaluate(model, session, epoch + 1)?;
        let train_loss = loss_sum / batches.len() as f64;
        if !tune.loss.is_finite() {
            let diag = Diagnostic {
                phase: "tune",
                session,
                epoch: epoch + 1,
                batch: batches.len(),
                lr: last_lr,
                studies: Vec::new(),
                dice_component: f64::NAN,
                ce_component: f64::NAN,
                reason: format!("tuning loss evaluated to {}", tune.loss),
            };
            write_json_atomic(&diag, &opts.diagnostic_path())?;
            append_log(&opts.log_path(), &records)?;
            return Err(Error::NonFiniteLoss {
                session,
                epoch: epoch + 1,
                batch: batches.len(),
                lr: last_lr,
            });
        }
        log::info!(
            "session {session} epoch {}/{}: train loss {train_loss:.4}, tune loss {:.4}, tune dice {:.4}, lr {last_lr:.3e}{}",
            epoch + 1,
            spec.total_epochs(),
            tune.loss,
            tune.dice,
            if frozen { " (encoder frozen)" } else { "" }
        );
        records.push(LogRecord::Epoch {
            session,
            epoch: epoch + 1,
            frozen,
            train_loss,
            tune_loss: tune.loss,
            tune_dice: tune.dice,
            lr: last_lr,
        });
        if best.as_ref().is_none_or(|b| tune.dice > b.tuning_dice) {
            let path = opts.best_path(session);
            let meta = CheckpointMeta {
                config: model.config.clone(),
                session_index: session,
                epoch: epoch + 1,
                tuning_dice: tune.dice,
            };
            save_checkpoint(model, &meta, &path)?;
            records.push(LogRecord::Checkpoint {
                session,
                epoch: epoch + 1,
                tune_dice: tune.dice,
                path: path.clone(),
            });
            best = Some(CheckpointRecord {
                session_index: session,
                epoch: epoch + 1,
                tuning_dice: tune.dice,
                path,
            });
        }
        append_log(&opts.log_path(), &records)?;
        if opts.save_resume_state {
            let meta = CheckpointMeta {
                config: model.config.clone(),
                session_index: session,
                epoch: epoch + 1,
                tuning_dice: tune.dice,
            };
            save_checkpoint(model, &meta, &opts.last_path(session))?;
            save_optimizer(&opt, &opts.optim_path(session))?;
            write_json_atomic(
                &Progress {
                    session,
                    epochs_done: epoch + 1,
                    best: best.clone(),
                    finished: finished.clone(),
                },
                &opts.progress_path(),
            )?;
        }
        ran += 1;
        if opts.stop_after_epochs.is_some_and(|k| ran >= k) && epoch + 1 < spec.total_epochs() {
            return Err(Error::Interrupted {
                session,
                epoch: epoch + 1,
            });
        }
    }
    model.set_encoder_frozen(false);
    let best = best.ok_or_else(|| Error::InvalidArgument("session ran no epochs".into()))?;
    load_checkpoint(model, &best.path)?;
    log::info!(
        "session {session}: best tuning dice {:.4} at epoch {}, reloaded {}",
        best.tuning_dice,
        best.epoch,
        best.path.display()
    );
    Ok(best)
}

/// Reads saved progress from `opts.out_dir`, if any.
pub fn read_progress(opts: &TrainOptions) -> Result<Option<Progress>> {
    let p = opts.progress_path();
    if !p.is_file() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
}

/// Runs the sessions in order; each starts from the previous session's
/// best checkpoint. `data` supplies samples for a session index and stage.
/// With `resume`, finished sessions are skipped and an interrupted one
/// continues from its last saved epoch.
pub fn run_plan(
    model: &mut UNet3d,
    data: &mut dyn FnMut(usize, &SessionSpec) -> Result<SessionData>,
    plan: &TrainingPlan,
    opts: &TrainOptions,
    resume: bool,
) -> Result<Vec<CheckpointRecord>> {
    plan.validate()?;
    let progress = if resume { read_progress(opts)? } else { None };
    if progress.is_none() {
        for stale in [opts.log_path(), opts.progress_path()] {
            if stale.is_file() {
                std::fs::remove_file(stale)?;
            }
        }
    }
    let mut finished: Vec<CheckpointRecord> = progress.as_ref().map(|p| p.finished.clone()).unwrap_or_default();
    if let Some(last) = finished.last() {
        load_checkpoint(model, &last.path)?;
    }
    for (i, spec) in plan.sessions.iter().enumerate().skip(finished.len()) {
        let mut sd = data(i, spec)?;
        let session_progress = match &progress {
            Some(p) if p.session == i => Some(Progress {
                finished: finished.clone(),
                ..p.clone()
            }),
            _ => Some(Progress {
                session: i,
                epochs_done: 0,
                best: None,
                finished: finished.clone(),
            }),
        };
        let rec = run_session(model, &mut sd, spec, i, opts, session_progress.as_ref())?;
        finished.push(rec);
        if opts.save_resume_state {
            write_json_atomic(
                &Progress {
                    session: i + 1,
                    epochs_done: 0,
                    best: None,
                    finished: finished.clone(),
                },
                &opts.progress_path(),
            )?;
        }
    }
    Ok(finished)
}

//! Progressive-resizing training: sessions, one-cycle schedule, encoder
//! freezing and best-checkpoint selection.

pub mod engine;
pub mod plan;
pub mod schedule;

pub use engine::{
    evaluate_samples, read_log, read_progress, run_plan, run_session, scheduled_lr, steps_per_epoch,
    DiceEvaluator, LogRecord, Progress, ScriptedEvaluator, SessionData, TrainOptions, TuneEvaluator,
    TuneResult,
};
pub use plan::{CheckpointRecord, SessionSpec, TrainingPlan};
pub use schedule::{one_cycle_lr, warmup_steps, OneCycleConfig};

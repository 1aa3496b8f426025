//! `ctseg`: convert, split, train, evaluate, predict and report.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctseg_core::ingest::DatasetKind;
use ctseg_core::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "ctseg", version, about = "COVID-19 CT infiltrate segmentation pipeline")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Resolve and print what would happen, then exit without side effects.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Overrides one configuration key, e.g. `--set sessions.0.main_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw data into NIfTI pairs and write the manifest.
    Convert(ConvertArgs),
    /// Split the manifest into training and tuning studies.
    Split,
    /// Run the configured training plan.
    Train(TrainArgs),
    /// Score a model (or a reference predictor) on a converted dataset.
    Evaluate(EvaluateArgs),
    /// Segment one NIfTI volume.
    Predict(PredictArgs),
    /// Print the results tables of saved evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Overrides `dataset.kind`.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    RicordDicom,
    NiftiPassthrough,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::RicordDicom => DatasetKind::RicordDicom,
            KindArg::NiftiPassthrough => DatasetKind::NiftiPassthrough,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue an interrupted run from its saved progress.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorArg {
    /// The trained network.
    Model,
    /// The ground truth itself.
    Perfect,
    /// An all-background mask.
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SubsetArg {
    Tune,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model checkpoint; defaults to the best checkpoint of the last session.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Manifest to score; defaults to `paths.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Studies to score. Defaults to `tune` for the configured manifest and
    /// `all` for one given with `--manifest`.
    #[arg(long, value_enum)]
    pub subset: Option<SubsetArg>,
    /// Dataset label in the report; defaults to the manifest's dataset name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_enum, default_value = "model")]
    pub predictor: PredictorArg,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model checkpoint; defaults to the best checkpoint of the last session.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input CT volume (NIfTI).
    #[arg(long)]
    pub input: PathBuf,
    /// Output mask (NIfTI).
    #[arg(long)]
    pub output: PathBuf,
    /// Write this many evenly spaced overlay PNGs next to the output.
    #[arg(long, default_value_t = 0)]
    pub overlay: usize,
    /// Ground-truth mask drawn on the overlays.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files in table order; defaults to every
    /// `*_report.json` under `paths.reports`, sorted by name.
    pub reports: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Data => 2,
                ErrorClass::Runtime => 3,
            })
        }
    }
}

use std::path::{Path, PathBuf};

use ctseg_core::config::RunConfig;
use ctseg_core::datapipe::{load_study, split_dataset, DatasetSplit, StageSpec, StudySource};
use ctseg_core::ingest::{
    convert_dicom_dataset, index_nifti_dataset, read_mask, read_volume, write_mask, ConversionOutcome,
    DatasetKind, DicomConversion, Manifest,
};
use ctseg_core::metrics::{
    evenly_spaced_slices, format_table, macro_average, render_overlay, score_patient, MetricsReport,
    TableMetric,
};
use ctseg_core::trainengine::{run_plan, DiceEvaluator, SessionData, SessionSpec, TrainOptions};
use ctseg_core::unet3d::weights::{load_checkpoint, read_checkpoint_meta};
use ctseg_core::unet3d::{predict_mask, UNet3d};
use ctseg_core::volume::LabelMask;
use ctseg_core::{Error, Result};

use crate::{Cli, Command, ConvertArgs, EvaluateArgs, PredictArgs, PredictorArg, ReportArgs, SubsetArg, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    log::info!("resolved configuration:\n{}", cfg.to_toml()?);
    match &cli.command {
        Command::Convert(a) => convert(&cfg, a, cli.dry_run),
        Command::Split => split(&cfg, cli.dry_run),
        Command::Train(a) => train(&cfg, a, cli.dry_run),
        Command::Evaluate(a) => evaluate(&cfg, a, cli.dry_run),
        Command::Predict(a) => predict(&cfg, a, cli.dry_run),
        Command::Report(a) => report(&cfg, a),
    }
}

fn convert(cfg: &RunConfig, args: &ConvertArgs, dry_run: bool) -> Result<()> {
    let kind = args.kind.map(DatasetKind::from).unwrap_or(cfg.dataset.kind);
    let p = &cfg.paths;
    if dry_run {
        match kind {
            DatasetKind::RicordDicom => println!(
                "would convert DICOM under {} with annotations {} into {}",
                p.raw_dicom.display(),
                p.annotations.display(),
                p.nifti_store.display()
            ),
            DatasetKind::NiftiPassthrough => println!(
                "would index volumes in {} with masks in {}",
                p.nifti_images.display(),
                p.nifti_masks.display()
            ),
        }
        println!("manifest: {}", p.manifest.display());
        return Ok(());
    }
    let outcome: ConversionOutcome = match kind {
        DatasetKind::RicordDicom => convert_dicom_dataset(&DicomConversion {
            dicom_root: &p.raw_dicom,
            annotations: &p.annotations,
            schema: &cfg.annotation_schema,
            merge: cfg.dataset.merge,
            out_dir: &p.nifti_store,
            dataset_name: &cfg.dataset.name,
        })?,
        DatasetKind::NiftiPassthrough => {
            index_nifti_dataset(&p.nifti_images, &p.nifti_masks, &cfg.dataset.mask_suffix, &cfg.dataset.name)?
        }
    };
    println!("{:<40} {:>16} {:>22} {:>10}", "study", "shape (D,H,W)", "spacing mm (D,H,W)", "positive");
    for s in &outcome.summaries {
        println!(
            "{:<40} {:>16} {:>22} {:>10}",
            s.study_id,
            format!("{}x{}x{}", s.shape[0], s.shape[1], s.shape[2]),
            format!("{:.3},{:.3},{:.3}", s.spacing[0], s.spacing[1], s.spacing[2]),
            s.positive_voxels
        );
    }
    if !outcome.manifest.entries.is_empty() {
        outcome.manifest.write(&p.manifest)?;
        println!("manifest: {} ({} entries)", p.manifest.display(), outcome.manifest.entries.len());
    }
    if let Some((_, first)) = outcome.failures.first() {
        eprintln!("{} studies failed:", outcome.failures.len());
        eprintln!("{:<40} error", "study");
        for (id, e) in &outcome.failures {
            eprintln!("{id:<40} {e}");
        }
        return Err(reclass(first, outcome.failures.len()));
    }
    if outcome.manifest.entries.is_empty() {
        return Err(Error::MissingInput(match kind {
            DatasetKind::RicordDicom => p.raw_dicom.clone(),
            DatasetKind::NiftiPassthrough => p.nifti_images.clone(),
        }));
    }
    Ok(())
}

/// Summary error for a batch of failures, keeping the first failure's class.
fn reclass(first: &Error, n: usize) -> Error {
    let msg = format!("{n} studies failed to convert; first: {first}");
    match first.class() {
        ctseg_core::ErrorClass::Data => Error::InvalidArgument(msg),
        ctseg_core::ErrorClass::Runtime => Error::Io(std::io::Error::other(msg)),
    }
}

fn split(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let manifest = Manifest::read(&cfg.paths.manifest)?;
    let s = split_dataset(&manifest.study_ids(), cfg.seed)?;
    println!(
        "{} studies: {} training, {} tuning (seed {})",
        manifest.entries.len(),
        s.train_ids.len(),
        s.tune_ids.len(),
        s.seed
    );
    if dry_run {
        return Ok(());
    }
    s.write(&cfg.paths.split)?;
    println!("split: {}", cfg.paths.split.display());
    Ok(())
}

fn describe_session(i: usize, s: &SessionSpec) -> String {
    let st = s.stage;
    let mut out = format!(
        "session {i}: stage {}x{}x{}, batch {}",
        st.depth, st.height, st.width, st.batch_size
    );
    if s.frozen_epochs > 0 {
        out += &format!(", {} frozen epochs at lr {:e}", s.frozen_epochs, s.frozen_lr);
    }
    out += &format!(
        ", {} epochs at lr {:e}, weight decay {:e}",
        s.main_epochs, s.base_lr, s.weight_decay
    );
    out
}

fn train_options(cfg: &RunConfig) -> TrainOptions {
    let mut o = TrainOptions::new(&cfg.paths.checkpoints, cfg.seed);
    o.optimizer = cfg.optimizer;
    o.schedule = cfg.schedule;
    o.loss = cfg.loss;
    o.augmentation = cfg.augmentation;
    o
}

fn train(cfg: &RunConfig, args: &TrainArgs, dry_run: bool) -> Result<()> {
    let plan = cfg.plan();
    if dry_run {
        println!("training plan ({} sessions, seed {}):", plan.sessions.len(), cfg.seed);
        for (i, s) in plan.sessions.iter().enumerate() {
            println!("  {}", describe_session(i, s));
        }
        println!(
            "  one-cycle: warm-up fraction {}, start lr / {}, final lr / {}",
            cfg.schedule.warmup_fraction, cfg.schedule.start_div, cfg.schedule.final_div
        );
        println!("  checkpoints: {}", cfg.paths.checkpoints.display());
        return Ok(());
    }
    let manifest = Manifest::read(&cfg.paths.manifest)?;
    let split = DatasetSplit::read(&cfg.paths.split)?;
    for id in split.train_ids.iter().chain(&split.tune_ids) {
        if manifest.get(id).is_none() {
            return Err(Error::InvalidArgument(format!(
                "split study {id} is not in {}",
                cfg.paths.manifest.display()
            )));
        }
    }
    if split.tune_ids.is_empty() {
        return Err(Error::InvalidArgument("the split has no tuning studies".into()));
    }
    let opts = train_options(cfg);
    std::fs::create_dir_all(&opts.out_dir)?;
    std::fs::write(opts.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut model = UNet3d::new(cfg.model.clone())?;
    log::info!("model has {} parameters", model.num_parameters());
    let loss = cfg.loss;
    let mut data = |i: usize, s: &SessionSpec| -> Result<SessionData> {
        log::info!("{}", describe_session(i, s));
        let train = StudySource::from_manifest(&manifest, &split.train_ids, s.stage)?;
        let tune = StudySource::from_manifest(&manifest, &split.tune_ids, s.stage)?;
        Ok(SessionData {
            train,
            tune: Box::new(DiceEvaluator::new(tune, loss)),
        })
    };
    let records = run_plan(&mut model, &mut data, &plan, &opts, args.resume)?;
    for r in &records {
        println!(
            "session {}: best tuning dice {:.4} at epoch {} -> {}",
            r.session_index,
            r.tuning_dice,
            r.epoch,
            r.path.display()
        );
    }
    if let Some(last) = records.last() {
        println!("final checkpoint: {}", last.path.display());
    }
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    train_options(cfg).best_path(cfg.sessions.len().saturating_sub(1))
}

/// The model stored in a checkpoint and the stage it runs at.
fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(UNet3d, StageSpec)> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg));
    let meta = read_checkpoint_meta(&path)?;
    let mut mcfg = meta.config.clone();
    mcfg.pretrained_weights_path = None;
    let mut model = UNet3d::new(mcfg)?;
    load_checkpoint(&mut model, &path)?;
    let stage = cfg
        .sessions
        .get(meta.session_index)
        .or(cfg.sessions.last())
        .map(|s| s.stage)
        .ok_or_else(|| Error::Config("no sessions configured".into()))?;
    log::info!(
        "loaded {} (session {}, epoch {}, tuning dice {:.4}); inference at {:?}",
        path.display(),
        meta.session_index,
        meta.epoch,
        meta.tuning_dice,
        stage.shape()
    );
    Ok((model, stage))
}

fn evaluate(cfg: &RunConfig, args: &EvaluateArgs, dry_run: bool) -> Result<()> {
    let manifest_path = args.manifest.clone().unwrap_or_else(|| cfg.paths.manifest.clone());
    let manifest = Manifest::read(&manifest_path)?;
    let subset = args.subset.unwrap_or(if args.manifest.is_some() { SubsetArg::All } else { SubsetArg::Tune });
    let ids = match subset {
        SubsetArg::All => manifest.study_ids(),
        SubsetArg::Tune => DatasetSplit::read(&cfg.paths.split)?.tune_ids,
        SubsetArg::Train => DatasetSplit::read(&cfg.paths.split)?.train_ids,
    };
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no studies to evaluate".into()));
    }
    let name = args.name.clone().unwrap_or_else(|| {
        if manifest.dataset.is_empty() {
            cfg.dataset.name.clone()
        } else {
            manifest.dataset.clone()
        }
    });
    let tol = cfg.evaluation.nsd_tolerance_mm;
    if dry_run {
        println!(
            "would score {} studies of {} with the {:?} predictor at NSD tolerance {tol} mm",
            ids.len(),
            manifest_path.display(),
            args.predictor
        );
        return Ok(());
    }
    let mut model = match args.predictor {
        PredictorArg::Model => Some(load_model(cfg, args.checkpoint.as_deref())?),
        _ => None,
    };
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let (vol, gt) = load_study(&manifest, id)?;
        let pred = match (&mut model, args.predictor) {
            (Some((m, stage)), _) => predict_mask(m, &vol, stage)?,
            (None, PredictorArg::Perfect) => gt.clone(),
            (None, _) => LabelMask::zeros(gt.shape(), gt.spacing),
        };
        let row = score_patient(id, &pred, &gt, tol)?;
        log::info!("{id}: dice {:.4}, nsd {:.4}", row.dice, row.nsd);
        rows.push(row);
    }
    let report = macro_average(&name, rows, tol)?;
    std::fs::create_dir_all(&cfg.paths.reports)?;
    let csv = cfg.paths.reports.join(format!("{name}_scores.csv"));
    let json = cfg.paths.reports.join(format!("{name}_report.json"));
    report.write_csv(&csv)?;
    report.write_json(&json)?;
    print!("{}", format_table(std::slice::from_ref(&report), TableMetric::Dice));
    println!();
    print!("{}", format_table(std::slice::from_ref(&report), TableMetric::Nsd));
    println!("scores: {}\nsummary: {}", csv.display(), json.display());
    Ok(())
}

fn predict(cfg: &RunConfig, args: &PredictArgs, dry_run: bool) -> Result<()> {
    let vol = read_volume(&args.input)?;
    if dry_run {
        println!(
            "would segment {} ({:?}) into {}",
            args.input.display(),
            vol.shape(),
            args.output.display()
        );
        return Ok(());
    }
    let (mut model, stage) = load_model(cfg, args.checkpoint.as_deref())?;
    let mask = predict_mask(&mut model, &vol, &stage)?;
    write_mask(&mask, &vol.affine, &args.output)?;
    println!("{}: {} positive voxels", args.output.display(), mask.positive_count());
    if args.overlay > 0 {
        let gt = match &args.ground_truth {
            Some(p) => {
                let (m, _) = read_mask(p)?;
                if m.shape() != vol.shape() {
                    return Err(Error::Shape(format!(
                        "ground truth {:?} does not match volume {:?}",
                        m.shape(),
                        vol.shape()
                    )));
                }
                m
            }
            None => LabelMask::zeros(vol.shape(), vol.spacing),
        };
        let dir = args.output.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let stem = ctseg_core::ingest::nifti_io::nifti_stem(&args.output);
        for z in evenly_spaced_slices(vol.shape()[0], args.overlay) {
            let png = dir.join(format!("{stem}_overlay_{z:04}.png"));
            render_overlay(&vol, &gt, &mask, z, &png)?;
            println!("overlay: {}", png.display());
        }
    }
    Ok(())
}

fn report(cfg: &RunConfig, args: &ReportArgs) -> Result<()> {
    let paths = if args.reports.is_empty() {
        let dir = &cfg.paths.reports;
        if !dir.is_dir() {
            return Err(Error::MissingInput(dir.clone()));
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with("_report.json"))
            .collect();
        found.sort();
        found
    } else {
        args.reports.clone()
    };
    if paths.is_empty() {
        return Err(Error::MissingInput(cfg.paths.reports.join("*_report.json")));
    }
    let reports = paths.iter().map(|p| MetricsReport::read_json(p)).collect::<Result<Vec<_>>>()?;
    let text = format!(
        "{}\n{}",
        format_table(&reports, TableMetric::Dice),
        format_table(&reports, TableMetric::Nsd)
    );
    print!("{text}");
    Ok(())
}

//! Command-line front end.
//!
//! Every subcommand validates its config and inputs before creating any
//! output, writes `config.resolved.json` into its output directory, and
//! reports failures as a single JSON line on stderr:
//! `{"error":"usage|validation|runtime","message":"..."}`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use scribblevc_core::metrics::{evaluate, PredictionPolicy};
use scribblevc_core::model::ModelConfig;
use scribblevc_core::train::{TrainSample, TrainState};

use crate::checkpoint::{load_checkpoint, load_checkpoint_for, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{run_ablation, run_sensitivity};
use crate::fit::{fit, read_history, validate_run, FitOptions, ValSet, METRICS_FILE};
use crate::manifest::{load_manifest, LoadedSample};
use crate::report::{export_report, write_ablation, write_sensitivity, EvalReport};
use crate::synth::synthesize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Parser, Debug)]
#[command(name = "scribblevc", version, about = "Scribble-supervised dual-branch segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train and val manifests.
    Synth(RunArgs),
    /// Train a model; resumes when --checkpoint is given.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and export a report.
    Eval(EvalArgs),
    /// Run the four-variant ablation grid.
    Ablate(GridArgs),
    /// Run the training-set-size sweep.
    Sweep(GridArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the training and data-generation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress and summary output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Training manifest; overrides data.train_manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run configuration; the checkpoint must match its model section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to score; overrides data.val_manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Final prediction: mean, cnn or trans.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PredictionPolicy>,
    /// Report directory.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Suppress the summary line.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Training manifest; without one, data is synthesized into OUT/data.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn parse_policy(s: &str) -> std::result::Result<PredictionPolicy, String> {
    PredictionPolicy::parse(s).map_err(|e| e.to_string())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            report_error("usage", first);
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_grid(a, false),
        Command::Sweep(a) => cmd_grid(a, true),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) if e.is_validation() => {
            report_error("validation", &e.to_string());
            EXIT_VALIDATION
        }
        Err(e) => {
            report_error("runtime", &e.to_string());
            EXIT_RUNTIME
        }
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.set_seed(s);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

/// Samples of a manifest, checked against the model's class count and size.
fn load_split(path: &Path, model: &ModelConfig) -> Result<Vec<LoadedSample>> {
    let m = load_manifest(path)?;
    if m.manifest.num_classes != model.num_classes {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            record: None,
            message: format!(
                "manifest has K={} but the model has K={}",
                m.manifest.num_classes, model.num_classes
            ),
        });
    }
    let samples = m.load_samples()?;
    for s in &samples {
        if (s.image.height, s.image.width) != (model.height, model.width) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                record: Some(s.id.clone()),
                message: format!(
                    "image is {}x{} but the model expects {}x{}",
                    s.image.height, s.image.width, model.height, model.width
                ),
            });
        }
    }
    Ok(samples)
}

fn val_set(samples: &[LoadedSample]) -> ValSet {
    ValSet {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: samples.iter().map(|s| s.image.clone()).collect(),
        masks: samples.iter().map(|s| s.mask.clone()).collect(),
    }
}

fn train_samples(samples: &[LoadedSample]) -> Vec<TrainSample> {
    samples.iter().map(LoadedSample::to_train_sample).collect()
}

fn cmd_synth(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    create_out(&args.out)?;
    let out = synthesize(&cfg.synth, &args.out)?;
    cfg.save(&args.out.join(RESOLVED_CONFIG))?;
    if !args.quiet {
        print_json(serde_json::json!({
            "train_manifest": out.train,
            "val_manifest": out.val,
        }));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.run)?;
    if let Some(m) = &args.manifest {
        cfg.data.train_manifest = Some(m.clone());
    }
    let train_path = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config("no training manifest: pass --manifest or set data.train_manifest".into()))?;
    cfg.data.train_manifest = Some(absolute(&train_path)?);
    if let Some(v) = &cfg.data.val_manifest {
        cfg.data.val_manifest = Some(absolute(v)?);
    }
    let train = train_samples(&load_split(&train_path, &cfg.model)?);
    let val = match &cfg.data.val_manifest {
        Some(p) => val_set(&load_split(p, &cfg.model)?),
        None => ValSet::default(),
    };
    let mut run = match &args.checkpoint {
        Some(p) => {
            let mut c = load_checkpoint_for(p, &cfg.model)?;
            c.train = cfg.train.clone();
            c
        }
        None => Checkpoint {
            state: TrainState::new(cfg.model.clone(), &cfg.train)?,
            train: cfg.train.clone(),
            best_val: None,
        },
    };

    let out = &args.run.out;
    create_out(out)?;
    cfg.save(&out.join(RESOLVED_CONFIG))?;
    let opts = FitOptions {
        out_dir: Some(out.clone()),
        quiet: args.run.quiet,
        eval: cfg.eval.clone(),
    };
    let history = fit(&mut run, &train, &val, &opts)?;
    let summary = validate_run(&run, &val, &cfg.eval)?;
    if let Some(s) = &summary {
        let (_, preds) = evaluate(
            &run.state.model,
            &run.state.bank,
            &val.images,
            &val.masks,
            cfg.eval.policy,
            cfg.eval.batch_size,
        )?;
        let echo = serde_json::to_value(&cfg).expect("config serializes");
        let report = EvalReport::new(s, &val.ids, cfg.eval.policy, vec![cfg.train.seed], echo);
        // No epoch ran when resuming at or past the target, so there may be no history.
        let metrics = out.join(METRICS_FILE);
        let full_history = if metrics.is_file() { Some(read_history(&metrics)?) } else { None };
        export_report(&report, &val.images, &preds, full_history.as_deref(), &out.join("report"))?;
    }
    if !args.run.quiet {
        print_json(serde_json::json!({
            "epoch": run.state.epoch,
            "epochs_run": history.len(),
            "val_dice_mean": summary.as_ref().map(|s| s.mean),
        }));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ckpt = match &args.config {
        Some(_) => load_checkpoint_for(&args.checkpoint, &cfg.model)?,
        None => load_checkpoint(&args.checkpoint)?,
    };
    cfg.model = ckpt.state.model.config.clone();
    cfg.train = ckpt.train.clone();
    if let Some(p) = args.policy {
        cfg.eval.policy = p;
    }
    if let Some(m) = &args.manifest {
        cfg.data.val_manifest = Some(m.clone());
    }
    let manifest = cfg
        .data
        .val_manifest
        .clone()
        .ok_or_else(|| Error::Config("no manifest to evaluate: pass --manifest or set data.val_manifest".into()))?;
    cfg.data.val_manifest = Some(absolute(&manifest)?);
    let samples = load_split(&manifest, &cfg.model)?;
    if samples.is_empty() {
        return Err(Error::Config("evaluation manifest has no records".into()));
    }
    let val = val_set(&samples);
    let st = &ckpt.state;
    let (summary, preds) = evaluate(&st.model, &st.bank, &val.images, &val.masks, cfg.eval.policy, cfg.eval.batch_size)?;

    create_out(&args.out)?;
    cfg.save(&args.out.join(RESOLVED_CONFIG))?;
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    let report = EvalReport::new(&summary, &val.ids, cfg.eval.policy, vec![ckpt.train.seed], echo);
    let history_path = args.checkpoint.parent().unwrap_or(Path::new(".")).join(METRICS_FILE);
    let history = if history_path.is_file() { Some(read_history(&history_path)?) } else { None };
    export_report(&report, &val.images, &preds, history.as_deref(), &args.out)?;
    if !args.quiet {
        print_json(serde_json::json!({
            "policy": cfg.eval.policy.name(),
            "mean_dice": summary.mean,
            "per_class_dice": summary.per_class,
            "samples": summary.per_sample.len(),
        }));
    }
    Ok(())
}

fn cmd_grid(args: GridArgs, sweep: bool) -> Result<()> {
    let mut cfg = load_config(&args.run)?;
    if let Some(m) = &args.manifest {
        cfg.data.train_manifest = Some(m.clone());
    }
    let sizes = cfg.experiment.sizes.clone();
    if sweep {
        let mut seen = std::collections::BTreeSet::new();
        if sizes.is_empty() || !sizes.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config("experiment.sizes must be non-empty and free of duplicates".into()));
        }
    }
    let out = &args.run.out;
    // Validate given manifests before creating any output.
    let given = match (&cfg.data.train_manifest, &cfg.data.val_manifest) {
        (Some(t), Some(v)) => Some((load_split(t, &cfg.model)?, load_split(v, &cfg.model)?)),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "grids need both data.train_manifest and data.val_manifest, or neither".into(),
            ))
        }
    };
    if sweep {
        let available = given.as_ref().map_or(cfg.synth.train_samples, |(t, _)| t.len());
        let largest = sizes.iter().copied().max().unwrap_or(0);
        if largest > available {
            return Err(Error::Config(format!(
                "sweep size {largest} exceeds the {available} available training samples"
            )));
        }
    }
    create_out(out)?;
    let (train, val) = match given {
        Some(pair) => pair,
        None => {
            let data = synthesize(&cfg.synth, &out.join("data"))?;
            cfg.data.train_manifest = Some(absolute(&data.train)?);
            cfg.data.val_manifest = Some(absolute(&data.val)?);
            (load_split(&data.train, &cfg.model)?, load_split(&data.val, &cfg.model)?)
        }
    };
    for p in [&mut cfg.data.train_manifest, &mut cfg.data.val_manifest].into_iter().flatten() {
        *p = absolute(p)?;
    }
    cfg.save(&out.join(RESOLVED_CONFIG))?;
    let train = train_samples(&train);
    let val = val_set(&val);
    let quiet = args.run.quiet;
    let mut log = |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    };
    let seeds = cfg.experiment.seeds.clone();
    if sweep {
        let report = run_sensitivity(&cfg, &train, &sizes, &val, &seeds, &mut log)?;
        write_sensitivity(&report, out)?;
        if !quiet {
            print_json(serde_json::json!({
                "sizes": report.rows.iter().map(|r| r.size).collect::<Vec<_>>(),
                "means": report.rows.iter().map(|r| r.mean).collect::<Vec<_>>(),
                "trend_ok": report.trend_ok,
            }));
        }
    } else {
        let report = run_ablation(&cfg, &train, &val, &seeds, &mut log)?;
        write_ablation(&report, out)?;
        if !quiet {
            print_json(serde_json::json!({
                "variants": report.rows.iter().map(|r| r.variant.name()).collect::<Vec<_>>(),
                "means": report.rows.iter().map(|r| r.mean).collect::<Vec<_>>(),
                "ordering_passed": report.ordering.passed,
            }));
        }
    }
    Ok(())
}

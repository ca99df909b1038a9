//! The epoch loop: training, per-epoch validation, metrics history and
//! checkpoints.
//!
//! Output directory layout:
//! `metrics.jsonl` (one [`EpochRecord`] per line), `last.ckpt`,
//! `best.ckpt` (highest validation mean Dice) and
//! `checkpoints/epoch_NNNN.ckpt` at the configured cadence.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use scribblevc_core::dataset::{DenseMask, Image};
use scribblevc_core::losses::LossParts;
use scribblevc_core::metrics::{evaluate, format_dice, DiceSummary};
use scribblevc_core::train::{run_epoch, TrainSample};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::EvalConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub parts: LossParts,
    #[serde(rename = "L_total")]
    pub total: f64,
    pub val_dice_per_class: Vec<f64>,
    /// `None` when the validation set is empty.
    pub val_dice_mean: Option<f64>,
}

/// Held-out images with dense masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub masks: Vec<DenseMask>,
}

impl ValSet {
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    pub quiet: bool,
    pub eval: EvalConfig,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Validation Dice of the run's current model.
pub fn validate_run(run: &Checkpoint, val: &ValSet, eval: &EvalConfig) -> Result<Option<DiceSummary>> {
    if val.is_empty() {
        return Ok(None);
    }
    let st = &run.state;
    let (summary, _) = evaluate(&st.model, &st.bank, &val.images, &val.masks, eval.policy, eval.batch_size)?;
    Ok(Some(summary))
}

/// Trains from `run.state.epoch` up to `run.train.epochs`, returning the
/// records of the epochs run here. With an output directory, records are
/// appended to the metrics file and `last.ckpt` is always written, even
/// when no epoch runs.
pub fn fit(run: &mut Checkpoint, train: &[TrainSample], val: &ValSet, opts: &FitOptions) -> Result<Vec<EpochRecord>> {
    run.train.validate()?;
    if train.is_empty() && run.state.epoch < run.train.epochs {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = &opts.out_dir {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    }
    let mut history = Vec::new();
    while run.state.epoch < run.train.epochs {
        let cfg = run.train.clone();
        let losses = run_epoch(&mut run.state, &cfg, train)?;
        let summary = validate_run(run, val, &opts.eval)?;
        let record = EpochRecord {
            epoch: run.state.epoch,
            parts: losses.parts,
            total: losses.total,
            val_dice_per_class: summary.as_ref().map(|s| s.per_class.clone()).unwrap_or_default(),
            val_dice_mean: summary.as_ref().map(|s| s.mean),
        };
        if !opts.quiet {
            eprintln!(
                "epoch {}/{} L_total={:.4} val_dice={} mean={}",
                record.epoch,
                cfg.epochs,
                record.total,
                format_dice(&record.val_dice_per_class),
                record.val_dice_mean.map_or("n/a".into(), |m| format!("{m:.4}")),
            );
        }
        let improved = match (record.val_dice_mean, run.best_val) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            run.best_val = record.val_dice_mean;
        }
        if let Some(dir) = &opts.out_dir {
            append_record(&dir.join(METRICS_FILE), &record)?;
            if improved {
                save_checkpoint(run, &dir.join(BEST_CHECKPOINT))?;
            }
            if cfg.checkpoint_every > 0 && record.epoch.is_multiple_of(cfg.checkpoint_every) {
                let p = dir.join("checkpoints").join(format!("epoch_{:04}.ckpt", record.epoch));
                save_checkpoint(run, &p)?;
            }
        }
        history.push(record);
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(run, &dir.join(LAST_CHECKPOINT))?;
    }
    Ok(history)
}

fn append_record(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads a metrics history written by [`fit`].
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(path, e)))
        .collect()
}

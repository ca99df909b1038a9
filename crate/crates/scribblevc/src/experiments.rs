//! Ablation and training-set-size grids.
//!
//! Every cell trains a fresh model with the cell's seed and scores the
//! final-epoch model on a fixed validation set. A failing cell is recorded
//! with its error and the grid moves on.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use scribblevc_core::losses::LossWeights;
use scribblevc_core::model::BranchMode;
use scribblevc_core::train::{TrainSample, TrainState};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fit::{fit, validate_run, FitOptions, ValSet};

/// Allowed shortfall in the ablation ordering checks.
pub const ABLATION_MARGIN: f64 = 0.01;
/// Allowed drop between adjacent sizes in the sensitivity trend.
pub const TREND_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CnnOnly,
    TransOnly,
    Dual,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::CnnOnly, Variant::TransOnly, Variant::Dual, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CnnOnly => "cnn_only",
            Variant::TransOnly => "trans_only",
            Variant::Dual => "dual",
            Variant::Full => "full",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::CnnOnly => {
                "CNN branch alone: partial cross-entropy and gated CRF on its own thresholded output; \
                 no pseudo-label Dice, class loss or memory bank"
            }
            Variant::TransOnly => {
                "Transformer branch alone: partial cross-entropy and gated CRF on its own thresholded output; \
                 no pseudo-label Dice, class loss or memory bank"
            }
            Variant::Dual => {
                "both branches with scribble, mixed pseudo-label and CRF losses; class loss off and memory bank disabled"
            }
            Variant::Full => "both branches, all four losses and the class memory bank",
        }
    }

    /// The base configuration with this variant's switches applied.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let single = |cfg: &mut RunConfig, mode| {
            cfg.model.branches = mode;
            cfg.train.weights.pseudo = 0.0;
            cfg.train.weights.class = 0.0;
            cfg.train.use_memory_bank = false;
        };
        match self {
            Variant::CnnOnly => single(&mut cfg, BranchMode::CnnOnly),
            Variant::TransOnly => single(&mut cfg, BranchMode::TransOnly),
            Variant::Dual => {
                cfg.model.branches = BranchMode::Dual;
                cfg.train.weights.class = 0.0;
                cfg.train.use_memory_bank = false;
            }
            Variant::Full => cfg.model.branches = BranchMode::Dual,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub dice_mean: Option<f64>,
    pub dice_per_class: Vec<f64>,
    pub error: Option<String>,
    pub seconds: f64,
}

/// Switches that distinguish the grid rows, echoed into reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantEcho {
    pub branches: BranchMode,
    pub weights: LossWeights,
    pub use_memory_bank: bool,
    /// Whether the pseudo-label mixes both branches or degenerates to one.
    pub mixing: String,
}

impl VariantEcho {
    pub fn of(cfg: &RunConfig) -> Self {
        let mixing = match cfg.model.branches {
            BranchMode::Dual => "alpha ~ U(0,1) per batch",
            BranchMode::CnnOnly => "degenerate (alpha = 1)",
            BranchMode::TransOnly => "degenerate (alpha = 0)",
        };
        Self {
            branches: cfg.model.branches,
            weights: cfg.train.weights,
            use_memory_bank: cfg.train.use_memory_bank,
            mixing: mixing.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub config: VariantEcho,
    pub cells: Vec<CellResult>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub margin: f64,
    /// `dual >= max(cnn_only, trans_only) - margin`.
    pub dual_vs_single: Option<bool>,
    /// `full >= dual - margin`.
    pub full_vs_dual: Option<bool>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub base: RunConfig,
    pub rows: Vec<AblationRow>,
    pub ordering: OrderingCheck,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub size: usize,
    pub epochs: usize,
    pub cells: Vec<CellResult>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub seeds: Vec<u64>,
    pub base: RunConfig,
    /// How epochs are assigned per size.
    pub budget: String,
    pub rows: Vec<SensitivityRow>,
    pub tolerance: f64,
    /// Adjacent pairs `(smaller, larger)` whose mean drops by more than the tolerance.
    pub violations: Vec<(usize, usize)>,
    pub trend_ok: bool,
}

/// Mean and sample standard deviation of the successful cells.
pub fn mean_sd(cells: &[CellResult]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = cells.iter().filter_map(|c| c.dice_mean).collect();
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(m), Some(sd))
}

/// Trains one model and returns its final validation Dice.
pub fn run_cell(cfg: &RunConfig, train: &[TrainSample], val: &ValSet, seed: u64) -> CellResult {
    let start = Instant::now();
    let outcome = (|| -> Result<_> {
        let mut cfg = cfg.clone();
        cfg.train.seed = seed;
        cfg.validate()?;
        let state = TrainState::new(cfg.model.clone(), &cfg.train)?;
        let mut run = Checkpoint {
            state,
            train: cfg.train.clone(),
            best_val: None,
        };
        let opts = FitOptions {
            out_dir: None,
            quiet: true,
            eval: cfg.eval.clone(),
        };
        // Per-epoch validation is not needed here; only the final model is scored.
        fit(&mut run, train, &ValSet::default(), &opts)?;
        validate_run(&run, val, &cfg.eval)?.ok_or_else(|| Error::Config("validation set is empty".into()))
    })();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(s) => CellResult {
            seed,
            dice_mean: Some(s.mean),
            dice_per_class: s.per_class,
            error: None,
            seconds,
        },
        Err(e) => CellResult {
            seed,
            dice_mean: None,
            dice_per_class: Vec::new(),
            error: Some(e.to_string()),
            seconds,
        },
    }
}

pub fn run_ablation(
    base: &RunConfig,
    train: &[TrainSample],
    val: &ValSet,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    check_seeds(seeds)?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let cfg = v.configure(base);
        let mut cells = Vec::new();
        for &seed in seeds {
            let cell = run_cell(&cfg, train, val, seed);
            log(&cell_line(v.name(), &cell));
            cells.push(cell);
        }
        let (mean, sd) = mean_sd(&cells);
        rows.push(AblationRow {
            variant: v,
            description: v.description().into(),
            config: VariantEcho::of(&cfg),
            cells,
            mean,
            sd,
        });
    }
    let m = |v: Variant| rows.iter().find(|r| r.variant == v).and_then(|r| r.mean);
    let dual_vs_single = match (m(Variant::Dual), m(Variant::CnnOnly), m(Variant::TransOnly)) {
        (Some(d), Some(c), Some(t)) => Some(d >= c.max(t) - ABLATION_MARGIN),
        _ => None,
    };
    let full_vs_dual = match (m(Variant::Full), m(Variant::Dual)) {
        (Some(f), Some(d)) => Some(f >= d - ABLATION_MARGIN),
        _ => None,
    };
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        base: base.clone(),
        rows,
        ordering: OrderingCheck {
            margin: ABLATION_MARGIN,
            dual_vs_single,
            full_vs_dual,
            passed: dual_vs_single == Some(true) && full_vs_dual == Some(true),
        },
    })
}

/// Epochs for a training subset so every size gets the optimizer-step
/// budget of `base_epochs` passes over the largest subset.
pub fn epochs_for_size(base_epochs: usize, size: usize, largest: usize) -> usize {
    (base_epochs * largest).div_ceil(size)
}

/// One grid row per training-set size; subsets are nested prefixes of `pool`.
pub fn run_sensitivity(
    base: &RunConfig,
    pool: &[TrainSample],
    sizes: &[usize],
    val: &ValSet,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<SensitivityReport> {
    check_seeds(seeds)?;
    if sizes.is_empty() {
        return Err(Error::Config("sizes must not be empty".into()));
    }
    let mut seen = BTreeSet::new();
    for &s in sizes {
        if !seen.insert(s) {
            return Err(Error::Config(format!("duplicate training-set size {s}")));
        }
        if s == 0 || s > pool.len() {
            return Err(Error::Config(format!(
                "training-set size {s} outside 1..={} (available samples)",
                pool.len()
            )));
        }
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let largest = *sorted.last().unwrap();
    let mut rows = Vec::new();
    for &size in &sorted {
        let mut cfg = base.clone();
        cfg.train.epochs = epochs_for_size(base.train.epochs, size, largest);
        let mut cells = Vec::new();
        for &seed in seeds {
            let cell = run_cell(&cfg, &pool[..size], val, seed);
            log(&cell_line(&format!("size={size}"), &cell));
            cells.push(cell);
        }
        let (mean, sd) = mean_sd(&cells);
        rows.push(SensitivityRow {
            size,
            epochs: cfg.train.epochs,
            cells,
            mean,
            sd,
        });
    }
    let mut violations = Vec::new();
    for pair in rows.windows(2) {
        let ok = matches!((pair[0].mean, pair[1].mean), (Some(a), Some(b)) if b >= a - TREND_TOLERANCE);
        if !ok {
            violations.push((pair[0].size, pair[1].size));
        }
    }
    let all_ran = rows.iter().all(|r| r.mean.is_some());
    Ok(SensitivityReport {
        seeds: seeds.to_vec(),
        base: base.clone(),
        budget: format!(
            "equal optimizer steps: epochs(size) = ceil({} * {largest} / size)",
            base.train.epochs
        ),
        trend_ok: all_ran && violations.is_empty(),
        rows,
        tolerance: TREND_TOLERANCE,
        violations,
    })
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(())
}

fn cell_line(label: &str, c: &CellResult) -> String {
    match (&c.dice_mean, &c.error) {
        (Some(m), _) => format!("{label} seed={} dice_mean={m:.4} ({:.1}s)", c.seed, c.seconds),
        (None, e) => format!("{label} seed={} failed: {}", c.seed, e.as_deref().unwrap_or("unknown")),
    }
}

//! Evaluation reports and their on-disk exports.
//!
//! `metrics.json` holds the whole [`EvalReport`]. `metrics.csv` has one row
//! per sample (`id, dice_0 .. dice_{K-1}, dice_mean`) followed by a row with
//! id `ALL` carrying the report-level values. Overlays are 8-bit RGB PNGs
//! with prediction boundaries drawn in a per-class color over the image.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use scribblevc_core::dataset::Image;
use scribblevc_core::metrics::{foreground_mean, DiceSummary, PredictionPolicy};

use crate::error::{Error, Result};
use crate::experiments::{AblationReport, SensitivityReport};
use crate::fit::EpochRecord;
use crate::png;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub id: String,
    pub dice: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub policy: PredictionPolicy,
    pub num_classes: usize,
    pub sample_count: usize,
    /// Per-class Dice averaged over samples, background included.
    pub per_class_dice: Vec<f64>,
    /// Mean over foreground classes.
    pub mean_dice: f64,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub samples: Vec<SampleDice>,
}

impl EvalReport {
    pub fn new(
        summary: &DiceSummary,
        ids: &[String],
        policy: PredictionPolicy,
        seeds: Vec<u64>,
        config: serde_json::Value,
    ) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            policy,
            num_classes: summary.per_class.len(),
            sample_count: summary.per_sample.len(),
            per_class_dice: summary.per_class.clone(),
            mean_dice: summary.mean,
            seeds,
            config,
            samples: ids
                .iter()
                .zip(&summary.per_sample)
                .map(|(id, d)| SampleDice {
                    id: id.clone(),
                    dice: d.clone(),
                    mean: foreground_mean(d),
                })
                .collect(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

pub fn write_metrics_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..report.num_classes).map(|k| format!("dice_{k}")));
    header.push("dice_mean".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let rows = report
        .samples
        .iter()
        .map(|s| (s.id.as_str(), &s.dice, s.mean))
        .chain(std::iter::once(("ALL", &report.per_class_dice, report.mean_dice)));
    for (id, dice, mean) in rows {
        let mut rec = vec![id.to_string()];
        // `Display` for f64 prints the shortest string that parses back exactly.
        rec.extend(dice.iter().map(|v| v.to_string()));
        rec.push(mean.to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(id, per-class Dice, mean)` rows of a metrics CSV, `ALL` row included.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, Vec<f64>, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| Error::parse(path, e)))
            .collect::<Result<_>>()?;
        let (mean, dice) = vals.split_last().ok_or_else(|| Error::parse(path, "empty row"))?;
        out.push((rec[0].to_string(), dice.to_vec(), *mean));
    }
    Ok(out)
}

/// Distinct colors for class boundaries; class 0 is never drawn.
const PALETTE: [[u8; 3]; 7] = [
    [255, 64, 64],
    [64, 220, 64],
    [64, 128, 255],
    [255, 200, 0],
    [255, 0, 255],
    [0, 230, 230],
    [255, 128, 0],
];

fn class_color(k: u8) -> Rgb<u8> {
    Rgb(PALETTE[(k as usize - 1) % PALETTE.len()])
}

/// Image in gray with the boundary pixels of each foreground predicted
/// region colored by class. A pixel is on a boundary when it belongs to a
/// foreground class and a 4-neighbor (or the image edge) does not.
pub fn overlay(image: &Image, pred: &[u8]) -> RgbImage {
    let (h, w) = (image.height, image.width);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = (image.pixels[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            let l = pred[y * w + x];
            let edge = l != 0
                && (y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || pred[(y - 1) * w + x] != l
                    || pred[(y + 1) * w + x] != l
                    || pred[y * w + x - 1] != l
                    || pred[y * w + x + 1] != l);
            let px = if edge { class_color(l) } else { Rgb([g, g, g]) };
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out
}

/// A named series for [`plot_curves`].
pub struct Series<'a> {
    pub name: &'a str,
    pub values: Vec<f64>,
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN: i64 = 40;

/// Line chart of `series` against `epochs` with a frame and a zero-based
/// y-axis when all values are non-negative.
pub fn plot_curves(epochs: &[usize], series: &[Series<'_>]) -> Result<RgbImage> {
    if epochs.windows(2).any(|p| p[1] != p[0] + 1) {
        return Err(Error::Config("curve epochs must be consecutive".into()));
    }
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (x0, y0, x1, y1) = (MARGIN, MARGIN / 2, PLOT_W as i64 - MARGIN / 2, PLOT_H as i64 - MARGIN);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, x0, y1, x1, y1, axis);
    line(&mut img, x0, y0, x0, y1, axis);
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Ok(img);
    }
    if lo >= 0.0 {
        lo = 0.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let n = epochs.len().max(2) - 1;
    let px = |i: usize| x0 + ((x1 - x0) as f64 * i as f64 / n as f64).round() as i64;
    let py = |v: f64| y1 - ((y1 - y0) as f64 * (v - lo) / (hi - lo)).round() as i64;
    // Tick marks at every tenth of the x range.
    for t in 0..=10 {
        let x = x0 + (x1 - x0) * t / 10;
        line(&mut img, x, y1, x, y1 + 4, axis);
    }
    for (si, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[si % PALETTE.len()]);
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = (px(i), py(v));
            if let Some(q) = prev {
                line(&mut img, q.0, q.1, p.0, p.1, color);
            } else {
                line(&mut img, p.0, p.1, p.0, p.1, color);
            }
            prev = Some(p);
        }
        // Legend swatch per series, top right.
        let ly = y0 + 4 + 8 * si as i64;
        line(&mut img, x1 - 24, ly, x1 - 4, ly, color);
    }
    Ok(img)
}

/// Bresenham line, clipped to the image.
fn line(img: &mut RgbImage, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if (0..img.width() as i64).contains(&x0) && (0..img.height() as i64).contains(&y0) {
            img.put_pixel(x0 as u32, y0 as u32, c);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Files written by [`export_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportedFiles {
    pub metrics_json: PathBuf,
    pub metrics_csv: PathBuf,
    pub overlays: Vec<PathBuf>,
    pub curves: Vec<PathBuf>,
}

/// Writes metrics, one overlay per evaluated sample and, given a training
/// history, loss and Dice curves.
pub fn export_report(
    report: &EvalReport,
    images: &[Image],
    preds: &[Vec<u8>],
    history: Option<&[EpochRecord]>,
    out_dir: &Path,
) -> Result<ExportedFiles> {
    if images.len() != report.samples.len() || preds.len() != report.samples.len() {
        return Err(Error::Config("report, images and predictions disagree in length".into()));
    }
    create_dir(out_dir)?;
    let mut files = ExportedFiles {
        metrics_json: out_dir.join("metrics.json"),
        metrics_csv: out_dir.join("metrics.csv"),
        ..Default::default()
    };
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_text(&files.metrics_json, &(json + "\n"))?;
    write_metrics_csv(report, &files.metrics_csv)?;
    let odir = out_dir.join("overlays");
    create_dir(&odir)?;
    for ((s, img), pred) in report.samples.iter().zip(images).zip(preds) {
        let p = odir.join(format!("{}.png", s.id));
        png::save_rgb(&overlay(img, pred), &p)?;
        files.overlays.push(p);
    }
    if let Some(hist) = history.filter(|h| !h.is_empty()) {
        let cdir = out_dir.join("curves");
        create_dir(&cdir)?;
        let epochs: Vec<usize> = hist.iter().map(|r| r.epoch).collect();
        let col = |f: &dyn Fn(&EpochRecord) -> f64| hist.iter().map(f).collect::<Vec<_>>();
        let loss = plot_curves(
            &epochs,
            &[
                Series { name: "L_total", values: col(&|r| r.total) },
                Series { name: "L_ss", values: col(&|r| r.parts.scribble) },
                Series { name: "L_pl", values: col(&|r| r.parts.pseudo) },
                Series { name: "L_crf", values: col(&|r| r.parts.crf) },
                Series { name: "L_cls", values: col(&|r| r.parts.class) },
            ],
        )?;
        let dice = plot_curves(
            &epochs,
            &[Series {
                name: "val_dice_mean",
                values: col(&|r| r.val_dice_mean.unwrap_or(f64::NAN)),
            }],
        )?;
        for (name, img) in [("loss.png", loss), ("dice.png", dice)] {
            let p = cdir.join(name);
            png::save_rgb(&img, &p)?;
            files.curves.push(p);
        }
    }
    Ok(files)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// `ablation.json` and `ablation.csv` (one row per variant and seed, then
/// one summary row per variant with seed `mean`).
pub fn write_ablation(report: &AblationReport, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_text(&out_dir.join("ablation.json"), &(json + "\n"))?;
    let path = out_dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["variant", "seed", "dice_mean", "sd", "error"]).map_err(|e| csv_error(&path, e))?;
    for r in &report.rows {
        for c in &r.cells {
            let rec = [
                r.variant.name().to_string(),
                c.seed.to_string(),
                fmt_opt(c.dice_mean),
                String::new(),
                c.error.clone().unwrap_or_default(),
            ];
            w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
        }
    }
    for r in &report.rows {
        let rec = [r.variant.name().to_string(), "mean".into(), fmt_opt(r.mean), fmt_opt(r.sd), String::new()];
        w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// `sensitivity.json` and `sensitivity.csv`, laid out like the ablation table.
pub fn write_sensitivity(report: &SensitivityReport, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_text(&out_dir.join("sensitivity.json"), &(json + "\n"))?;
    let path = out_dir.join("sensitivity.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["size", "epochs", "seed", "dice_mean", "sd", "error"]).map_err(|e| csv_error(&path, e))?;
    for r in &report.rows {
        for c in &r.cells {
            let rec = [
                r.size.to_string(),
                r.epochs.to_string(),
                c.seed.to_string(),
                fmt_opt(c.dice_mean),
                String::new(),
                c.error.clone().unwrap_or_default(),
            ];
            w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
        }
    }
    for r in &report.rows {
        let rec = [
            r.size.to_string(),
            r.epochs.to_string(),
            "mean".into(),
            fmt_opt(r.mean),
            fmt_opt(r.sd),
            String::new(),
        ];
        w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

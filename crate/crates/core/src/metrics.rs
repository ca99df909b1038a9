//! Dice evaluation and the final-prediction policy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{DenseMask, Image, ScribbleMask};
use crate::error::{Error, Result};
use crate::maps::BatchMaps;
use crate::mie::{Branch, ClassMemoryBank};
use crate::model::{DualPrediction, Mode, ScribbleVc};

/// Per-class Dice `2|P∩T| / (|P|+|T|)`; 1 when both sets are empty.
pub fn dice_score(pred: &[u8], truth: &DenseMask) -> Result<Vec<f64>> {
    if pred.len() != truth.labels.len() {
        return Err(Error::ShapeMismatch {
            what: "prediction",
            expected: format!("{}", truth.labels.len()),
            actual: format!("{}", pred.len()),
        });
    }
    let k = truth.num_classes;
    let (mut inter, mut p, mut t) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&a, &b) in pred.iter().zip(&truth.labels) {
        let (a, b) = (a as usize, b as usize);
        if a >= k {
            return Err(Error::LabelOutOfRange { value: a, num_classes: k });
        }
        p[a] += 1;
        t[b] += 1;
        if a == b {
            inter[a] += 1;
        }
    }
    Ok((0..k)
        .map(|c| {
            if p[c] + t[c] == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / (p[c] + t[c]) as f64
            }
        })
        .collect())
}

/// Mean over foreground classes (class 0 is background).
pub fn foreground_mean(per_class: &[f64]) -> f64 {
    let fg = &per_class[1.min(per_class.len())..];
    if fg.is_empty() {
        return 0.0;
    }
    fg.iter().sum::<f64>() / fg.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionPolicy {
    /// Argmax of the mean of the available branch probabilities.
    #[default]
    Mean,
    Cnn,
    Trans,
}

impl PredictionPolicy {
    pub fn name(self) -> &'static str {
        match self {
            PredictionPolicy::Mean => "mean",
            PredictionPolicy::Cnn => "cnn",
            PredictionPolicy::Trans => "trans",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "cnn" => Ok(Self::Cnn),
            "trans" => Ok(Self::Trans),
            other => Err(Error::InvalidArgument(format!(
                "unknown policy {other:?} (expected mean, cnn or trans)"
            ))),
        }
    }
}

/// Probability maps selected by `policy`.
pub fn combine(pred: &DualPrediction, policy: PredictionPolicy) -> Result<BatchMaps> {
    let missing = |b: Branch| Error::InvalidArgument(format!("policy {} needs the {} branch", policy.name(), b.name()));
    match policy {
        PredictionPolicy::Cnn => pred.y_cnn.clone().ok_or_else(|| missing(Branch::Cnn)),
        PredictionPolicy::Trans => pred.y_trans.clone().ok_or_else(|| missing(Branch::Trans)),
        PredictionPolicy::Mean => match (&pred.y_cnn, &pred.y_trans) {
            (Some(a), Some(b)) => {
                a.ensure_same_shape(b, "branch outputs")?;
                let mut m = a.clone();
                for (x, y) in m.data.iter_mut().zip(&b.data) {
                    *x = 0.5 * (*x + y);
                }
                Ok(m)
            }
            (Some(a), None) | (None, Some(a)) => Ok(a.clone()),
            (None, None) => Err(Error::InvalidArgument("prediction has no branch outputs".into())),
        },
    }
}

/// Hard labels (`H x W` per image) from the inference path.
pub fn predict(
    model: &ScribbleVc,
    bank: &ClassMemoryBank,
    images: &[Image],
    policy: PredictionPolicy,
) -> Result<Vec<Vec<u8>>> {
    let pred = model.forward(images, bank, Mode::Eval)?;
    let maps = combine(&pred, policy)?;
    let flat = maps.argmax();
    let hw = maps.pixels();
    Ok(flat.chunks(hw.max(1)).map(<[u8]>::to_vec).collect())
}

/// Per-image Dice summary of a labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    /// Per-class Dice averaged over images.
    pub per_class: Vec<f64>,
    /// Foreground mean of `per_class`.
    pub mean: f64,
    /// Per-image, per-class Dice.
    pub per_sample: Vec<Vec<f64>>,
}

impl DiceSummary {
    pub fn from_samples(per_sample: Vec<Vec<f64>>, num_classes: usize) -> Self {
        let mut per_class = vec![0.0; num_classes];
        for s in &per_sample {
            for (a, v) in per_class.iter_mut().zip(s) {
                *a += v;
            }
        }
        let n = per_sample.len().max(1) as f64;
        per_class.iter_mut().for_each(|v| *v /= n);
        let mean = if per_sample.is_empty() { 0.0 } else { foreground_mean(&per_class) };
        Self {
            per_class,
            mean,
            per_sample,
        }
    }
}

/// Predicts `images` in chunks of `batch` and scores them against `truth`.
pub fn evaluate(
    model: &ScribbleVc,
    bank: &ClassMemoryBank,
    images: &[Image],
    truth: &[DenseMask],
    policy: PredictionPolicy,
    batch: usize,
) -> Result<(DiceSummary, Vec<Vec<u8>>)> {
    if images.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            what: "evaluation set",
            expected: format!("{} masks", images.len()),
            actual: format!("{} masks", truth.len()),
        });
    }
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        preds.extend(predict(model, bank, chunk, policy)?);
    }
    let per_sample = preds
        .iter()
        .zip(truth)
        .map(|(p, t)| dice_score(p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((DiceSummary::from_samples(per_sample, model.config.num_classes), preds))
}

/// Fraction of scribbled pixels whose predicted label matches the scribble.
pub fn scribble_accuracy(preds: &[Vec<u8>], scribbles: &[ScribbleMask]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(scribbles) {
        for (&a, &b) in p.iter().zip(&s.labels) {
            if (b as usize) < s.num_classes {
                total += 1;
                hit += usize::from(a == b);
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Short label for a Dice vector, e.g. `"0.912/0.804/0.771"`.
pub fn format_dice(per_class: &[f64]) -> String {
    let parts: Vec<String> = per_class.iter().map(|v| format!("{v:.3}")).collect();
    parts.join("/")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(k: usize, labels: &[u8]) -> DenseMask {
        DenseMask::new(4, labels.len() / 4, k, labels.to_vec()).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let t = mask(3, &[0, 1, 1, 2, 0, 0, 2, 2, 1, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(dice_score(&t.labels, &t).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn absent_class_scores_one() {
        let t = mask(3, &[0; 16]);
        assert_eq!(dice_score(&[0; 16], &t).unwrap()[2], 1.0);
        let mut p = [0u8; 16];
        p[0] = 2;
        assert_eq!(dice_score(&p, &t).unwrap()[2], 0.0);
    }

    #[test]
    fn two_by_two_overlap_is_half() {
        let mut truth = [0u8; 16];
        truth[0] = 1;
        truth[1] = 1;
        let mut pred = [0u8; 16];
        pred[1] = 1;
        pred[2] = 1;
        assert_eq!(dice_score(&pred, &mask(2, &truth)).unwrap()[1], 0.5);
    }

    #[test]
    fn mean_policy_overrides_cnn() {
        let a = BatchMaps::new(1, 2, 1, 1, vec![0.6, 0.4]).unwrap();
        let b = BatchMaps::new(1, 2, 1, 1, vec![0.2, 0.8]).unwrap();
        let pred = DualPrediction {
            y_cnn: Some(a),
            y_trans: Some(b),
            p_cnn: None,
            p_trans: None,
            fusion_cnn: Default::default(),
            fusion_trans: Default::default(),
        };
        let m = combine(&pred, PredictionPolicy::Mean).unwrap();
        assert!((m.data[0] - 0.4).abs() < 1e-12 && (m.data[1] - 0.6).abs() < 1e-12);
        assert_eq!(m.argmax(), vec![1]);
        assert_eq!(combine(&pred, PredictionPolicy::Cnn).unwrap().argmax(), vec![0]);
        assert_eq!(combine(&pred, PredictionPolicy::Trans).unwrap().argmax(), vec![1]);
    }

    #[test]
    fn foreground_mean_skips_background() {
        assert_eq!(foreground_mean(&[0.0, 1.0, 0.5]), 0.75);
    }
}

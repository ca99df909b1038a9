//! Class-embedding memory: per-class feature vectors extracted from each
//! batch, a per-branch bank of accepted historical vectors, and the
//! probability-weighted fusion of those vectors into bottleneck features.
//!
//! Everything here runs on plain values outside the gradient tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability a class must exceed to count as predicted present.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cnn,
    Trans,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Cnn, Branch::Trans];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cnn => "cnn",
            Branch::Trans => "trans",
        }
    }
}

/// Historical class vectors of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BankBranch {
    pub num_classes: usize,
    pub dim: usize,
    /// `num_classes x dim`, row-major.
    pub vectors: Vec<f32>,
    pub valid: Vec<bool>,
    /// Head confidence of the last accepted vector; `-inf` while invalid.
    pub score: Vec<f64>,
}

impl BankBranch {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            vectors: vec![0.0; num_classes * dim],
            valid: vec![false; num_classes],
            score: vec![f64::NEG_INFINITY; num_classes],
        }
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn is_empty(&self) -> bool {
        !self.valid.iter().any(|&v| v)
    }

    /// Checks the invalid-entry invariants.
    pub fn check(&self) -> Result<()> {
        if self.vectors.len() != self.num_classes * self.dim
            || self.valid.len() != self.num_classes
            || self.score.len() != self.num_classes
        {
            return Err(Error::InvalidArgument("bank dimensions inconsistent".into()));
        }
        for k in 0..self.num_classes {
            if !self.valid[k]
                && (self.vector(k).iter().any(|&v| v != 0.0) || self.score[k] != f64::NEG_INFINITY)
            {
                return Err(Error::InvalidArgument(format!(
                    "invalid bank entry {k} holds data"
                )));
            }
            if self.vector(k).iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("bank entry {k} not finite")));
            }
        }
        Ok(())
    }
}

/// One [`BankBranch`] per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMemoryBank {
    pub cnn: BankBranch,
    pub trans: BankBranch,
}

impl ClassMemoryBank {
    pub fn new(num_classes: usize, cnn_dim: usize, trans_dim: usize) -> Self {
        Self {
            cnn: BankBranch::new(num_classes, cnn_dim),
            trans: BankBranch::new(num_classes, trans_dim),
        }
    }

    pub fn branch(&self, b: Branch) -> &BankBranch {
        match b {
            Branch::Cnn => &self.cnn,
            Branch::Trans => &self.trans,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut BankBranch {
        match b {
            Branch::Cnn => &mut self.cnn,
            Branch::Trans => &mut self.trans,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cnn.is_empty() && self.trans.is_empty()
    }
}

/// Per-class vectors of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchClassVectors {
    pub dim: usize,
    /// `num_classes x dim`.
    pub vectors: Vec<f32>,
    pub counts: Vec<usize>,
}

impl BatchClassVectors {
    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }
}

/// `v_k = (1/B) * sum_i probs[i, k] * feats[i]`.
///
/// `feats` holds one pooled `dim`-vector per sample, `probs` is `B x K`.
pub fn extract_batch_class_vectors(
    feats: &[Vec<f32>],
    probs: &[f64],
    num_classes: usize,
) -> Result<BatchClassVectors> {
    let batch = feats.len();
    if probs.len() != batch * num_classes {
        return Err(Error::ShapeMismatch {
            what: "class probabilities",
            expected: format!("{batch}x{num_classes}"),
            actual: format!("{} values", probs.len()),
        });
    }
    let dim = feats.first().map_or(0, Vec::len);
    let mut acc = vec![0.0f64; num_classes * dim];
    for (i, f) in feats.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::ShapeMismatch {
                what: "pooled features",
                expected: format!("{dim}"),
                actual: format!("{}", f.len()),
            });
        }
        for k in 0..num_classes {
            let p = probs[i * num_classes + k];
            for (a, &v) in acc[k * dim..(k + 1) * dim].iter_mut().zip(f) {
                *a += p * v as f64;
            }
        }
    }
    let denom = batch.max(1) as f64;
    Ok(BatchClassVectors {
        dim,
        vectors: acc.into_iter().map(|v| (v / denom) as f32).collect(),
        counts: vec![batch; num_classes],
    })
}

/// Outcome of one bank update, per class.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    pub accepted: Vec<bool>,
    pub candidate_scores: Vec<Option<f64>>,
}

/// Merges a batch's class vectors into the bank.
///
/// The candidate for class `k` is the mean of the batch vector and the
/// stored vector (or the batch vector alone on a cold start). It replaces
/// the stored vector only if `head(candidate)[k]` beats the stored score.
/// All-zero batch vectors are skipped.
pub fn update_bank<H>(bank: &mut BankBranch, batch: &BatchClassVectors, head: H) -> UpdateReport
where
    H: Fn(&[f32]) -> Vec<f64>,
{
    let k_total = bank.num_classes;
    let mut report = UpdateReport {
        accepted: vec![false; k_total],
        candidate_scores: vec![None; k_total],
    };
    for k in 0..k_total {
        let fresh = batch.vector(k);
        if fresh.iter().all(|&v| v == 0.0) {
            continue;
        }
        let candidate: Vec<f32> = if bank.valid[k] {
            fresh
                .iter()
                .zip(bank.vector(k))
                .map(|(a, b)| 0.5 * (a + b))
                .collect()
        } else {
            fresh.to_vec()
        };
        let score = head(&candidate)[k];
        report.candidate_scores[k] = Some(score);
        if score > bank.score[k] {
            bank.vectors[k * bank.dim..(k + 1) * bank.dim].copy_from_slice(&candidate);
            bank.valid[k] = true;
            bank.score[k] = score;
            report.accepted[k] = true;
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionRule {
    /// Any predicted class without a valid bank entry vetoes fusion.
    Train,
    /// Predicted classes without a valid bank entry are left out of the sum.
    Infer,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleFusion {
    pub fused: bool,
    /// `(class, weight)` pairs that contributed.
    pub contributions: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionReport {
    pub samples: Vec<SampleFusion>,
}

/// Additive class signal for one sample, or `None` when the features
/// pass through unchanged.
pub fn fusion_delta(
    probs: &[f64],
    bank: &BankBranch,
    rule: FusionRule,
) -> (Option<Vec<f32>>, SampleFusion) {
    let predicted: Vec<usize> = (0..bank.num_classes)
        .filter(|&k| probs[k] > PRESENCE_THRESHOLD)
        .collect();
    let usable: Vec<usize> = match rule {
        FusionRule::Train => {
            if predicted.is_empty() || predicted.iter().any(|&k| !bank.valid[k]) {
                Vec::new()
            } else {
                predicted
            }
        }
        FusionRule::Infer => predicted.into_iter().filter(|&k| bank.valid[k]).collect(),
    };
    if usable.is_empty() {
        return (None, SampleFusion::default());
    }
    let mut delta = vec![0.0f64; bank.dim];
    let mut contributions = Vec::with_capacity(usable.len());
    for k in usable {
        let w = probs[k];
        for (d, &v) in delta.iter_mut().zip(bank.vector(k)) {
            *d += w * v as f64;
        }
        contributions.push((k, w));
    }
    (
        Some(delta.into_iter().map(|v| v as f32).collect()),
        SampleFusion {
            fused: true,
            contributions,
        },
    )
}

fn fuse(
    feats: &[Vec<f32>],
    probs: &[f64],
    bank: &BankBranch,
    rule: FusionRule,
) -> Result<(Vec<Vec<f32>>, FusionReport)> {
    let k = bank.num_classes;
    if probs.len() != feats.len() * k {
        return Err(Error::ShapeMismatch {
            what: "fusion probabilities",
            expected: format!("{}x{k}", feats.len()),
            actual: format!("{} values", probs.len()),
        });
    }
    let mut out = Vec::with_capacity(feats.len());
    let mut report = FusionReport::default();
    for (i, f) in feats.iter().enumerate() {
        let (delta, info) = fusion_delta(&probs[i * k..(i + 1) * k], bank, rule);
        let fused = match delta {
            Some(d) => f.iter().zip(&d).map(|(a, b)| a + b).collect(),
            None => f.clone(),
        };
        out.push(fused);
        report.samples.push(info);
    }
    Ok((out, report))
}

/// Training-time fusion on pooled features (all-or-nothing per sample).
pub fn fuse_train(
    feats: &[Vec<f32>],
    probs: &[f64],
    bank: &BankBranch,
) -> Result<(Vec<Vec<f32>>, FusionReport)> {
    fuse(feats, probs, bank, FusionRule::Train)
}

/// Test-time fusion on pooled features; the bank is read-only.
pub fn fuse_infer(feats: &[Vec<f32>], probs: &[f64], bank: &BankBranch) -> Result<Vec<Vec<f32>>> {
    fuse(feats, probs, bank, FusionRule::Infer).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_hand_example() {
        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let probs = [0.5, 1.0];
        let v = extract_batch_class_vectors(&feats, &probs, 1).unwrap();
        assert_eq!(v.vector(0), &[0.25, 0.5]);
        assert_eq!(v.counts, vec![2]);
    }

    #[test]
    fn extraction_identity_and_annihilation() {
        let feats = vec![vec![0.3, -2.0, 7.5]];
        let v = extract_batch_class_vectors(&feats, &[1.0, 0.0], 2).unwrap();
        assert_eq!(v.vector(0), feats[0].as_slice());
        assert!(v.vector(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cold_start_accepts_and_reject_keeps_bits() {
        let mut bank = BankBranch::new(2, 2);
        let batch = BatchClassVectors {
            dim: 2,
            vectors: vec![1.0, 2.0, 0.0, 0.0],
            counts: vec![1, 1],
        };
        let r = update_bank(&mut bank, &batch, |_| vec![0.3, 0.3]);
        assert_eq!(r.accepted, vec![true, false]);
        assert!(bank.valid[0] && !bank.valid[1]);
        assert_eq!(bank.vector(0), &[1.0, 2.0]);
        bank.check().unwrap();

        let before = bank.clone();
        let batch2 = BatchClassVectors {
            dim: 2,
            vectors: vec![5.0, 5.0, 0.0, 0.0],
            counts: vec![1, 1],
        };
        let r = update_bank(&mut bank, &batch2, |_| vec![0.1, 0.1]);
        assert_eq!(r.accepted, vec![false, false]);
        assert_eq!(bank, before);
    }

    #[test]
    fn accepted_candidate_is_mean_with_history() {
        let mut bank = BankBranch::new(1, 2);
        let b1 = BatchClassVectors {
            dim: 2,
            vectors: vec![2.0, 0.0],
            counts: vec![1],
        };
        update_bank(&mut bank, &b1, |_| vec![0.2]);
        let b2 = BatchClassVectors {
            dim: 2,
            vectors: vec![0.0, 4.0],
            counts: vec![1],
        };
        update_bank(&mut bank, &b2, |_| vec![0.9]);
        assert_eq!(bank.vector(0), &[1.0, 2.0]);
        assert_eq!(bank.score[0], 0.9);
    }

    #[test]
    fn train_rule_vetoes_but_infer_filters() {
        let mut bank = BankBranch::new(3, 2);
        bank.vectors[2..4].copy_from_slice(&[1.0, 1.0]);
        bank.valid[1] = true;
        bank.score[1] = 0.7;
        let probs = [0.1, 0.9, 0.8];
        let (d, info) = fusion_delta(&probs, &bank, FusionRule::Train);
        assert!(d.is_none() && !info.fused);
        let (d, info) = fusion_delta(&probs, &bank, FusionRule::Infer);
        assert_eq!(d.unwrap(), vec![0.9f32, 0.9]);
        assert_eq!(info.contributions, vec![(1, 0.9)]);
    }

    #[test]
    fn no_predicted_class_means_identity() {
        let mut bank = BankBranch::new(2, 2);
        bank.valid = vec![true, true];
        bank.score = vec![0.9, 0.9];
        bank.vectors = vec![1.0, 1.0, 2.0, 2.0];
        let feats = vec![vec![0.5, -0.5]];
        let (out, rep) = fuse_train(&feats, &[0.5, 0.2], &bank).unwrap();
        assert_eq!(out, feats);
        assert!(!rep.samples[0].fused);
    }
}

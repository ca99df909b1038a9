//! Memory-bank invariants over random update sequences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribblevc_core::mie::*;

/// Fixed random linear head followed by a sigmoid.
fn head(k: usize, dim: usize, seed: u64) -> impl Fn(&[f32]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    move |v: &[f32]| {
        (0..k)
            .map(|c| {
                let z: f64 = v.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, b)| *a as f64 * b).sum();
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, k: usize, dim: usize) -> BatchClassVectors {
    let feats: Vec<Vec<f32>> = (0..b).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let probs: Vec<f64> = (0..b * k).map(|_| rng.random_range(0.0..1.0)).collect();
    extract_batch_class_vectors(&feats, &probs, k).unwrap()
}

proptest! {
    #[test]
    fn scores_never_decrease(seed in any::<u64>(), k in 2usize..5, dim in 1usize..8, b in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = head(k, dim, seed ^ 0xabc);
        let mut bank = BankBranch::new(k, dim);
        let mut prev = bank.score.clone();
        for _ in 0..50 {
            let batch = random_batch(&mut rng, b, k, dim);
            let report = update_bank(&mut bank, &batch, &h);
            for c in 0..k {
                prop_assert!(bank.score[c] >= prev[c]);
                prop_assert_eq!(report.accepted[c], bank.score[c] > prev[c]);
            }
            bank.check().unwrap();
            prev = bank.score.clone();
        }
    }

    #[test]
    fn empty_bank_fusion_is_identity(seed in any::<u64>(), k in 2usize..5, dim in 1usize..8, b in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = BankBranch::new(k, dim);
        let feats: Vec<Vec<f32>> = (0..b).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let probs: Vec<f64> = (0..b * k).map(|_| rng.random_range(0.0..1.0)).collect();
        prop_assert_eq!(&fuse_infer(&feats, &probs, &bank).unwrap(), &feats);
        let (fused, report) = fuse_train(&feats, &probs, &bank).unwrap();
        prop_assert_eq!(&fused, &feats);
        prop_assert!(report.samples.iter().all(|s| !s.fused));
    }

    #[test]
    fn fusion_adds_probability_weighted_entries(seed in any::<u64>(), k in 2usize..5, dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = BankBranch::new(k, dim);
        for c in 0..k {
            bank.valid[c] = true;
            bank.score[c] = 0.5;
            for j in 0..dim {
                bank.vectors[c * dim + j] = rng.random_range(-1.0..1.0);
            }
        }
        let feats = vec![(0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()];
        let probs: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let fused = fuse_infer(&feats, &probs, &bank).unwrap();
        for j in 0..dim {
            let mut expect = feats[0][j] as f64;
            for c in 0..k {
                if probs[c] > PRESENCE_THRESHOLD {
                    expect += probs[c] * bank.vector(c)[j] as f64;
                }
            }
            prop_assert!((fused[0][j] as f64 - expect).abs() < 1e-5);
        }
    }
}

#[test]
fn fusion_hand_example() {
    let mut bank = BankBranch::new(3, 2);
    for (c, v) in [(1, [1.0, 2.0]), (2, [-1.0, 0.5])] {
        bank.valid[c] = true;
        bank.score[c] = 0.9;
        bank.vectors[c * 2..c * 2 + 2].copy_from_slice(&v);
    }
    let feats = vec![vec![0.25f32, -0.5]];
    let fused = fuse_infer(&feats, &[0.1, 0.8, 0.6], &bank).unwrap();
    let expect = [0.25 + 0.8 * 1.0 - 0.6, -0.5 + 0.8 * 2.0 + 0.6 * 0.5];
    for (a, e) in fused[0].iter().zip(expect) {
        assert!((*a as f64 - e).abs() < 1e-6);
    }
}

//! Training objectives with analytic gradients.
//!
//! Every loss is evaluated in `f64` on [`BatchMaps`] and returns its value
//! together with the gradient with respect to its probability inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::BatchMaps;

/// Clamp applied inside logarithms.
pub const LOG_EPS: f64 = 1e-8;
/// Clamp applied to sigmoid probabilities.
pub const PROB_EPS: f64 = 1e-7;
/// Dice smoothing.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub scribble: f64,
    pub pseudo: f64,
    pub crf: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            scribble: 1.0,
            pseudo: 0.5,
            crf: 0.1,
            class: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.scribble, self.pseudo, self.crf, self.class];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0, got {all:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelConfig {
    pub threshold: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.threshold) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "pseudo-label threshold must be in [0, 1), got {}",
                self.threshold
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    /// Half-width of the square neighbourhood window.
    pub radius: usize,
    pub sigma_xy: f64,
    pub sigma_int: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            radius: 5,
            sigma_xy: 3.0,
            sigma_int: 0.1,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::InvalidConfig("crf radius must be >= 1".into()));
        }
        if !(self.sigma_xy > 0.0 && self.sigma_int > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "crf bandwidths must be > 0, got sigma_xy={} sigma_int={}",
                self.sigma_xy, self.sigma_int
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy over labeled pixels. `labels` is `B x H x W`, with
/// `K` marking unlabeled pixels. Returns the loss and `dL/dy`.
pub fn partial_ce_with_grad(y: &BatchMaps, labels: &[u8]) -> Result<(f64, BatchMaps)> {
    let hw = y.pixels();
    check_label_len(y, labels)?;
    let k_total = y.channels;
    let mut labeled = 0usize;
    for &l in labels {
        let l = l as usize;
        if l > k_total {
            return Err(Error::LabelOutOfRange {
                value: l,
                num_classes: k_total,
            });
        }
        if l < k_total {
            labeled += 1;
        }
    }
    let mut grad = y.zeros_like();
    if labeled == 0 {
        return Ok((0.0, grad));
    }
    let n = labeled as f64;
    let mut sum = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l == k_total {
            continue;
        }
        let (b, p) = (i / hw, i % hw);
        let idx = y.index(b, l, p);
        let v = y.data[idx];
        sum -= v.max(LOG_EPS).ln();
        if v > LOG_EPS {
            grad.data[idx] = -1.0 / (n * v);
        }
    }
    Ok((sum / n, grad))
}

pub fn partial_ce(y: &BatchMaps, labels: &[u8]) -> Result<f64> {
    partial_ce_with_grad(y, labels).map(|(v, _)| v)
}

/// Mean of the two branch partial cross-entropies.
pub fn scribble_loss(labels: &[u8], y_cnn: &BatchMaps, y_trans: &BatchMaps) -> Result<f64> {
    Ok((partial_ce(y_cnn, labels)? + partial_ce(y_trans, labels)?) / 2.0)
}

/// Threshold-gated mixture `alpha * [y_c > t] y_c + (1 - alpha) * [y_t > t] y_t`.
pub fn mix_pseudo(y_cnn: &BatchMaps, y_trans: &BatchMaps, alpha: f64, t: f64) -> Result<BatchMaps> {
    y_cnn.ensure_same_shape(y_trans, "pseudo-label inputs")?;
    let mut out = y_cnn.zeros_like();
    for ((o, &c), &tr) in out.data.iter_mut().zip(&y_cnn.data).zip(&y_trans.data) {
        *o = mix_element(c, tr, alpha, t);
    }
    Ok(out)
}

#[inline]
pub fn mix_element(c: f64, tr: f64, alpha: f64, t: f64) -> f64 {
    let gc = if c > t { c } else { 0.0 };
    let gt = if tr > t { tr } else { 0.0 };
    alpha * gc + (1.0 - alpha) * gt
}

/// Pixels where a pseudo-label carries any mass (`B x H x W`).
pub fn supervised_pixels(y: &BatchMaps) -> Vec<bool> {
    let hw = y.pixels();
    let mut out = vec![false; y.batch * hw];
    for b in 0..y.batch {
        for p in 0..hw {
            out[b * hw + p] = (0..y.channels).any(|k| y.get(b, k, p) != 0.0);
        }
    }
    out
}

/// Soft Dice loss against hard labels, averaged over classes. Sums run over
/// the whole batch; pixels with `mask == false` are left out entirely.
pub fn dice_loss_with_grad(y: &BatchMaps, target: &[u8], mask: Option<&[bool]>) -> Result<(f64, BatchMaps)> {
    check_label_len(y, target)?;
    if let Some(m) = mask {
        if m.len() != target.len() {
            return Err(Error::ShapeMismatch {
                what: "dice mask",
                expected: format!("{}", target.len()),
                actual: format!("{}", m.len()),
            });
        }
    }
    let hw = y.pixels();
    let k_total = y.channels;
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    let (mut inter, mut pred, mut truth) = (vec![0.0; k_total], vec![0.0; k_total], vec![0.0; k_total]);
    for (i, &t) in target.iter().enumerate() {
        let t = t as usize;
        if t >= k_total {
            return Err(Error::LabelOutOfRange {
                value: t,
                num_classes: k_total,
            });
        }
        if !on(i) {
            continue;
        }
        let (b, p) = (i / hw, i % hw);
        for k in 0..k_total {
            pred[k] += y.get(b, k, p);
        }
        inter[t] += y.get(b, t, p);
        truth[t] += 1.0;
    }
    let kf = k_total as f64;
    let mut loss = 0.0;
    let mut num = vec![0.0; k_total];
    let mut den = vec![0.0; k_total];
    for k in 0..k_total {
        num[k] = 2.0 * inter[k] + DICE_SMOOTH;
        den[k] = pred[k] + truth[k] + DICE_SMOOTH;
        loss += 1.0 - num[k] / den[k];
    }
    let mut grad = y.zeros_like();
    for (i, &t) in target.iter().enumerate() {
        if !on(i) {
            continue;
        }
        let (b, p) = (i / hw, i % hw);
        for k in 0..k_total {
            let hit = if t as usize == k { 2.0 } else { 0.0 };
            let g = -(hit * den[k] - num[k]) / (den[k] * den[k]) / kf;
            let idx = grad.index(b, k, p);
            grad.data[idx] = g;
        }
    }
    Ok((loss / kf, grad))
}

pub fn dice_loss(y: &BatchMaps, target: &[u8], mask: Option<&[bool]>) -> Result<f64> {
    dice_loss_with_grad(y, target, mask).map(|(v, _)| v)
}

/// Mean Dice loss of both branches against `argmax(pseudo)`, ignoring
/// pixels where `pseudo` is all zero. `pseudo` is a constant target.
pub fn pseudo_loss(y_cnn: &BatchMaps, y_trans: &BatchMaps, pseudo: &BatchMaps) -> Result<f64> {
    pseudo_loss_with_grad(&[y_cnn, y_trans], pseudo).map(|(v, _)| v)
}

/// Pseudo-label Dice averaged over any number of branch outputs, with the
/// gradient for each branch. No gradient reaches `pseudo`.
pub fn pseudo_loss_with_grad(branches: &[&BatchMaps], pseudo: &BatchMaps) -> Result<(f64, Vec<BatchMaps>)> {
    for y in branches {
        y.ensure_same_shape(pseudo, "pseudo-label target")?;
    }
    let target = pseudo.argmax();
    let mask = supervised_pixels(pseudo);
    let n = branches.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(branches.len());
    for y in branches {
        let (v, mut g) = dice_loss_with_grad(y, &target, Some(&mask))?;
        total += v;
        g.data.iter_mut().for_each(|x| *x /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Pairwise smoothness penalty over a square window with a bilateral
/// similarity kernel. `intensity` is `B x H x W`.
///
/// `L = 1/(2N) * sum over ordered neighbour pairs (i, j), i != j, of
/// phi_ij * |Y_i - Y_j|^2`, with `N` the number of pixels in the batch,
/// so each unordered pair counts once per pixel of normalization.
pub fn gated_crf_with_grad(y: &BatchMaps, intensity: &[f32], cfg: &CrfConfig) -> Result<(f64, BatchMaps)> {
    cfg.validate()?;
    if intensity.len() != y.batch * y.pixels() {
        return Err(Error::ShapeMismatch {
            what: "crf intensity",
            expected: format!("{}", y.batch * y.pixels()),
            actual: format!("{}", intensity.len()),
        });
    }
    let (h, w, hw) = (y.height as isize, y.width as isize, y.pixels());
    let r = cfg.radius as isize;
    let inv_xy = 1.0 / (2.0 * cfg.sigma_xy * cfg.sigma_xy);
    let inv_int = 1.0 / (2.0 * cfg.sigma_int * cfg.sigma_int);
    // Half window: each unordered pair visited once.
    let offsets: Vec<(isize, isize)> = (0..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy > 0 || dx > 0)
        .collect();
    let mut sum = 0.0;
    let mut grad = y.zeros_like();
    for b in 0..y.batch {
        let img = &intensity[b * hw..(b + 1) * hw];
        for &(dy, dx) in &offsets {
            let spatial = ((dy * dy + dx * dx) as f64) * inv_xy;
            for yi in 0..h {
                let yj = yi + dy;
                if yj >= h {
                    continue;
                }
                for xi in 0..w {
                    let xj = xi + dx;
                    if xj < 0 || xj >= w {
                        continue;
                    }
                    let (i, j) = ((yi * w + xi) as usize, (yj * w + xj) as usize);
                    let di = (img[i] - img[j]) as f64;
                    let phi = libm::exp(-spatial - di * di * inv_int);
                    if phi == 0.0 {
                        continue;
                    }
                    for k in 0..y.channels {
                        let (a, c) = (y.index(b, k, i), y.index(b, k, j));
                        let d = y.data[a] - y.data[c];
                        sum += phi * d * d;
                        grad.data[a] += 2.0 * phi * d;
                        grad.data[c] -= 2.0 * phi * d;
                    }
                }
            }
        }
    }
    let pixels = y.batch * y.pixels();
    if pixels == 0 {
        return Ok((0.0, grad));
    }
    // `sum` runs over unordered pairs, i.e. half the ordered-pair sum.
    let scale = 1.0 / pixels as f64;
    grad.data.iter_mut().for_each(|g| *g *= scale);
    Ok((sum * scale, grad))
}

pub fn gated_crf(y: &BatchMaps, intensity: &[f32], cfg: &CrfConfig) -> Result<f64> {
    gated_crf_with_grad(y, intensity, cfg).map(|(v, _)| v)
}

/// Per-element binary cross-entropy mean over one branch; probabilities
/// are clamped to `[PROB_EPS, 1 - PROB_EPS]` (zero gradient when clamped).
pub fn bce_with_grad(p: &[f64], c: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.len() != c.len() {
        return Err(Error::ShapeMismatch {
            what: "class probabilities",
            expected: format!("{}", c.len()),
            actual: format!("{}", p.len()),
        });
    }
    check_class_targets(c)?;
    if p.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for ((g, &pi), &ci) in grad.iter_mut().zip(p).zip(c) {
        let q = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= ci * q.ln() + (1.0 - ci) * (1.0 - q).ln();
        if pi > PROB_EPS && pi < 1.0 - PROB_EPS {
            *g = (-ci / q + (1.0 - ci) / (1.0 - q)) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean of the two branch BCE losses on `B x K` probabilities.
pub fn class_loss(p_cnn: &[f64], p_trans: &[f64], c: &[f64]) -> Result<f64> {
    Ok((bce_with_grad(p_cnn, c)?.0 + bce_with_grad(p_trans, c)?.0) / 2.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(rename = "L_ss")]
    pub scribble: f64,
    #[serde(rename = "L_pl")]
    pub pseudo: f64,
    #[serde(rename = "L_crf")]
    pub crf: f64,
    #[serde(rename = "L_cls")]
    pub class: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("L_ss", self.scribble),
            ("L_pl", self.pseudo),
            ("L_crf", self.crf),
            ("L_cls", self.class),
        ]
    }
}

/// Weighted sum of the four parts. Fails on the first non-finite part.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (term, value) in parts.named() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value });
        }
    }
    Ok(w.scribble * parts.scribble + w.pseudo * parts.pseudo + w.crf * parts.crf + w.class * parts.class)
}

fn check_label_len(y: &BatchMaps, labels: &[u8]) -> Result<()> {
    let n = y.batch * y.pixels();
    if labels.len() == n {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what: "label map",
            expected: format!("{n}"),
            actual: format!("{}", labels.len()),
        })
    }
}

fn check_class_targets(c: &[f64]) -> Result<()> {
    match c.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&value) => Err(Error::InvalidClassTarget { value }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(k: usize, h: usize, w: usize, data: &[f64]) -> BatchMaps {
        BatchMaps::new(data.len() / (k * h * w), k, h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn partial_ce_single_pixel() {
        let y = maps(2, 1, 1, &[0.2, 0.8]);
        let v = partial_ce(&y, &[1]).unwrap();
        assert!((v - 0.8f64.ln().abs()).abs() < 1e-12);
        assert!((v - 0.2231).abs() < 1e-4);
    }

    #[test]
    fn partial_ce_empty_and_perfect() {
        let y = maps(2, 1, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(partial_ce(&y, &[2, 2]).unwrap(), 0.0);
        assert!(partial_ce(&y, &[1, 0]).unwrap().abs() < 1e-7);
        assert!(matches!(partial_ce(&y, &[3, 0]), Err(Error::LabelOutOfRange { value: 3, .. })));
    }

    #[test]
    fn scribble_loss_averages_branches() {
        // Two labeled pixels; cnn CE = 0.4, trans CE = 0.2.
        let (a, b) = (libm::exp(-0.4), libm::exp(-0.2));
        let yc = maps(2, 1, 2, &[a, a, 1.0 - a, 1.0 - a]);
        let yt = maps(2, 1, 2, &[b, b, 1.0 - b, 1.0 - b]);
        let v = scribble_loss(&[0, 0], &yc, &yt).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        assert_eq!(v, scribble_loss(&[0, 0], &yt, &yc).unwrap());
    }

    #[test]
    fn mix_pseudo_scalar_cases() {
        assert!((mix_element(0.8, 0.6, 0.25, 0.5) - 0.65).abs() < 1e-12);
        assert_eq!(mix_element(0.5, 0.3, 0.4, 0.5), 0.0);
        assert_eq!(mix_element(0.9, 0.7, 1.0, 0.5), 0.9);
    }

    #[test]
    fn dice_two_by_two() {
        // Class 1 predicted on the left column, target on the top row.
        let y = maps(2, 2, 2, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let t = [1, 1, 0, 0];
        let per_class = 1.0 - (2.0 + DICE_SMOOTH) / (4.0 + DICE_SMOOTH);
        assert!((dice_loss(&y, &t, None).unwrap() - per_class).abs() < 1e-12);
        assert!((per_class - 0.5).abs() < 1e-5);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let y = maps(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(dice_loss(&y, &[0, 1], None).unwrap() < 1e-4);
        assert!((dice_loss(&y, &[1, 0], None).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn pseudo_loss_fully_masked_is_zero() {
        let y = maps(2, 1, 2, &[0.3, 0.6, 0.7, 0.4]);
        let zero = y.zeros_like();
        assert_eq!(pseudo_loss(&y, &y, &zero).unwrap(), 0.0);
    }

    #[test]
    fn pseudo_loss_two_by_two_brute_force() {
        // Target class 1 on the top row; bottom-right pixel masked.
        let pseudo = maps(2, 2, 2, &[0.0, 0.0, 0.9, 0.0, 0.9, 0.8, 0.0, 0.0]);
        let yc = maps(2, 2, 2, &[0.2, 0.7, 0.6, 0.5, 0.8, 0.3, 0.4, 0.5]);
        let yt = maps(2, 2, 2, &[0.1, 0.1, 0.9, 0.3, 0.9, 0.9, 0.1, 0.7]);
        // Unmasked pixels 0,1,2 with targets 1,1,0.
        let brute = |y: &BatchMaps| {
            let d = |k: usize, idx: &[usize], hits: &[usize]| {
                let i: f64 = hits.iter().map(|&p| y.get(0, k, p)).sum();
                let p: f64 = idx.iter().map(|&p| y.get(0, k, p)).sum();
                1.0 - (2.0 * i + DICE_SMOOTH) / (p + hits.len() as f64 + DICE_SMOOTH)
            };
            (d(0, &[0, 1, 2], &[2]) + d(1, &[0, 1, 2], &[0, 1])) / 2.0
        };
        let expected = (brute(&yc) + brute(&yt)) / 2.0;
        assert!((pseudo_loss(&yc, &yt, &pseudo).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn crf_two_pixel_example() {
        let y = maps(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]);
        let cfg = CrfConfig {
            radius: 1,
            sigma_xy: f64::INFINITY,
            sigma_int: f64::INFINITY,
        };
        let v = gated_crf(&y, &[0.5, 0.5], &cfg).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crf_constant_maps_give_zero() {
        let y = maps(3, 4, 4, &[[0.2; 16], [0.5; 16], [0.3; 16]].concat());
        let img: Vec<f32> = (0..16).map(|i| (i % 3) as f32 / 2.0).collect();
        assert_eq!(gated_crf(&y, &img, &CrfConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn crf_non_decreasing_in_sigma_int_on_checkerboard() {
        let (h, w) = (6, 6);
        let img: Vec<f32> = (0..h * w).map(|i| ((i / w + i % w) % 2) as f32).collect();
        let p: Vec<f64> = (0..h * w).map(|i| if (i / w + i % w) % 2 == 0 { 0.9 } else { 0.2 }).collect();
        let data: Vec<f64> = p.iter().copied().chain(p.iter().map(|v| 1.0 - v)).collect();
        let y = maps(2, h, w, &data);
        let mut cfg = CrfConfig::default();
        let a = gated_crf(&y, &img, &cfg).unwrap();
        cfg.sigma_int *= 2.0;
        let b = gated_crf(&y, &img, &cfg).unwrap();
        assert!(b >= a && b > 0.0);
    }

    #[test]
    fn class_loss_cases() {
        let c = [1.0, 0.0, 1.0];
        assert!(class_loss(&c, &c, &c).unwrap() < 1e-6);
        let half = [0.5; 3];
        assert!((class_loss(&half, &half, &c).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        let a = [0.3, 0.6, 0.9];
        assert_eq!(class_loss(&a, &half, &c).unwrap(), class_loss(&half, &a, &c).unwrap());
        assert!(matches!(class_loss(&half, &half, &[0.5, 0.0, 1.0]), Err(Error::InvalidClassTarget { .. })));
    }

    #[test]
    fn total_loss_cases() {
        let ones = LossParts {
            scribble: 1.0,
            pseudo: 1.0,
            crf: 1.0,
            class: 1.0,
        };
        assert!((total_loss(&ones, &LossWeights::default()).unwrap() - 1.7).abs() < 1e-12);
        assert_eq!(total_loss(&LossParts::default(), &LossWeights::default()).unwrap(), 0.0);
        let zero = LossWeights {
            scribble: 0.0,
            pseudo: 0.0,
            crf: 0.0,
            class: 0.0,
        };
        assert_eq!(total_loss(&ones, &zero).unwrap(), 0.0);
        let bad = LossParts { crf: f64::NAN, ..ones };
        assert!(matches!(total_loss(&bad, &zero), Err(Error::NonFiniteLoss { term: "L_crf", .. })));
    }
}

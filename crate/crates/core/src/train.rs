//! One optimization step and one epoch of scribble-supervised training.
//!
//! A step runs, in order: encoder and heads, bank update on detached
//! pooled features, bank fusion, decoders, the mixing draw, the four
//! losses and one AdamW update. Per-sample tapes run in parallel; their
//! parameter gradients are summed in sample order.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, Tape, Var};
use crate::dataset::{augment, AugmentConfig, ClassVector, Image, ScribbleMask};
use crate::error::{Error, Result};
use crate::losses::{
    bce_with_grad, gated_crf_with_grad, mix_element, partial_ce_with_grad, pseudo_loss_with_grad, total_loss,
    CrfConfig, LossParts, LossWeights, PseudoLabelConfig,
};
use crate::maps::BatchMaps;
use crate::mie::{
    extract_batch_class_vectors, fusion_delta, update_bank, Branch, ClassMemoryBank, FusionReport, FusionRule,
    SampleFusion, UpdateReport,
};
use crate::model::{map_samples, map_samples_mut, BranchMode, BranchPair, DecodeOptions, Encoded, ModelConfig, ScribbleVc};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub pseudo: PseudoLabelConfig,
    pub crf: CrfConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Maintain and fuse the class memory bank.
    pub use_memory_bank: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 4,
            weights: LossWeights::default(),
            pseudo: PseudoLabelConfig::default(),
            crf: CrfConfig::default(),
            seed: 0,
            checkpoint_every: 50,
            grad_clip: Some(5.0),
            use_memory_bank: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("grad_clip must be > 0, got {c}")));
            }
        }
        if !(self.augment.noise_std >= 0.0 && self.augment.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("augment.noise_std must be >= 0".into()));
        }
        self.weights.validate()?;
        self.pseudo.validate()?;
        self.crf.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One training example. Class targets come from the scribble only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub scribble: ScribbleMask,
    pub classes: ClassVector,
}

/// Serializable position of a [`ChaCha8Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ScribbleVc,
    pub optimizer: AdamW,
    pub bank: ClassMemoryBank,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Stream of the training RNG; weight init uses its own generator.
const TRAIN_STREAM: u64 = 1;

impl TrainState {
    pub fn new(model_config: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ScribbleVc::new(model_config, cfg.seed)?;
        let optimizer = AdamW::new(cfg.optimizer(), &model.params);
        let bank = model.new_bank();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            model,
            optimizer,
            bank,
            epoch: 0,
            step: 0,
            rng,
        })
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub parts: LossParts,
    pub total: f64,
    pub alpha: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub bank_updates: BranchPair<UpdateReport>,
    pub fusion: BranchPair<FusionReport>,
}

/// Gradients of the objective with respect to the network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads {
    pub y: BranchPair<BatchMaps>,
    pub p: BranchPair<Vec<f64>>,
}

/// Network outputs of one batch, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutputs {
    pub y: BranchPair<BatchMaps>,
    pub p: BranchPair<Vec<f64>>,
}

/// Batch supervision in flat form.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    /// `B x H x W` scribble labels, `K` for unlabeled.
    pub labels: Vec<u8>,
    /// `B x K` class presence.
    pub classes: Vec<f64>,
    /// `B x H x W` image intensities.
    pub intensity: Vec<f32>,
}

impl BatchTargets {
    pub fn from_samples(samples: &[TrainSample]) -> Self {
        Self {
            labels: samples.iter().flat_map(|s| s.scribble.labels.iter().copied()).collect(),
            classes: samples.iter().flat_map(|s| s.classes.as_f64()).collect(),
            intensity: samples.iter().flat_map(|s| s.image.pixels.iter().copied()).collect(),
        }
    }
}

/// Mixing weight actually applied to the CNN output. Single-branch
/// models degenerate to the branch that exists.
pub fn effective_alpha(mode: BranchMode, alpha: f64) -> f64 {
    match mode {
        BranchMode::Dual => alpha,
        BranchMode::CnnOnly => 1.0,
        BranchMode::TransOnly => 0.0,
    }
}

/// Pseudo-label from whichever branches are present (absent ones count as zero).
pub fn pseudo_label(out: &BatchOutputs, alpha: f64, t: f64) -> Result<BatchMaps> {
    let reference = out.y.cnn.as_ref().or(out.y.trans.as_ref()).ok_or_else(|| {
        Error::InvalidArgument("no branch outputs".into())
    })?;
    if let (Some(c), Some(tr)) = (&out.y.cnn, &out.y.trans) {
        c.ensure_same_shape(tr, "branch outputs")?;
    }
    let mut y = reference.zeros_like();
    for (i, v) in y.data.iter_mut().enumerate() {
        let c = out.y.cnn.as_ref().map_or(0.0, |m| m.data[i]);
        let tr = out.y.trans.as_ref().map_or(0.0, |m| m.data[i]);
        *v = mix_element(c, tr, alpha, t);
    }
    Ok(y)
}

/// The full objective and its gradient with respect to the network outputs.
///
/// `alpha` is the mixing weight for the CNN output (already degenerate for
/// single-branch models). Branch terms are averaged over present branches.
/// The pseudo-label is a constant target for the Dice term; the CRF term is
/// differentiated through the mixture with the threshold masks held fixed.
pub fn objective(
    out: &BatchOutputs,
    targets: &BatchTargets,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<(LossParts, f64, OutputGrads)> {
    let present: Vec<Branch> = Branch::ALL.into_iter().filter(|&b| out.y.get(b).is_some()).collect();
    let nb = present.len() as f64;
    let w = cfg.weights;
    let t = cfg.pseudo.threshold;
    let mut parts = LossParts::default();
    let mut grads = OutputGrads {
        y: BranchPair::default(),
        p: BranchPair::default(),
    };

    for &b in &present {
        let y = out.y.get(b).unwrap();
        let (v, mut g) = partial_ce_with_grad(y, &targets.labels)?;
        parts.scribble += v / nb;
        g.data.iter_mut().for_each(|x| *x *= w.scribble / nb);
        grads.y.set(b, g);
    }

    let pseudo = pseudo_label(out, alpha, t)?;
    let ys: Vec<&BatchMaps> = present.iter().map(|&b| out.y.get(b).unwrap()).collect();
    let (v, gs) = pseudo_loss_with_grad(&ys, &pseudo)?;
    parts.pseudo = v;
    for (&b, g) in present.iter().zip(&gs) {
        add_scaled(grads.y.cnn_or_trans_mut(b), g, w.pseudo);
    }

    let (v, g_pseudo) = gated_crf_with_grad(&pseudo, &targets.intensity, &cfg.crf)?;
    parts.crf = v;
    for &b in &present {
        let y = out.y.get(b).unwrap();
        let factor = match b {
            Branch::Cnn => alpha,
            Branch::Trans => 1.0 - alpha,
        };
        let g = grads.y.cnn_or_trans_mut(b);
        for ((gi, &gy), &yi) in g.data.iter_mut().zip(&g_pseudo.data).zip(&y.data) {
            if yi > t {
                *gi += w.crf * factor * gy;
            }
        }
    }

    for &b in &present {
        let p = out.p.get(b).ok_or_else(|| Error::InvalidArgument(format!("missing {} class output", b.name())))?;
        let (v, mut g) = bce_with_grad(p, &targets.classes)?;
        parts.class += v / nb;
        g.iter_mut().for_each(|x| *x *= w.class / nb);
        grads.p.set(b, g);
    }

    let total = total_loss(&parts, &w)?;
    Ok((parts, total, grads))
}

impl BranchPair<BatchMaps> {
    fn cnn_or_trans_mut(&mut self, b: Branch) -> &mut BatchMaps {
        match b {
            Branch::Cnn => self.cnn.as_mut().unwrap(),
            Branch::Trans => self.trans.as_mut().unwrap(),
        }
    }
}

fn add_scaled(dst: &mut BatchMaps, src: &BatchMaps, s: f64) {
    for (d, v) in dst.data.iter_mut().zip(&src.data) {
        *d += s * v;
    }
}

/// Knobs for [`train_step_with`]; the defaults give the regular step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOptions {
    /// Use this mixing draw instead of sampling one.
    pub alpha: Option<f64>,
    /// Skip the bank update (fusion still reads the bank).
    pub freeze_bank: bool,
    /// Compute losses and gradients but leave parameters untouched.
    pub dry_run: bool,
}

/// Gradient and loss result of a step before the optimizer runs.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub report: StepReport,
    pub grads: ParamGrads,
}

pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[TrainSample]) -> Result<StepReport> {
    train_step_with(state, cfg, batch, StepOptions::default()).map(|g| g.report)
}

pub fn train_step_with(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[TrainSample],
    opts: StepOptions,
) -> Result<StepGradients> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mode = state.model.config.branches;
    let k = state.model.config.num_classes;
    for s in batch {
        if s.classes.num_classes() != k || s.scribble.num_classes != k {
            return Err(Error::ShapeMismatch {
                what: "sample classes",
                expected: format!("{k}"),
                actual: format!("{}", s.classes.num_classes()),
            });
        }
    }
    let model = &state.model;

    // (1)-(2) encoder and heads.
    let mut tapes: Vec<(Tape, Encoded)> = map_samples(batch, |s| {
        let mut tape = Tape::new(&model.params);
        let enc = model.encode_and_classify(&mut tape, &s.image)?;
        Ok((tape, enc))
    })?;
    let probs_of = |tape: &Tape, v: Option<&Var>| -> Option<Vec<f64>> {
        v.map(|&p| tape.value(p).data().iter().map(|&x| x as f64).collect())
    };
    let mut out = BatchOutputs {
        y: BranchPair::default(),
        p: BranchPair::default(),
    };
    for b in Branch::ALL {
        if mode.has(b) {
            let p: Vec<f64> = tapes.iter().flat_map(|(t, e)| probs_of(t, e.probs.get(b)).unwrap()).collect();
            out.p.set(b, p);
        }
    }

    // (3) bank update from detached, pre-fusion pooled features.
    let mut bank_updates = BranchPair::default();
    if cfg.use_memory_bank && !opts.freeze_bank {
        for b in Branch::ALL {
            if !mode.has(b) {
                continue;
            }
            let feats: Vec<Vec<f32>> = tapes
                .iter()
                .map(|(t, e)| model.pooled_features(t, &e.state, b).unwrap())
                .collect();
            let vecs = extract_batch_class_vectors(&feats, out.p.get(b).unwrap(), k)?;
            let report = update_bank(state.bank.branch_mut(b), &vecs, |v| model.head_probs(b, v));
            bank_updates.set(b, report);
        }
    }

    // (4)-(5) fusion and decoders.
    let bank = &state.bank;
    let use_bank = cfg.use_memory_bank;
    let decoded: Vec<(BranchPair<Var>, BranchPair<SampleFusion>)> = map_samples_mut(&mut tapes, |(tape, enc)| {
        let mut fused = BranchPair::default();
        let mut info = BranchPair::default();
        for b in Branch::ALL {
            let Some(&pv) = enc.probs.get(b) else { continue };
            let x = match b {
                Branch::Cnn => enc.state.cnn_bottleneck(),
                Branch::Trans => enc.state.trans_bottleneck(),
            }
            .unwrap();
            let (delta, fusion) = if use_bank {
                let probs: Vec<f64> = tape.value(pv).data().iter().map(|&x| x as f64).collect();
                fusion_delta(&probs, bank.branch(b), FusionRule::Train)
            } else {
                (None, SampleFusion::default())
            };
            fused.set(b, model.fuse_bottleneck(tape, x, delta.as_deref(), b));
            info.set(b, fusion);
        }
        let y = model.decode(tape, &enc.state, fused.cnn, fused.trans, DecodeOptions::default())?;
        Ok((y, info))
    })?;
    let (h, w) = (model.config.height, model.config.width);
    let mut fusion = BranchPair::default();
    for b in Branch::ALL {
        if !mode.has(b) {
            continue;
        }
        let maps: Vec<&[f32]> = tapes
            .iter()
            .zip(&decoded)
            .map(|((t, _), (y, _))| t.value(*y.get(b).unwrap()).data())
            .collect();
        out.y.set(b, BatchMaps::stack(&maps, k, h, w)?);
        fusion.set(
            b,
            FusionReport {
                samples: decoded.iter().map(|(_, f)| f.get(b).unwrap().clone()).collect(),
            },
        );
    }

    // (6)-(8) mixing draw and losses.
    let alpha = match opts.alpha {
        Some(a) => a,
        None => draw_alpha(&mut state.rng),
    };
    let alpha_eff = effective_alpha(mode, alpha);
    let targets = BatchTargets::from_samples(batch);
    let (parts, total, out_grads) = objective(&out, &targets, alpha_eff, cfg)?;

    let per_sample = map_samples(&tapes.iter().zip(&decoded).enumerate().collect::<Vec<_>>(), |(i, ((tape, enc), (y, _)))| {
        let mut seeds: Vec<(Var, Tensor)> = Vec::new();
        for b in Branch::ALL {
            if let (Some(&yv), Some(g)) = (y.get(b), out_grads.y.get(b)) {
                let data = g.sample(*i).iter().map(|&v| v as f32).collect();
                seeds.push((yv, Tensor::new(&[k, h, w], data)));
            }
            if let (Some(&pv), Some(g)) = (enc.probs.get(b), out_grads.p.get(b)) {
                let data = g[i * k..(i + 1) * k].iter().map(|&v| v as f32).collect();
                seeds.push((pv, Tensor::new(&[1, k], data)));
            }
        }
        let refs: Vec<(Var, &Tensor)> = seeds.iter().map(|(v, t)| (*v, t)).collect();
        let mut g = ParamGrads::zeros_like(tape.params());
        tape.backward(&refs, &mut g);
        Ok(g)
    })?;
    drop(decoded);
    drop(tapes);
    let mut grads = ParamGrads::zeros_like(&state.model.params);
    for g in &per_sample {
        grads.merge(g);
    }
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "gradient",
            value: grad_norm,
        });
    }
    if !opts.dry_run {
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        state.optimizer.update(&mut state.model.params, &grads);
        state.step += 1;
    }
    Ok(StepGradients {
        report: StepReport {
            parts,
            total,
            alpha,
            grad_norm,
            bank_updates,
            fusion,
        },
        grads,
    })
}

/// Draws the per-batch mixing weight from the open interval (0, 1).
fn draw_alpha(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let a: f64 = rng.random();
        if a > 0.0 {
            return a;
        }
    }
}

/// Mean loss values over the steps of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    #[serde(flatten)]
    pub parts: LossParts,
    #[serde(rename = "L_total")]
    pub total: f64,
    pub steps: usize,
}

/// One pass over `data`: seeded shuffle, per-sample augmentation, and
/// one step per batch (the last batch may be smaller).
pub fn run_epoch(state: &mut TrainState, cfg: &TrainConfig, data: &[TrainSample]) -> Result<EpochLosses> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mut acc = EpochLosses::default();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<TrainSample> = chunk
            .iter()
            .map(|&i| {
                let s = &data[i];
                let seed = state.rng.next_u64();
                let (image, scribble) = augment(&s.image, &s.scribble, seed, &cfg.augment)?;
                Ok(TrainSample {
                    image,
                    scribble,
                    classes: s.classes.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let r = train_step(state, cfg, &batch)?;
        acc.parts.scribble += r.parts.scribble;
        acc.parts.pseudo += r.parts.pseudo;
        acc.parts.crf += r.parts.crf;
        acc.parts.class += r.parts.class;
        acc.total += r.total;
        acc.steps += 1;
    }
    if acc.steps > 0 {
        let n = acc.steps as f64;
        acc.parts.scribble /= n;
        acc.parts.pseudo /= n;
        acc.parts.crf /= n;
        acc.parts.class /= n;
        acc.total /= n;
    }
    state.epoch += 1;
    Ok(acc)
}

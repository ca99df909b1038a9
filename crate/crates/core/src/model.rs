//! Dual-branch hybrid segmentation network.
//!
//! The encoder interleaves a CNN stack and a transformer stack stage by
//! stage: the transformer stage consumes the current CNN map together
//! with the current tokens, and the next CNN stage consumes the fresh
//! tokens. Two classification heads sit on the bottleneck, and two
//! decoders (CNN with encoder skips, transformer without) upsample back to
//! full resolution.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, ParamId, ParamStore, Tape, Var};
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::maps::BatchMaps;
use crate::mie::{fusion_delta, Branch, ClassMemoryBank, FusionReport, FusionRule};
use crate::nn::{normal, Conv2d, Init, ConvTranspose2x2, LayerNorm, Linear, TransformerBlock};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Dual,
    CnnOnly,
    TransOnly,
}

impl BranchMode {
    pub fn has(self, b: Branch) -> bool {
        matches!(
            (self, b),
            (BranchMode::Dual, _) | (BranchMode::CnnOnly, Branch::Cnn) | (BranchMode::TransOnly, Branch::Trans)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub num_stages: usize,
    pub base_channels: usize,
    /// Width of one attention head; heads per stage = stage width / head_dim.
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Init scale of the learned positional embeddings (0 disables them).
    pub pos_embed_std: f32,
    pub branches: BranchMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            height: 64,
            width: 64,
            num_stages: 4,
            base_channels: 16,
            head_dim: 16,
            mlp_ratio: 2,
            pos_embed_std: 0.02,
            branches: BranchMode::Dual,
        }
    }
}

impl ModelConfig {
    /// Channel (and token) width of stage `s` (0-based).
    pub fn channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Bottleneck feature dimension of either branch.
    pub fn feature_dim(&self) -> usize {
        self.channels(self.num_stages - 1)
    }

    pub fn heads(&self, s: usize) -> usize {
        (self.channels(s) / self.head_dim).max(1)
    }

    /// Spatial grid of stage `s`.
    pub fn grid(&self, s: usize) -> (usize, usize) {
        (self.height >> (s + 1), self.width >> (s + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.num_stages < 2 {
            return fail(format!("num_stages must be >= 2, got {}", self.num_stages));
        }
        if !(2..=255).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        let div = 1usize << self.num_stages;
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) || self.height == 0 || self.width == 0 {
            return fail(format!(
                "input {}x{} not divisible by 2^{} = {div}",
                self.height, self.width, self.num_stages
            ));
        }
        if self.base_channels == 0 || self.head_dim == 0 || self.mlp_ratio == 0 {
            return fail("base_channels, head_dim and mlp_ratio must be positive".into());
        }
        for s in 0..self.num_stages {
            let c = self.channels(s);
            if !c.is_multiple_of(self.heads(s)) {
                return fail(format!("stage {s} width {c} not divisible into heads"));
            }
        }
        if !(self.pos_embed_std >= 0.0 && self.pos_embed_std.is_finite()) {
            return fail("pos_embed_std must be a finite non-negative number".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct CnnEncoder {
    stem: [Conv2d; 2],
    down: Vec<Conv2d>,
    /// 1x1 projection of stage-(s+1) tokens into the CNN map, per stage.
    from_tokens: Vec<Option<Conv2d>>,
    refine: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
struct TransEncoder {
    patch: Conv2d,
    pos: Vec<ParamId>,
    /// 1x1 patch embedding of the stage-s CNN map into tokens.
    from_cnn: Vec<Option<Conv2d>>,
    merge: Vec<Conv2d>,
    blocks: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
struct Decoder {
    ups: Vec<ConvTranspose2x2>,
    convs: Vec<Conv2d>,
    out: Conv2d,
}

#[derive(Clone, Debug)]
struct TransHead {
    norm: LayerNorm,
    fc: Linear,
}

/// Encoder outputs of one sample, as tape handles.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// The `[1, H, W]` input image.
    pub input: Var,
    /// `x_cnn,1..S`, each `[C_s, H_s, W_s]`; empty without a CNN branch.
    pub cnn: Vec<Var>,
    /// `x_trans,1..S`, each `[N_s, D_s]`; empty without a transformer branch.
    pub trans: Vec<Var>,
}

impl EncoderState {
    pub fn cnn_bottleneck(&self) -> Option<Var> {
        self.cnn.last().copied()
    }

    pub fn trans_bottleneck(&self) -> Option<Var> {
        self.trans.last().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchPair<T> {
    pub cnn: Option<T>,
    pub trans: Option<T>,
}

impl<T> Default for BranchPair<T> {
    fn default() -> Self {
        Self {
            cnn: None,
            trans: None,
        }
    }
}

impl<T> BranchPair<T> {
    pub fn get(&self, b: Branch) -> Option<&T> {
        match b {
            Branch::Cnn => self.cnn.as_ref(),
            Branch::Trans => self.trans.as_ref(),
        }
    }

    pub fn set(&mut self, b: Branch, v: T) {
        match b {
            Branch::Cnn => self.cnn = Some(v),
            Branch::Trans => self.trans = Some(v),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Replace every CNN encoder skip with zeros.
    pub zero_skips: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batched network output. Absent branches are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPrediction {
    /// `B x K x H x W` per-pixel softmax probabilities.
    pub y_cnn: Option<BatchMaps>,
    pub y_trans: Option<BatchMaps>,
    /// `B x K` per-class sigmoid probabilities.
    pub p_cnn: Option<Vec<f64>>,
    pub p_trans: Option<Vec<f64>>,
    pub fusion_cnn: FusionReport,
    pub fusion_trans: FusionReport,
}

impl DualPrediction {
    pub fn y(&self, b: Branch) -> Option<&BatchMaps> {
        match b {
            Branch::Cnn => self.y_cnn.as_ref(),
            Branch::Trans => self.y_trans.as_ref(),
        }
    }
}

/// Per-sample encoder + heads result used between the encode and decode halves.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub state: EncoderState,
    pub logits: BranchPair<Var>,
    pub probs: BranchPair<Var>,
}

#[derive(Clone, Debug)]
pub struct ScribbleVc {
    pub config: ModelConfig,
    pub params: ParamStore,
    cnn: Option<CnnEncoder>,
    trans: Option<TransEncoder>,
    cnn_head: Option<Conv2d>,
    trans_head: Option<TransHead>,
    cnn_decoder: Option<Decoder>,
    trans_decoder: Option<Decoder>,
}

impl ScribbleVc {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let st = &mut store;
        let s_total = config.num_stages;
        let k = config.num_classes;
        let c = |s: usize| config.channels(s);
        let dual = config.branches == BranchMode::Dual;

        let cnn = config.branches.has(Branch::Cnn).then(|| CnnEncoder {
            stem: [
                Conv2d::new(st, "encoder.cnn.stem.0", 1, c(0), 3, 2, 1, rng),
                Conv2d::new(st, "encoder.cnn.stem.1", c(0), c(0), 3, 1, 1, rng),
            ],
            down: (0..s_total - 1)
                .map(|s| Conv2d::new(st, &format!("encoder.cnn.stage{}.down", s + 1), c(s), c(s + 1), 3, 2, 1, rng))
                .collect(),
            from_tokens: (0..s_total - 1)
                .map(|s| {
                    dual.then(|| {
                        Conv2d::with_init(st, &format!("encoder.cnn.stage{}.from_tokens", s + 1), c(s + 1), c(s + 1), 1, 1, 0, Init::Lecun, rng)
                    })
                })
                .collect(),
            refine: (0..s_total - 1)
                .map(|s| Conv2d::new(st, &format!("encoder.cnn.stage{}.refine", s + 1), c(s + 1), c(s + 1), 3, 1, 1, rng))
                .collect(),
        });

        let trans = config.branches.has(Branch::Trans).then(|| {
            let patch = Conv2d::with_init(st, "encoder.trans.patch_embed", 1, c(0), 2, 2, 0, Init::Lecun, rng);
            let pos = (0..s_total)
                .map(|s| {
                    let (h, w) = config.grid(s);
                    st.add(
                        &format!("encoder.trans.stage{s}.pos_embed"),
                        normal(rng, &[h * w, c(s)], config.pos_embed_std),
                    )
                })
                .collect();
            let from_cnn = (0..s_total - 1)
                .map(|s| {
                    dual.then(|| Conv2d::with_init(st, &format!("encoder.trans.stage{}.from_cnn", s + 1), c(s), c(s), 1, 1, 0, Init::Lecun, rng))
                })
                .collect();
            let merge = (0..s_total - 1)
                .map(|s| Conv2d::with_init(st, &format!("encoder.trans.stage{}.merge", s + 1), c(s), c(s + 1), 2, 2, 0, Init::Lecun, rng))
                .collect();
            let blocks = (0..s_total - 1)
                .map(|s| {
                    TransformerBlock::new(
                        st,
                        &format!("encoder.trans.stage{}.block", s + 1),
                        c(s + 1),
                        config.heads(s + 1),
                        config.mlp_ratio,
                        rng,
                    )
                })
                .collect();
            TransEncoder {
                patch,
                pos,
                from_cnn,
                merge,
                blocks,
            }
        });

        let d = config.feature_dim();
        let cnn_head = config
            .branches
            .has(Branch::Cnn)
            .then(|| Conv2d::with_init(st, "head.cnn.conv", d, k, 1, 1, 0, Init::Zero, rng));
        let trans_head = config.branches.has(Branch::Trans).then(|| TransHead {
            norm: LayerNorm::new(st, "head.trans.norm", d),
            fc: Linear::new(st, "head.trans.fc", d, k, rng),
        });

        let build_decoder = |st: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, skips: bool| {
            let mut ups = Vec::new();
            let mut convs = Vec::new();
            for s in (0..s_total - 1).rev() {
                ups.push(ConvTranspose2x2::new(st, &format!("decoder.{name}.up{s}"), c(s + 1), c(s), rng));
                let cin = if skips { 2 * c(s) } else { c(s) };
                convs.push(Conv2d::new(st, &format!("decoder.{name}.conv{s}"), cin, c(s), 3, 1, 1, rng));
            }
            ups.push(ConvTranspose2x2::new(st, &format!("decoder.{name}.up_full"), c(0), c(0), rng));
            let cin = if skips { c(0) + 1 } else { c(0) };
            convs.push(Conv2d::new(st, &format!("decoder.{name}.conv_full"), cin, c(0), 3, 1, 1, rng));
            let out = Conv2d::with_init(st, &format!("decoder.{name}.out"), c(0), k, 1, 1, 0, Init::Zero, rng);
            Decoder { ups, convs, out }
        };
        let cnn_decoder = config
            .branches
            .has(Branch::Cnn)
            .then(|| build_decoder(st, rng, "cnn", true));
        let trans_decoder = config
            .branches
            .has(Branch::Trans)
            .then(|| build_decoder(st, rng, "trans", false));

        Ok(Self {
            config,
            params: store,
            cnn,
            trans,
            cnn_head,
            trans_head,
            cnn_decoder,
            trans_decoder,
        })
    }

    /// Empty class memory bank sized for this model.
    pub fn new_bank(&self) -> ClassMemoryBank {
        let d = self.config.feature_dim();
        ClassMemoryBank::new(self.config.num_classes, d, d)
    }

    pub fn has_branch(&self, b: Branch) -> bool {
        self.config.branches.has(b)
    }

    /// Names of the CNN encoder convolution weights, stage by stage
    /// (stem first).
    pub fn cnn_encoder_weights(&self) -> Vec<ParamId> {
        let Some(cnn) = &self.cnn else { return Vec::new() };
        let mut out = vec![cnn.stem[0].weight, cnn.stem[1].weight];
        for (d, r) in cnn.down.iter().zip(&cnn.refine) {
            out.push(d.weight);
            out.push(r.weight);
        }
        out
    }

    pub fn image_tensor(&self, img: &Image) -> Result<Tensor> {
        if img.height != self.config.height || img.width != self.config.width {
            return Err(Error::ShapeMismatch {
                what: "model input",
                expected: format!("{}x{}", self.config.height, self.config.width),
                actual: format!("{}x{}", img.height, img.width),
            });
        }
        Ok(Tensor::new(&[1, img.height, img.width], img.pixels.clone()))
    }

    /// Transformer stage `s`: `x_trans,s+1 = Trans_s(x_cnn,s, x_trans,s)`.
    pub fn trans_stage(&self, tape: &mut Tape, s: usize, x_cnn: Option<Var>, x_trans: Var) -> Var {
        let enc = self.trans.as_ref().expect("model has no transformer branch");
        let (h, w) = self.config.grid(s);
        let mut tokens = x_trans;
        if let (Some(x), Some(proj)) = (x_cnn, &enc.from_cnn[s]) {
            let embedded = proj.forward(tape, x);
            let embedded = tape.map_to_tokens(embedded);
            tokens = tape.add(tokens, embedded);
        }
        let map = tape.tokens_to_map(tokens, h, w);
        let merged = enc.merge[s].forward(tape, map);
        let merged = tape.map_to_tokens(merged);
        let pos = tape.param(enc.pos[s + 1]);
        let merged = tape.add(merged, pos);
        enc.blocks[s].forward(tape, merged)
    }

    /// CNN stage `s`: `x_cnn,s+1 = Conv_s(x_cnn,s, x_trans,s+1)`.
    pub fn conv_stage(&self, tape: &mut Tape, s: usize, x_cnn: Var, x_trans_next: Option<Var>) -> Var {
        let enc = self.cnn.as_ref().expect("model has no CNN branch");
        let h = enc.down[s].forward(tape, x_cnn);
        let mut h = tape.relu(h);
        if let (Some(t), Some(proj)) = (x_trans_next, &enc.from_tokens[s]) {
            let (gh, gw) = self.config.grid(s + 1);
            let map = tape.tokens_to_map(t, gh, gw);
            let injected = proj.forward(tape, map);
            h = tape.add(h, injected);
        }
        let h = enc.refine[s].forward(tape, h);
        tape.relu(h)
    }

    /// Interleaved hybrid encoder for one image.
    pub fn encode(&self, tape: &mut Tape, img: &Image) -> Result<EncoderState> {
        let x = tape.constant(self.image_tensor(img)?);
        let mut state = EncoderState {
            input: x,
            cnn: Vec::new(),
            trans: Vec::new(),
        };
        if let Some(enc) = &self.cnn {
            let h = enc.stem[0].forward(tape, x);
            let h = tape.relu(h);
            let h = enc.stem[1].forward(tape, h);
            state.cnn.push(tape.relu(h));
        }
        if let Some(enc) = &self.trans {
            let t = enc.patch.forward(tape, x);
            let t = tape.map_to_tokens(t);
            let pos = tape.param(enc.pos[0]);
            state.trans.push(tape.add(t, pos));
        }
        for s in 0..self.config.num_stages - 1 {
            let next_trans = self
                .trans
                .is_some()
                .then(|| self.trans_stage(tape, s, state.cnn.get(s).copied(), state.trans[s]));
            if let Some(t) = next_trans {
                state.trans.push(t);
            }
            if self.cnn.is_some() {
                let c = self.conv_stage(tape, s, state.cnn[s], next_trans);
                state.cnn.push(c);
            }
        }
        Ok(state)
    }

    /// Classification logits (`[1, K]` each) from the bottleneck.
    pub fn classify(&self, tape: &mut Tape, state: &EncoderState) -> BranchPair<Var> {
        let mut out = BranchPair::default();
        if let (Some(head), Some(x)) = (&self.cnn_head, state.cnn_bottleneck()) {
            let m = head.forward(tape, x);
            out.cnn = Some(tape.mean_spatial(m));
        }
        if let (Some(head), Some(t)) = (&self.trans_head, state.trans_bottleneck()) {
            let pooled = tape.mean_rows(t);
            let n = head.norm.forward(tape, pooled);
            out.trans = Some(head.fc.forward(tape, n));
        }
        out
    }

    /// Encoder plus both heads, with sigmoid class probabilities.
    pub fn encode_and_classify(&self, tape: &mut Tape, img: &Image) -> Result<Encoded> {
        let state = self.encode(tape, img)?;
        let logits = self.classify(tape, &state);
        let mut probs = BranchPair::default();
        for b in Branch::ALL {
            if let Some(&l) = logits.get(b) {
                probs.set(b, tape.sigmoid(l));
            }
        }
        Ok(Encoded {
            state,
            logits,
            probs,
        })
    }

    /// Global-average pooled bottleneck vector of a branch.
    pub fn pooled_features(&self, tape: &Tape, state: &EncoderState, b: Branch) -> Option<Vec<f32>> {
        match b {
            Branch::Cnn => state.cnn_bottleneck().map(|v| {
                let t = tape.value(v);
                let hw = t.dim(1) * t.dim(2);
                t.data()
                    .chunks(hw)
                    .map(|c| c.iter().sum::<f32>() / hw as f32)
                    .collect()
            }),
            Branch::Trans => state.trans_bottleneck().map(|v| {
                let t = tape.value(v);
                let (n, d) = (t.dim(0), t.dim(1));
                let mut out = vec![0.0f32; d];
                for row in t.data().chunks(d) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += *x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n as f32);
                out
            }),
        }
    }

    /// Class probabilities of a branch head applied to one pooled vector.
    ///
    /// The CNN head is a 1x1 convolution followed by spatial averaging,
    /// which on a pooled vector reduces to the same affine map.
    pub fn head_probs(&self, b: Branch, v: &[f32]) -> Vec<f64> {
        let logits: Vec<f32> = match b {
            Branch::Cnn => {
                let head = self.cnn_head.as_ref().expect("no CNN head");
                let w = self.params.get(head.weight);
                let bias = self.params.get(head.bias).data();
                let d = w.dim(1);
                w.data()
                    .chunks(d)
                    .zip(bias)
                    .map(|(row, bb)| row.iter().zip(v).map(|(a, x)| a * x).sum::<f32>() + bb)
                    .collect()
            }
            Branch::Trans => {
                let head = self.trans_head.as_ref().expect("no transformer head");
                let n = head.norm.apply(&self.params, v);
                head.fc.apply(&self.params, &n)
            }
        };
        logits.into_iter().map(|l| sigmoid(l) as f64).collect()
    }

    /// Adds a constant class signal to a bottleneck (broadcast over every
    /// spatial position / token). `None` leaves the bottleneck untouched.
    pub fn fuse_bottleneck(&self, tape: &mut Tape, x: Var, delta: Option<&[f32]>, b: Branch) -> Var {
        let Some(delta) = delta else { return x };
        let shape = tape.value(x).shape().to_vec();
        let data = match b {
            Branch::Cnn => {
                let hw = shape[1] * shape[2];
                delta.iter().flat_map(|&d| core::iter::repeat_n(d, hw)).collect()
            }
            Branch::Trans => {
                let n = shape[0];
                let mut v = Vec::with_capacity(n * delta.len());
                for _ in 0..n {
                    v.extend_from_slice(delta);
                }
                v
            }
        };
        let c = tape.constant(Tensor::new(&shape, data));
        tape.add(x, c)
    }

    fn run_decoder(&self, tape: &mut Tape, dec: &Decoder, start: Var, skips: Option<&[Var]>, zero_skips: bool) -> Var {
        let stages = self.config.num_stages;
        let mut d = start;
        for (i, (up, conv)) in dec.ups.iter().zip(&dec.convs).enumerate() {
            let u = up.forward(tape, d);
            let u = tape.relu(u);
            let u = match skips {
                Some(sk) => {
                    let skip = sk[stages - 1 - i];
                    let skip = if zero_skips {
                        let shape = tape.value(skip).shape().to_vec();
                        tape.constant(Tensor::zeros(&shape))
                    } else {
                        skip
                    };
                    tape.concat_channels(u, skip)
                }
                None => u,
            };
            let h = conv.forward(tape, u);
            d = tape.relu(h);
        }
        let logits = dec.out.forward(tape, d);
        tape.softmax_channels(logits)
    }

    /// Runs both decoders from (possibly enhanced) bottleneck features.
    /// Returns per-pixel probability maps `[K, H, W]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        state: &EncoderState,
        fused_cnn: Option<Var>,
        fused_trans: Option<Var>,
        opts: DecodeOptions,
    ) -> Result<BranchPair<Var>> {
        let mut out = BranchPair::default();
        if let Some(dec) = &self.cnn_decoder {
            let raw = state.cnn_bottleneck().expect("CNN state");
            let fused = fused_cnn.unwrap_or(raw);
            check_same_shape(tape, raw, fused, "fused CNN features")?;
            // Full-resolution stage takes the input image as its skip.
            let mut skips = Vec::with_capacity(self.config.num_stages);
            skips.push(state.input);
            skips.extend_from_slice(&state.cnn[..self.config.num_stages - 1]);
            out.cnn = Some(self.run_decoder(tape, dec, fused, Some(&skips), opts.zero_skips));
        }
        if let Some(dec) = &self.trans_decoder {
            let raw = state.trans_bottleneck().expect("transformer state");
            let fused = fused_trans.unwrap_or(raw);
            check_same_shape(tape, raw, fused, "fused transformer tokens")?;
            let (h, w) = self.config.grid(self.config.num_stages - 1);
            let map = tape.tokens_to_map(fused, h, w);
            out.trans = Some(self.run_decoder(tape, dec, map, None, false));
        }
        Ok(out)
    }

    /// Full batched forward pass without gradients.
    ///
    /// `Mode::Train` applies the veto fusion rule, `Mode::Eval` the
    /// filtering rule; neither touches the bank.
    pub fn forward(&self, images: &[Image], bank: &ClassMemoryBank, mode: Mode) -> Result<DualPrediction> {
        self.forward_with(images, bank, mode, DecodeOptions::default())
    }

    pub fn forward_with(
        &self,
        images: &[Image],
        bank: &ClassMemoryBank,
        mode: Mode,
        opts: DecodeOptions,
    ) -> Result<DualPrediction> {
        let rule = match mode {
            Mode::Train => FusionRule::Train,
            Mode::Eval => FusionRule::Infer,
        };
        let k = self.config.num_classes;
        let (h, w) = (self.config.height, self.config.width);
        let run = |img: &Image| -> Result<SampleOutput> {
            let mut tape = Tape::new(&self.params);
            let enc = self.encode_and_classify(&mut tape, img)?;
            let mut out = SampleOutput::default();
            let mut fused = BranchPair::default();
            for b in Branch::ALL {
                let Some(&p) = enc.probs.get(b) else { continue };
                let probs: Vec<f64> = tape.value(p).data().iter().map(|&v| v as f64).collect();
                let (delta, info) = fusion_delta(&probs, bank.branch(b), rule);
                let x = match b {
                    Branch::Cnn => enc.state.cnn_bottleneck(),
                    Branch::Trans => enc.state.trans_bottleneck(),
                }
                .unwrap();
                fused.set(b, self.fuse_bottleneck(&mut tape, x, delta.as_deref(), b));
                out.probs.set(b, probs);
                out.fusion.set(b, info);
            }
            let y = self.decode(&mut tape, &enc.state, fused.cnn, fused.trans, opts)?;
            for b in Branch::ALL {
                if let Some(&v) = y.get(b) {
                    out.maps.set(b, tape.value(v).data().to_vec());
                }
            }
            Ok(out)
        };
        let outputs = map_samples(images, run)?;
        let mut pred = DualPrediction {
            y_cnn: None,
            y_trans: None,
            p_cnn: None,
            p_trans: None,
            fusion_cnn: FusionReport::default(),
            fusion_trans: FusionReport::default(),
        };
        for b in Branch::ALL {
            if !self.has_branch(b) {
                continue;
            }
            let maps: Vec<&[f32]> = outputs.iter().map(|o| o.maps.get(b).unwrap().as_slice()).collect();
            let stacked = BatchMaps::stack(&maps, k, h, w)?;
            let probs: Vec<f64> = outputs.iter().flat_map(|o| o.probs.get(b).unwrap().iter().copied()).collect();
            let report = FusionReport {
                samples: outputs.iter().map(|o| o.fusion.get(b).unwrap().clone()).collect(),
            };
            match b {
                Branch::Cnn => {
                    pred.y_cnn = Some(stacked);
                    pred.p_cnn = Some(probs);
                    pred.fusion_cnn = report;
                }
                Branch::Trans => {
                    pred.y_trans = Some(stacked);
                    pred.p_trans = Some(probs);
                    pred.fusion_trans = report;
                }
            }
        }
        Ok(pred)
    }
}

#[derive(Default)]
struct SampleOutput {
    maps: BranchPair<Vec<f32>>,
    probs: BranchPair<Vec<f64>>,
    fusion: BranchPair<crate::mie::SampleFusion>,
}

fn check_same_shape(tape: &Tape, expected: Var, actual: Var, what: &'static str) -> Result<()> {
    let (e, a) = (tape.value(expected).shape(), tape.value(actual).shape());
    if e == a {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected: format!("{e:?}"),
            actual: format!("{a:?}"),
        })
    }
}

/// Maps a fallible per-sample function over a batch, in parallel when the
/// `parallel` feature is on. Output order always matches input order.
pub(crate) fn map_samples<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Mutable counterpart of [`map_samples`].
pub(crate) fn map_samples_mut<T, U, F>(items: &mut [T], f: F) -> Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(&mut T) -> Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter_mut().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().map(f).collect()
    }
}

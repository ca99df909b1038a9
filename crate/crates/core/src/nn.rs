//! Parameterized layers built on the tape.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

/// Weight initialization scheme for [`Conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Variance `2 / fan_in`; for layers followed by ReLU.
    He,
    /// Variance `1 / fan_in`; for linear projections.
    Lecun,
    Zero,
}

impl Conv2d {
    /// He-uniform initialized square convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_init(store, name, in_channels, out_channels, kernel, stride, pad, Init::He, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let fan_in = (in_channels * kernel * kernel) as f32;
        let w = match init {
            Init::He => uniform(rng, &shape, libm::sqrtf(6.0 / fan_in)),
            Init::Lecun => uniform(rng, &shape, libm::sqrtf(3.0 / fan_in)),
            Init::Zero => Tensor::zeros(&shape),
        };
        let weight = store.add(&format!("{name}.weight"), w);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// 2x2, stride-2 transposed convolution (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        // Each output pixel sees exactly one input pixel per channel.
        let bound = libm::sqrtf(6.0 / in_channels as f32);
        let weight = store.add(
            &format!("{name}.weight"),
            uniform(rng, &[in_channels, out_channels, 2, 2], bound),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv_transpose2x2(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = libm::sqrtf(6.0 / (in_dim + out_dim) as f32);
        let weight = store.add(
            &format!("{name}.weight"),
            uniform(rng, &[out_dim, in_dim], bound),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }

    /// Applies the layer to a plain vector outside any tape.
    pub fn apply(&self, store: &ParamStore, x: &[f32]) -> Vec<f32> {
        let w = store.get(self.weight);
        let b = store.get(self.bias).data();
        let din = w.dim(1);
        w.data()
            .chunks(din)
            .zip(b)
            .map(|(row, bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>() + bias)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f32]) -> Vec<f32> {
        let mut t = Tape::new(store);
        let xv = t.constant(Tensor::new(&[1, x.len()], x.to_vec()));
        let y = self.forward(&mut t, xv);
        t.value(y).data().to_vec()
    }
}

/// Pre-norm transformer encoder block: multi-head self-attention and a
/// GELU MLP, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.norm1.forward(tape, x);
        let a = self.attention(tape, h);
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, x);
        let h = self.fc1.forward(tape, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h);
        tape.add(x, h)
    }

    fn attention(&self, tape: &mut Tape, x: Var) -> Var {
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / libm::sqrtf(head_dim as f32);
        let qkv = self.qkv.forward(tape, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.slice_cols(qkv, h * head_dim, head_dim);
            let k = tape.slice_cols(qkv, self.dim + h * head_dim, head_dim);
            let v = tape.slice_cols(qkv, 2 * self.dim + h * head_dim, head_dim);
            let scores = tape.matmul(q, k, true);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, v, false));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        self.proj.forward(tape, merged)
    }
}

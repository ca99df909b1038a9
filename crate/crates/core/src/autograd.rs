//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Tape`] records every operation of one forward pass together with
//! its value. [`Tape::backward`] seeds gradients on any set of output
//! nodes, walks the record in reverse and accumulates parameter
//! gradients into a [`ParamGrads`]. Parameters themselves live in a
//! [`ParamStore`] that the tape only borrows, so any number of tapes can
//! run against the same weights.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{col2im, gemm, im2col, transpose, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Named parameter tensors. Names are hierarchical (`encoder.cnn.stem.0.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            self.by_name(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: &[f32]) {
        for (a, b) in self.grads[id.0].data_mut().iter_mut().zip(g) {
            *a += *b;
        }
    }

    /// Adds `other` into `self`, tensor by tensor.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .grads
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        libm::sqrt(sq)
    }

    pub fn scale(&mut self, factor: f32) {
        for t in &mut self.grads {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Const,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
        // None for 1x1/stride-1 convolutions, whose patch matrix is `x` itself.
        cols: Option<Vec<f32>>,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SoftmaxRows(Var),
    SoftmaxChannels(Var),
    MapToTokens(Var),
    TokensToMap(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatChannels(Var, Var),
    MeanRows(Var),
    MeanSpatial(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Gradients of tracked input leaves after a backward pass.
#[derive(Debug, Default)]
pub struct LeafGrads {
    grads: Vec<Option<Tensor>>,
}

impl LeafGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter node without value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked and reported by `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution. `x: [C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d expects a [C, H, W] input, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d expects [O, C, k, k] weights");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kernel: ws[2],
            stride,
            pad,
        };
        let out_channels = ws[0];
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let pointwise = geom.kernel == 1 && stride == 1 && pad == 0;
        let cols = if pointwise {
            None
        } else {
            Some(im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![0.0f32; out_channels * ho * wo];
        {
            let patches = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            gemm(
                out_channels,
                geom.col_rows(),
                ho * wo,
                self.value(w).data(),
                false,
                patches,
                false,
                &mut out,
                0.0,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
                for v in chunk {
                    *v += bias[o];
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
                cols,
            },
            Tensor::new(&[out_channels, ho, wo], out),
            needs,
        )
    }

    /// Transposed convolution with a 2x2 kernel and stride 2.
    /// `x: [C, H, W]`, `w: [C, O, 2, 2]`, result `[O, 2H, 2W]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws, [xs[0], ws[1], 2, 2], "conv_transpose2x2 weight shape");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let o = ws[1];
        let hw = h * wd;
        let mut cols = vec![0.0f32; o * 4 * hw];
        gemm(
            o * 4,
            c,
            hw,
            self.value(w).data(),
            true,
            self.value(x).data(),
            false,
            &mut cols,
            0.0,
        );
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![0.0f32; o * oh * ow];
        let bias = b.map(|b| self.value(b).data());
        for oc in 0..o {
            let bv = bias.map_or(0.0, |b| b[oc]);
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &cols[(oc * 4 + a * 2 + bb) * hw..(oc * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        for j in 0..wd {
                            out[(oc * oh + 2 * i + a) * ow + 2 * j + bb] = row[i * wd + j] + bv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Op::ConvTranspose2x2 { x, w, b },
            Tensor::new(&[o, oh, ow], out),
            needs,
        )
    }

    /// Affine map on rows. `x: [N, Din]`, `w: [Dout, Din]`, result `[N, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2, "linear expects [N, D] input, got {xs:?}");
        assert_eq!(ws[1], xs[1], "linear input width mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * dout];
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += *bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Op::Linear { x, w, b }, Tensor::new(&[n, dout], out), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), out, needs)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|v| v * s);
        let needs = self.needs(a);
        self.push(Op::Scale(a, s), out, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(Op::Relu(a), out, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + libm::tanhf(u))
        });
        let needs = self.needs(a);
        self.push(Op::Gelu(a), out, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), out, needs)
    }

    /// Layer normalization over the last axis of an `[N, D]` input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f32 = 1e-5;
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2);
        let (n, d) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; n * d];
        let mut rstd = vec![0.0f32; n];
        let mut out = vec![0.0f32; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / libm::sqrtf(var + EPS);
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + bt[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Tensor::new(&[n, d], out),
            needs,
        )
    }

    /// `a: [m, k]` times `b: [k, n]` (or `b: [n, k]` when `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let as_ = self.value(a).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let (m, k) = (as_[0], as_[1]);
        let n = if trans_b {
            assert_eq!(bs[1], k, "matmul inner dimension mismatch");
            bs[0]
        } else {
            assert_eq!(bs[0], k, "matmul inner dimension mismatch");
            bs[1]
        };
        let mut out = vec![0.0f32; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b, trans_b }, Tensor::new(&[m, n], out), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        let n = *s.last().unwrap();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a), out, needs)
    }

    /// Per-pixel softmax over the channel axis of a `[K, H, W]` map.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        let (k, hw) = (s[0], s[1] * s[2]);
        let x = self.value(a).data();
        let mut out = vec![0.0f32; k * hw];
        let mut buf = vec![0.0f32; k];
        for p in 0..hw {
            for c in 0..k {
                buf[c] = x[c * hw + p];
            }
            softmax_in_place(&mut buf);
            for c in 0..k {
                out[c * hw + p] = buf[c];
            }
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxChannels(a), Tensor::new(&s, out), needs)
    }

    /// `[C, H, W]` feature map to `[H*W, C]` tokens.
    pub fn map_to_tokens(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let out = transpose(self.value(a).data(), c, hw);
        let needs = self.needs(a);
        self.push(Op::MapToTokens(a), Tensor::new(&[hw, c], out), needs)
    }

    /// `[H*W, C]` tokens to a `[C, H, W]` feature map.
    pub fn tokens_to_map(&mut self, a: Var, height: usize, width: usize) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s[0], height * width, "token count does not match grid");
        let c = s[1];
        let out = transpose(self.value(a).data(), s[0], c);
        let needs = self.needs(a);
        self.push(
            Op::TokensToMap(a),
            Tensor::new(&[c, height, width], out),
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, d) = (s[0], s[1]);
        assert!(start + len <= d);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let needs = self.needs(x);
        self.push(Op::SliceCols { x, start }, Tensor::new(&[n, len], out), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dim(1)).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(&[n, total], out),
            needs,
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa[1..], sb[1..], "concat_channels spatial mismatch");
        let mut out = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Op::ConcatChannels(a, b),
            Tensor::new(&[sa[0] + sb[0], sa[1], sa[2]], out),
            needs,
        )
    }

    /// Mean over rows: `[N, D] -> [1, D]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0f32; d];
        for row in self.value(a).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        for o in &mut out {
            *o /= n as f32;
        }
        let needs = self.needs(a);
        self.push(Op::MeanRows(a), Tensor::new(&[1, d], out), needs)
    }

    /// Global average pool: `[C, H, W] -> [1, C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let out: Vec<f32> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f32>() / hw as f32)
            .collect();
        let needs = self.needs(a);
        self.push(Op::MeanSpatial(a), Tensor::new(&[1, c], out), needs)
    }

    /// Runs reverse-mode differentiation from the given output seeds.
    ///
    /// Parameter gradients are added into `param_grads`; gradients of
    /// [`Tape::input`] leaves are returned.
    pub fn backward(&self, seeds: &[(Var, &Tensor)], param_grads: &mut ParamGrads) -> LeafGrads {
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                self.value(*v).shape(),
                g.shape(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut grads, *v, g.data());
        }
        let mut leaves = LeafGrads {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let out_shape = self.value(Var(idx)).shape();
            match &node.op {
                Op::Const => {}
                Op::Input => {
                    leaves.grads[idx] = Some(Tensor::new(out_shape, g));
                }
                Op::Param(id) => param_grads.accumulate(*id, &g),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    out_channels,
                    cols,
                } => {
                    let npix = geom.out_height() * geom.out_width();
                    let rows = geom.col_rows();
                    let patches = cols.as_deref().unwrap_or_else(|| self.value(*x).data());
                    if self.needs(*w) {
                        let mut dw = vec![0.0f32; out_channels * rows];
                        gemm(*out_channels, npix, rows, &g, false, patches, true, &mut dw, 0.0);
                        accumulate(&mut grads, *w, &dw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let db: Vec<f32> = g.chunks(npix).map(|c| c.iter().sum()).collect();
                        accumulate(&mut grads, b, &db);
                    }
                    if self.needs(*x) {
                        let mut dcols = vec![0.0f32; rows * npix];
                        gemm(
                            rows,
                            *out_channels,
                            npix,
                            self.value(*w).data(),
                            true,
                            &g,
                            false,
                            &mut dcols,
                            0.0,
                        );
                        if cols.is_some() {
                            let dx = col2im(&dcols, geom);
                            accumulate(&mut grads, *x, &dx);
                        } else {
                            accumulate(&mut grads, *x, &dcols);
                        }
                    }
                }
                Op::ConvTranspose2x2 { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (c, h, wd) = (xs[0], xs[1], xs[2]);
                    let o = self.value(*w).dim(1);
                    let hw = h * wd;
                    let (oh, ow) = (2 * h, 2 * wd);
                    let mut dcols = vec![0.0f32; o * 4 * hw];
                    for oc in 0..o {
                        for a in 0..2 {
                            for bb in 0..2 {
                                let row = &mut dcols
                                    [(oc * 4 + a * 2 + bb) * hw..(oc * 4 + a * 2 + bb + 1) * hw];
                                for i in 0..h {
                                    for j in 0..wd {
                                        row[i * wd + j] = g[(oc * oh + 2 * i + a) * ow + 2 * j + bb];
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0f32; c * o * 4];
                        gemm(c, hw, o * 4, self.value(*x).data(), false, &dcols, true, &mut dw, 0.0);
                        accumulate(&mut grads, *w, &dw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let db: Vec<f32> = g.chunks(oh * ow).map(|c| c.iter().sum()).collect();
                        accumulate(&mut grads, b, &db);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0f32; c * hw];
                        gemm(c, o * 4, hw, self.value(*w).data(), false, &dcols, false, &mut dx, 0.0);
                        accumulate(&mut grads, *x, &dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = (self.value(*x).dim(0), self.value(*x).dim(1));
                    let dout = self.value(*w).dim(0);
                    if self.needs(*w) {
                        let mut dw = vec![0.0f32; dout * din];
                        gemm(dout, n, din, &g, true, self.value(*x).data(), false, &mut dw, 0.0);
                        accumulate(&mut grads, *w, &dw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut db = vec![0.0f32; dout];
                        for row in g.chunks(dout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += *v;
                            }
                        }
                        accumulate(&mut grads, b, &db);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0f32; n * din];
                        gemm(n, dout, din, &g, false, self.value(*w).data(), false, &mut dx, 0.0);
                        accumulate(&mut grads, *x, &dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::Scale(a, s) => {
                    let d: Vec<f32> = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Relu(a) => {
                    let y = self.value(Var(idx)).data();
                    let d: Vec<f32> = g
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    let d: Vec<f32> = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &x)| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = libm::tanhf(u);
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx)).data();
                    let d: Vec<f32> = g.iter().zip(y).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = self.value(*gamma).len();
                    let n = g.len() / d;
                    if self.needs(*gamma) {
                        let mut dg = vec![0.0f32; d];
                        for r in 0..n {
                            for c in 0..d {
                                dg[c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                        accumulate(&mut grads, *gamma, &dg);
                    }
                    if self.needs(*beta) {
                        let mut db = vec![0.0f32; d];
                        for row in g.chunks(d) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += *v;
                            }
                        }
                        accumulate(&mut grads, *beta, &db);
                    }
                    if self.needs(*x) {
                        let gm = self.value(*gamma).data();
                        let mut dx = vec![0.0f32; n * d];
                        for r in 0..n {
                            let mut mean_dxh = 0.0f32;
                            let mut mean_dxh_xh = 0.0f32;
                            for c in 0..d {
                                let dxh = g[r * d + c] * gm[c];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xhat[r * d + c];
                            }
                            mean_dxh /= d as f32;
                            mean_dxh_xh /= d as f32;
                            for c in 0..d {
                                let dxh = g[r * d + c] * gm[c];
                                dx[r * d + c] =
                                    rstd[r] * (dxh - mean_dxh - xhat[r * d + c] * mean_dxh_xh);
                            }
                        }
                        accumulate(&mut grads, *x, &dx);
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = (self.value(*a).dim(0), self.value(*a).dim(1));
                    let n = out_shape[1];
                    if self.needs(*a) {
                        let mut da = vec![0.0f32; m * k];
                        // da = g * op(b)^T
                        gemm(m, n, k, &g, false, self.value(*b).data(), !trans_b, &mut da, 0.0);
                        accumulate(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0f32; k * n];
                        if *trans_b {
                            gemm(n, m, k, &g, true, self.value(*a).data(), false, &mut db, 0.0);
                        } else {
                            gemm(k, m, n, self.value(*a).data(), true, &g, false, &mut db, 0.0);
                        }
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let n = *out_shape.last().unwrap();
                    let y = self.value(Var(idx)).data();
                    let mut d = vec![0.0f32; g.len()];
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            drow[i] = yrow[i] * (grow[i] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &d);
                }
                Op::SoftmaxChannels(a) => {
                    let (k, hw) = (out_shape[0], out_shape[1] * out_shape[2]);
                    let y = self.value(Var(idx)).data();
                    let mut d = vec![0.0f32; g.len()];
                    for p in 0..hw {
                        let mut dot = 0.0f32;
                        for c in 0..k {
                            dot += g[c * hw + p] * y[c * hw + p];
                        }
                        for c in 0..k {
                            d[c * hw + p] = y[c * hw + p] * (g[c * hw + p] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &d);
                }
                Op::MapToTokens(a) => {
                    let (hw, c) = (out_shape[0], out_shape[1]);
                    let d = transpose(&g, hw, c);
                    accumulate(&mut grads, *a, &d);
                }
                Op::TokensToMap(a) => {
                    let c = out_shape[0];
                    let hw = out_shape[1] * out_shape[2];
                    let d = transpose(&g, c, hw);
                    accumulate(&mut grads, *a, &d);
                }
                Op::SliceCols { x, start } => {
                    let (n, d) = (self.value(*x).dim(0), self.value(*x).dim(1));
                    let len = out_shape[1];
                    let mut dx = vec![0.0f32; n * d];
                    for r in 0..n {
                        dx[r * d + start..r * d + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let (n, total) = (out_shape[0], out_shape[1]);
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).dim(1);
                        if self.needs(p) {
                            let mut dp = vec![0.0f32; n * w];
                            for r in 0..n {
                                dp[r * w..(r + 1) * w]
                                    .copy_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            accumulate(&mut grads, p, &dp);
                        }
                        off += w;
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let na = self.value(*a).len();
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g[..na]);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g[na..]);
                    }
                }
                Op::MeanRows(a) => {
                    let (n, d) = (self.value(*a).dim(0), self.value(*a).dim(1));
                    let mut dx = vec![0.0f32; n * d];
                    for row in dx.chunks_mut(d) {
                        for (v, gv) in row.iter_mut().zip(&g) {
                            *v = gv / n as f32;
                        }
                    }
                    accumulate(&mut grads, *a, &dx);
                }
                Op::MeanSpatial(a) => {
                    let s = self.value(*a).shape();
                    let hw = s[1] * s[2];
                    let mut dx = vec![0.0f32; s[0] * hw];
                    for (c, chunk) in dx.chunks_mut(hw).enumerate() {
                        let v = g[c] / hw as f32;
                        chunk.iter_mut().for_each(|x| *x = v);
                    }
                    accumulate(&mut grads, *a, &dx);
                }
            }
        }
        leaves
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

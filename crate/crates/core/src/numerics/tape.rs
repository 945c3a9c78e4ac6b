//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] borrows a [`ParamStore`], records every operation of one forward
//! pass together with its output value, and replays the records in reverse
//! in [`Tape::backward`].

use std::collections::HashMap;

use super::kernels::{self, Conv2dGeom};
use super::{GradMap, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Largest representable sigmoid output below 1 and smallest above 0; the
/// gates must stay strictly inside (0, 1).
pub const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;
pub const SIGMOID_MIN: f64 = f64::MIN_POSITIVE;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(usize),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    Depthwise { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    Upsample2(Var),
    AvgPool2(Var),
    ConcatChannels(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ChannelMean(Var),
    ChannelMax { x: Var, argmax: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: GradMap,
}

impl Gradients {
    /// Gradient with respect to `v`, zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.node_grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn params(&self) -> &GradMap {
        &self.params
    }

    pub fn into_params(self) -> GradMap {
        self.params
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Differentiable leaf that is not a parameter; its gradient is read
    /// back through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for a named parameter. Repeated lookups return the same handle.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let value = self.store.by_id(id).value.clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        self.push(t, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`, used by the complementary gate.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// Adds a length-C bias to every row of an N×C matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, c) = tx.dims2()?;
        if tb.numel() != c {
            return Err(dim_err("add_row_bias", tx, tb));
        }
        let bias = tb.data();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2()?;
        let (k2, m) = tb.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = kernels::matmul(ta.data(), tb.data(), n, k, m);
        let t = Tensor::new([n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for a: N×K and b: M×K.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2()?;
        let (m, k2) = tb.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul_nt", ta, tb));
        }
        let out = kernels::matmul_nt(ta.data(), tb.data(), n, k, m);
        let t = Tensor::new([n, m], out)?;
        Ok(self.push(t, Op::MatMulNT(a, b)))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} invalid for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = tx.clone();
        kernels::softmax_strided(out.data_mut(), outer, len, inner);
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid_scalar);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()));
        self.push(t, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::Mean(x))
    }

    /// Row-wise layer normalization of an N×C matrix with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (_, c) = tx.dims2()?;
        if tg.numel() != c || tb.numel() != c {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let (xhat, rstd) = kernels::normalize_rows(tx.data(), c, eps);
        let (g, b) = (tg.data(), tb.data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Zero-padded cross-correlation of an H×W×Cin image with a
    /// kh×kw×Cin×Cout kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = Conv2dGeom::new(tx, tw, stride, pad, false)?;
        if let Some(b) = b {
            if self.value(b).numel() != geom.cout {
                return Err(dim_err("conv2d bias", tw, self.value(b)));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(tx.data(), tw.data(), bias, &geom);
        let t = Tensor::new([geom.oh, geom.ow, geom.cout], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Zero-padded depthwise convolution with a kh×kw×C kernel, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = Conv2dGeom::new(tx, tw, 1, pad, true)?;
        if let Some(b) = b {
            if self.value(b).numel() != geom.cout {
                return Err(dim_err("depthwise bias", tw, self.value(b)));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::depthwise_forward(tx.data(), tw.data(), bias, &geom);
        let t = Tensor::new([geom.oh, geom.ow, geom.cout], out)?;
        Ok(self.push(t, Op::Depthwise { x, w, b, geom }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let t = kernels::upsample2(self.value(x))?;
        Ok(self.push(t, Op::Upsample2(x)))
    }

    /// 2×2 average pooling; extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = kernels::avg_pool2(self.value(x))?;
        Ok(self.push(t, Op::AvgPool2(x)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_channels(&tensors)?;
        Ok(self.push(t, Op::ConcatChannels(parts.to_vec())))
    }

    /// Columns `start..start+len` of an N×C matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.dims2()?;
        if start + len > c {
            return Err(Error::Shape(format!("column slice {start}..{} of width {c}", start + len)));
        }
        let mut out = Vec::with_capacity(n * len);
        for row in tx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new([n, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut widths = Vec::with_capacity(parts.len());
        let n = self.value(parts[0]).dims2()?.0;
        for &p in parts {
            let (pn, pc) = self.value(p).dims2()?;
            if pn != n {
                return Err(dim_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new([n, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Per-pixel mean over channels: H×W×C → H×W×1.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let t = kernels::channel_mean(self.value(x))?;
        Ok(self.push(t, Op::ChannelMean(x)))
    }

    /// Per-pixel max over channels (subgradient routed to the first argmax).
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (h, w, c) = tx.dims3()?;
        let mut argmax = Vec::with_capacity(h * w);
        let mut out = Vec::with_capacity(h * w);
        for px in tx.data().chunks(c) {
            let mut best = 0;
            for (j, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(px[best]);
        }
        let t = Tensor::new([h, w, 1], out)?;
        Ok(self.push(t, Op::ChannelMax { x, argmax }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        let mut params = GradMap::zeros_like(self.store);
        for (&pid, &var) in &self.param_vars {
            if !self.store.by_id(pid).requires_grad {
                continue;
            }
            if let Some(g) = &grads[var.0] {
                params.grads[pid].copy_from_slice(g);
            }
        }
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Reshape(x) => acc(grads, self, *x, |g| add_into(g, gy)),
            Op::Add(a, b) => {
                acc(grads, self, *a, |g| add_into(g, gy));
                acc(grads, self, *b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(grads, self, *a, |g| add_into(g, gy));
                acc(grads, self, *b, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, self, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * vb[k];
                    }
                });
                acc(grads, self, *b, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * va[k];
                    }
                });
            }
            Op::Affine(x, s) => acc(grads, self, *x, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += s * d)),
            Op::AddRowBias(x, b) => {
                acc(grads, self, *x, |g| add_into(g, gy));
                let c = self.value(*b).numel();
                acc(grads, self, *b, |g| {
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                acc(grads, self, *a, |g| add_into(g, &kernels::matmul_nt(gy, tb.data(), n, m, k)));
                acc(grads, self, *b, |g| add_into(g, &kernels::matmul_tn(ta.data(), gy, n, k, m)));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                acc(grads, self, *a, |g| add_into(g, &kernels::matmul(gy, tb.data(), n, m, k)));
                acc(grads, self, *b, |g| add_into(g, &kernels::matmul_tn(gy, ta.data(), n, m, k)));
            }
            Op::Softmax { x, outer, len, inner } => acc(grads, self, *x, |g| {
                kernels::softmax_backward(y, gy, g, *outer, *len, *inner)
            }),
            Op::Sigmoid(x) => acc(grads, self, *x, |g| {
                for k in 0..g.len() {
                    g[k] += gy[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Tanh(x) => acc(grads, self, *x, |g| {
                for k in 0..g.len() {
                    g[k] += gy[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(grads, self, *x, |g| {
                    for k in 0..g.len() {
                        let v = xv[k];
                        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                        g[k] += gy[k] * d;
                    }
                })
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(grads, self, *x, |g| {
                    for k in 0..g.len() {
                        let s = if xv[k] > 0.0 {
                            1.0
                        } else if xv[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[k] += gy[k] * s;
                    }
                })
            }
            Op::Sum(x) => acc(grads, self, *x, |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(grads, self, *x, |g| g.iter_mut().for_each(|v| *v += gy[0] / n))
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let c = gv.len();
                acc(grads, self, *x, |g| kernels::layer_norm_backward_input(xhat, rstd, gv, gy, g, c));
                acc(grads, self, *gain, |g| {
                    for (row_gy, row_xh) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += row_gy[j] * row_xh[j];
                        }
                    }
                });
                acc(grads, self, *bias, |g| {
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(grads, self, *x, |g| kernels::conv2d_backward_input(gy, wv, g, geom));
                acc(grads, self, *w, |g| kernels::conv2d_backward_weight(gy, xv, g, geom));
                if let Some(b) = b {
                    acc(grads, self, *b, |g| {
                        for px in gy.chunks(geom.cout) {
                            add_into(g, px);
                        }
                    });
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(grads, self, *x, |g| kernels::depthwise_backward_input(gy, wv, g, geom));
                acc(grads, self, *w, |g| kernels::depthwise_backward_weight(gy, xv, g, geom));
                if let Some(b) = b {
                    acc(grads, self, *b, |g| {
                        for px in gy.chunks(geom.cout) {
                            add_into(g, px);
                        }
                    });
                }
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape().to_vec();
                acc(grads, self, *x, |g| kernels::upsample2_backward(gy, g, s[0], s[1], s[2]));
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                acc(grads, self, *x, |g| kernels::avg_pool2_backward(gy, g, s[0], s[1], s[2]));
            }
            Op::ConcatChannels(parts) => {
                let total = node.value.shape()[2];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[2];
                    acc(grads, self, p, |g| {
                        for (gp, src) in g.chunks_mut(pc).zip(gy.chunks(total)) {
                            add_into(gp, &src[offset..offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                acc(grads, self, *x, |g| {
                    for (grow, drow) in g.chunks_mut(c).zip(gy.chunks(len)) {
                        add_into(&mut grow[*start..*start + len], drow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    acc(grads, self, p, |g| {
                        for (gp, src) in g.chunks_mut(pc).zip(gy.chunks(total)) {
                            add_into(gp, &src[offset..offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ChannelMean(x) => {
                let c = self.value(*x).shape()[2];
                acc(grads, self, *x, |g| {
                    for (px, &d) in g.chunks_mut(c).zip(gy) {
                        px.iter_mut().for_each(|v| *v += d / c as f64);
                    }
                });
            }
            Op::ChannelMax { x, argmax } => {
                let c = self.value(*x).shape()[2];
                acc(grads, self, *x, |g| {
                    for (p, (&j, &d)) in argmax.iter().zip(gy).enumerate() {
                        g[p * c + j] += d;
                    }
                });
            }
        }
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (a, b) in g.iter_mut().zip(d) {
        *a += b;
    }
}

/// Runs `f` on the gradient buffer of `v`, allocating it on first use.
/// Constants never receive gradient.
fn acc(grads: &mut [Option<Vec<f64>>], tape: &Tape<'_>, v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &tape.nodes[v.0];
    if matches!(node.op, Op::Constant) {
        return;
    }
    if let Op::Param(id) = node.op {
        if !tape.store.by_id(id).requires_grad {
            return;
        }
    }
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(g);
}

/// Sigmoid clamped to the open interval (0, 1).
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MIN, SIGMOID_MAX)
}

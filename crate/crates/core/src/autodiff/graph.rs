//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operator appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into each node that
//! (transitively) depends on a gradient-requiring leaf.

use rayon::prelude::*;

use super::conv::{col2im, im2col, Conv2dParams, ConvTranspose2dParams, Geometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running statistics of a batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

const BCE_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geometry,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    UpsampleNearest2x {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        training: bool,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Bce {
        pred: Var,
        target: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    Pad {
        x: Var,
        rows: PadSpec,
        cols: PadSpec,
    },
}

/// Border handling for [`Graph::pad2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Wrap around (cylinder topology).
    Circular,
    /// Mirror without repeating the edge sample.
    Reflect,
}

/// Padding along one spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadSpec {
    pub before: usize,
    pub after: usize,
    pub mode: PadMode,
}

impl PadSpec {
    pub const fn new(before: usize, after: usize, mode: PadMode) -> Self {
        Self { before, after, mode }
    }

    pub const fn none() -> Self {
        Self::new(0, 0, PadMode::Zero)
    }

    /// Source index of padded position `i` on an axis of length `n`.
    fn source(&self, i: usize, n: usize) -> Option<usize> {
        let j = i as isize - self.before as isize;
        let n = n as isize;
        if (0..n).contains(&j) {
            return Some(j as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Circular => Some(j.rem_euclid(n) as usize),
            PadMode::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let period = 2 * (n - 1);
                let m = j.rem_euclid(period);
                Some(if m < n { m } else { period - m } as usize)
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4()?;
        let (co, ci, kh, kw) = wv.dims4()?;
        if ci != c {
            return Err(Error::shape(format!(
                "conv2d: input {:?} has {c} channels but weight {:?} expects {ci}",
                xv.shape(),
                wv.shape()
            )));
        }
        if let Some(b) = b {
            check_bias(self.value(b), co, "conv2d")?;
        }
        let geom = Geometry::new(c, h, wd, kh, kw, p).map_err(|e| {
            Error::shape(format!("conv2d: input {:?}, weight {:?}: {e}", xv.shape(), wv.shape()))
        })?;
        let plane = geom.col_cols();
        let ckk = geom.col_rows();
        let xs = xv.data();
        let ws = wv.data();
        let mut out = vec![T::zero(); n * co * plane];
        out.par_chunks_mut(co * plane).enumerate().for_each(|(i, o)| {
            let xi = &xs[i * c * h * wd..(i + 1) * c * h * wd];
            if geom.is_pointwise() {
                T::gemm(co, ckk, plane, T::one(), ws, ckk as isize, 1, xi, plane as isize, 1, T::zero(), o, plane as isize, 1);
            } else {
                let mut cols = vec![T::zero(); ckk * plane];
                im2col(xi, &geom, &mut cols);
                T::gemm(co, ckk, plane, T::one(), ws, ckk as isize, 1, &cols, plane as isize, 1, T::zero(), o, plane as isize, 1);
            }
        });
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, co, plane);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, co, geom.oh, geom.ow], out)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Fractionally-strided convolution; `w` is `c_in x c_out x kh x kw`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        p: ConvTranspose2dParams,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4()?;
        let (ci, co, kh, kw) = wv.dims4()?;
        if ci != c {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {:?} has {c} channels but weight {:?} expects {ci}",
                xv.shape(),
                wv.shape()
            )));
        }
        if let Some(b) = b {
            check_bias(self.value(b), co, "conv_transpose2d")?;
        }
        if p.output_padding >= p.stride.max(p.dilation) {
            return Err(Error::shape("conv_transpose2d: output_padding must be smaller than stride or dilation"));
        }
        let (Some(oh), Some(ow)) = (p.output_size(h, kh), p.output_size(wd, kw)) else {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {:?} with weight {:?} and {p:?} gives an empty output",
                xv.shape(),
                wv.shape()
            )));
        };
        let geom = Geometry::new(co, oh, ow, kh, kw, Conv2dParams::new(p.stride, p.padding, p.dilation))?;
        debug_assert_eq!((geom.oh, geom.ow), (h, wd));
        let pin = h * wd;
        let ckk = geom.col_rows();
        let xs = xv.data();
        let ws = wv.data();
        let mut out = vec![T::zero(); n * co * oh * ow];
        out.par_chunks_mut(co * oh * ow).enumerate().for_each(|(i, o)| {
            let xi = &xs[i * c * pin..(i + 1) * c * pin];
            let mut cols = vec![T::zero(); ckk * pin];
            T::gemm(ckk, c, pin, T::one(), ws, 1, ckk as isize, xi, pin as isize, 1, T::zero(), &mut cols, pin as isize, 1);
            col2im(&cols, &geom, o);
        });
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, co, oh * ow);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        Ok(self.push(value, rg, Op::ConvTranspose2d { x, w, b, geom }))
    }

    /// Max pooling with floor semantics; ties go to the first element in row-major order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(Error::shape(format!(
                "max_pool2d: kernel {kernel} stride {stride} on input {:?}",
                xv.shape()
            )));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xs = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::MaxPool2d { x, argmax }))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let xs = xv.data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, rg, Op::UpsampleNearest2x { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, rg, Op::Sigmoid { x })
    }

    /// Per-channel standardisation followed by an affine map. In training mode the
    /// batch statistics are used and folded into `stats`; otherwise `stats` are used.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        training: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        check_bias(self.value(gamma), c, "batch_norm2d gamma")?;
        check_bias(self.value(beta), c, "batch_norm2d beta")?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batch_norm2d: running statistics have the wrong channel count"));
        }
        let plane = h * w;
        let m = n * plane;
        let xs = xv.data();
        let eps: T = lit(stats.eps);
        let mut invstd = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        if training {
            let mf = T::of_usize(m);
            let momentum: T = lit(stats.momentum);
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    s += xs[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied().sum::<T>();
                }
                let mu = s / mf;
                let mut ss = T::zero();
                for i in 0..n {
                    for &v in &xs[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                        ss += (v - mu) * (v - mu);
                    }
                }
                let var = ss / mf;
                mean[ch] = mu;
                invstd[ch] = T::one() / (var + eps).sqrt();
                let unbiased = if m > 1 { ss / T::of_usize(m - 1) } else { var };
                stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mu;
                stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
            }
        } else {
            for ch in 0..c {
                mean[ch] = stats.mean[ch];
                invstd[ch] = T::one() / (stats.var[ch] + eps).sqrt();
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for ((o, xh), &v) in out[range.clone()].iter_mut().zip(&mut xhat[range.clone()]).zip(&xs[range]) {
                    *xh = (v - mean[ch]) * invstd[ch];
                    *o = g[ch] * *xh + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                training,
            },
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = av.dims4()?;
        let (nb, cb, hb, wb) = bv.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                av.shape(),
                bv.shape()
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bv.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(value, rg, Op::Concat { a, b }))
    }

    /// Spatial window `[top, top + height) x [left, left + width)`.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(Error::shape(format!(
                "crop2d: window {height}x{width} at ({top},{left}) exceeds {:?}",
                xv.shape()
            )));
        }
        let xs = xv.data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for plane in 0..n * c {
            for r in top..top + height {
                let row = plane * h * w + r * w;
                out.extend_from_slice(&xs[row + left..row + left + width]);
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, height, width], out)?;
        Ok(self.push(value, rg, Op::Crop { x, top, left }))
    }

    /// Mean binary cross entropy; predictions are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same_shape(pred, target, "bce_loss")?;
        let lo: T = lit(BCE_CLAMP);
        let hi: T = lit(1.0 - BCE_CLAMP);
        let p = self.value(pred).data();
        let y = self.value(target).data();
        let total: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let p = p.max(lo).min(hi).as_f64();
                let y = y.as_f64();
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let loss = total / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(lit(loss)), rg, Op::Bce { pred, target }))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same_shape(pred, target, "mse_loss")?;
        let p = self.value(pred).data();
        let y = self.value(target).data();
        let total: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let d = p.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let loss = total / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(lit(loss)), rg, Op::Mse { pred, target }))
    }

    /// `sum(x * weights)` with constant weights; reduces any tensor to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} weights for tensor {:?}",
                weights.len(),
                xv.shape()
            )));
        }
        let s: T = xv.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::WeightedSum { x, weights }))
    }

    /// Pads the two spatial axes independently.
    pub fn pad2d(&mut self, x: Var, rows: PadSpec, cols: PadSpec) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        for (spec, len) in [(rows, h), (cols, w)] {
            let wraps = spec.mode != PadMode::Zero;
            let limit = if spec.mode == PadMode::Reflect { len.saturating_sub(1).max(1) } else { len };
            if wraps && (spec.before > limit || spec.after > limit) {
                return Err(Error::shape(format!(
                    "pad2d: {spec:?} is wider than an axis of length {len}"
                )));
            }
        }
        let (oh, ow) = (h + rows.before + rows.after, w + cols.before + cols.after);
        let col_src: Vec<Option<usize>> = (0..ow).map(|j| cols.source(j, w)).collect();
        let xs = xv.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for i in 0..oh {
                let Some(si) = rows.source(i, h) else { continue };
                let src = &xs[plane * h * w + si * w..plane * h * w + (si + 1) * w];
                let dst = &mut out[plane * oh * ow + i * ow..plane * oh * ow + (i + 1) * ow];
                for (d, s) in dst.iter_mut().zip(&col_src) {
                    if let Some(s) = s {
                        *d = src[*s];
                    }
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::Pad { x, rows, cols }))
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root; previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            backprop(before, &rest[0], &g)?;
            rest[0].grad = Some(g);
        }
        Ok(())
    }
}

fn check_bias<T: Scalar>(b: &Tensor<T>, channels: usize, op: &str) -> Result<()> {
    if b.shape() != [channels] {
        return Err(Error::shape(format!(
            "{op}: expected shape [{channels}], got {:?}",
            b.shape()
        )));
    }
    Ok(())
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for i in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            for v in &mut out[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for i in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += g[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied().sum::<T>();
        }
    }
    s
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradient buffer of `v`, if it participates in differentiation.
fn take<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<Vec<T>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(node.grad.take().unwrap_or_else(|| vec![T::zero(); node.value.len()]))
}

fn give<T: Scalar>(nodes: &mut [Node<T>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut nodes[v.0].grad {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        &Op::Conv2d { x, w, b, geom } => {
            let (n, co) = (node.value.shape()[0], node.value.shape()[1]);
            let mut gx = take(nodes, x);
            let mut gw = take(nodes, w);
            let mut gb = b.and_then(|b| take(nodes, b));
            let xs = nodes[x.0].value.data();
            let ws = nodes[w.0].value.data();
            let plane = geom.col_cols();
            let ckk = geom.col_rows();
            let in_len = geom.c * geom.h * geom.w;
            let want_x = gx.is_some();
            let want_w = gw.is_some();
            let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let go = &g[i * co * plane..(i + 1) * co * plane];
                    let xi = &xs[i * in_len..(i + 1) * in_len];
                    let cols = if geom.is_pointwise() || !want_w {
                        None
                    } else {
                        let mut cols = vec![T::zero(); ckk * plane];
                        im2col(xi, &geom, &mut cols);
                        Some(cols)
                    };
                    let dw = want_w.then(|| {
                        let src = cols.as_deref().unwrap_or(xi);
                        let mut dw = vec![T::zero(); co * ckk];
                        T::gemm(co, plane, ckk, T::one(), go, plane as isize, 1, src, 1, plane as isize, T::zero(), &mut dw, ckk as isize, 1);
                        dw
                    });
                    let dx = want_x.then(|| {
                        let mut dcols = vec![T::zero(); ckk * plane];
                        T::gemm(ckk, co, plane, T::one(), ws, 1, ckk as isize, go, plane as isize, 1, T::zero(), &mut dcols, plane as isize, 1);
                        if geom.is_pointwise() {
                            dcols
                        } else {
                            let mut dx = vec![T::zero(); in_len];
                            col2im(&dcols, &geom, &mut dx);
                            dx
                        }
                    });
                    (dx, dw)
                })
                .collect();
            for (i, (dx, dw)) in parts.into_iter().enumerate() {
                if let (Some(gx), Some(dx)) = (gx.as_mut(), dx) {
                    add_into(&mut gx[i * in_len..(i + 1) * in_len], &dx);
                }
                if let (Some(gw), Some(dw)) = (gw.as_mut(), dw) {
                    add_into(gw, &dw);
                }
            }
            if let Some(gb) = gb.as_mut() {
                add_into(gb, &channel_sums(g, n, co, plane));
            }
            give(nodes, x, gx);
            give(nodes, w, gw);
            if let Some(b) = b {
                give(nodes, b, gb);
            }
        }
        &Op::ConvTranspose2d { x, w, b, geom } => {
            let shape = node.value.shape();
            let (n, co, oh, ow) = (shape[0], shape[1], shape[2], shape[3]);
            let ci = nodes[x.0].value.shape()[1];
            let mut gx = take(nodes, x);
            let mut gw = take(nodes, w);
            let mut gb = b.and_then(|b| take(nodes, b));
            let xs = nodes[x.0].value.data();
            let ws = nodes[w.0].value.data();
            let pin = geom.oh * geom.ow;
            let ckk = geom.col_rows();
            let out_len = co * oh * ow;
            let want_x = gx.is_some();
            let want_w = gw.is_some();
            let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let go = &g[i * out_len..(i + 1) * out_len];
                    let xi = &xs[i * ci * pin..(i + 1) * ci * pin];
                    let mut dcols = vec![T::zero(); ckk * pin];
                    im2col(go, &geom, &mut dcols);
                    let dx = want_x.then(|| {
                        let mut dx = vec![T::zero(); ci * pin];
                        T::gemm(ci, ckk, pin, T::one(), ws, ckk as isize, 1, &dcols, pin as isize, 1, T::zero(), &mut dx, pin as isize, 1);
                        dx
                    });
                    let dw = want_w.then(|| {
                        let mut dw = vec![T::zero(); ci * ckk];
                        T::gemm(ci, pin, ckk, T::one(), xi, pin as isize, 1, &dcols, 1, pin as isize, T::zero(), &mut dw, ckk as isize, 1);
                        dw
                    });
                    (dx, dw)
                })
                .collect();
            for (i, (dx, dw)) in parts.into_iter().enumerate() {
                if let (Some(gx), Some(dx)) = (gx.as_mut(), dx) {
                    add_into(&mut gx[i * ci * pin..(i + 1) * ci * pin], &dx);
                }
                if let (Some(gw), Some(dw)) = (gw.as_mut(), dw) {
                    add_into(gw, &dw);
                }
            }
            if let Some(gb) = gb.as_mut() {
                add_into(gb, &channel_sums(g, n, co, oh * ow));
            }
            give(nodes, x, gx);
            give(nodes, w, gw);
            if let Some(b) = b {
                give(nodes, b, gb);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(mut gx) = take(nodes, *x) {
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx as usize] += gv;
                }
                give(nodes, *x, Some(gx));
            }
        }
        &Op::UpsampleNearest2x { x } => {
            let shape = nodes[x.0].value.shape().to_vec();
            if let Some(mut gx) = take(nodes, x) {
                let (h, w) = (shape[2], shape[3]);
                for plane in 0..shape[0] * shape[1] {
                    let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                give(nodes, x, Some(gx));
            }
        }
        &Op::Relu { x } => {
            if let Some(mut gx) = take(nodes, x) {
                for ((a, &gv), &xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                    if xv > T::zero() {
                        *a += gv;
                    }
                }
                give(nodes, x, Some(gx));
            }
        }
        &Op::Sigmoid { x } => {
            if let Some(mut gx) = take(nodes, x) {
                for ((a, &gv), &y) in gx.iter_mut().zip(g).zip(node.value.data()) {
                    *a += gv * y * (T::one() - y);
                }
                give(nodes, x, Some(gx));
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            invstd,
            training,
        } => {
            let shape = node.value.shape();
            let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let m = T::of_usize(n * plane);
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                    for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        sum_dy[ch] += gv;
                        sum_dy_xhat[ch] += gv * xh;
                    }
                }
            }
            if let Some(mut gg) = take(nodes, *gamma) {
                add_into(&mut gg, &sum_dy_xhat);
                give(nodes, *gamma, Some(gg));
            }
            if let Some(mut gb) = take(nodes, *beta) {
                add_into(&mut gb, &sum_dy);
                give(nodes, *beta, Some(gb));
            }
            if let Some(mut gx) = take(nodes, *x) {
                let gam = nodes[gamma.0].value.data();
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        let k = gam[ch] * invstd[ch];
                        if *training {
                            let mean_dy = sum_dy[ch] / m;
                            let mean_dy_xhat = sum_dy_xhat[ch] / m;
                            for ((a, &gv), &xh) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *a += k * (gv - mean_dy - xh * mean_dy_xhat);
                            }
                        } else {
                            for (a, &gv) in gx[r.clone()].iter_mut().zip(&g[r]) {
                                *a += k * gv;
                            }
                        }
                    }
                }
                give(nodes, *x, Some(gx));
            }
        }
        &Op::Concat { a, b } => {
            let shape = node.value.shape();
            let (n, plane) = (shape[0], shape[2] * shape[3]);
            let ca = nodes[a.0].value.shape()[1];
            let cb = nodes[b.0].value.shape()[1];
            let c = ca + cb;
            if let Some(mut ga) = take(nodes, a) {
                for i in 0..n {
                    add_into(&mut ga[i * ca * plane..(i + 1) * ca * plane], &g[i * c * plane..(i * c + ca) * plane]);
                }
                give(nodes, a, Some(ga));
            }
            if let Some(mut gb) = take(nodes, b) {
                for i in 0..n {
                    add_into(&mut gb[i * cb * plane..(i + 1) * cb * plane], &g[(i * c + ca) * plane..(i + 1) * c * plane]);
                }
                give(nodes, b, Some(gb));
            }
        }
        &Op::Crop { x, top, left } => {
            let in_shape = nodes[x.0].value.shape().to_vec();
            let (h, w) = (in_shape[2], in_shape[3]);
            let out = node.value.shape();
            let (oh, ow) = (out[2], out[3]);
            if let Some(mut gx) = take(nodes, x) {
                for plane in 0..in_shape[0] * in_shape[1] {
                    for r in 0..oh {
                        let dst = plane * h * w + (top + r) * w + left;
                        let src = (plane * oh + r) * ow;
                        add_into(&mut gx[dst..dst + ow], &g[src..src + ow]);
                    }
                }
                give(nodes, x, Some(gx));
            }
        }
        &Op::Bce { pred, target } => {
            let lo: T = lit(BCE_CLAMP);
            let hi: T = lit(1.0 - BCE_CLAMP);
            let scale = g[0] / T::of_usize(node_len(nodes, pred));
            let gp = take(nodes, pred).map(|mut gp| {
                let p = nodes[pred.0].value.data();
                let y = nodes[target.0].value.data();
                for ((a, &p), &y) in gp.iter_mut().zip(p).zip(y) {
                    if p > lo && p < hi {
                        *a += scale * ((T::one() - y) / (T::one() - p) - y / p);
                    }
                }
                gp
            });
            let gt = take(nodes, target).map(|mut gt| {
                let p = nodes[pred.0].value.data();
                for (a, &p) in gt.iter_mut().zip(p) {
                    let p = p.max(lo).min(hi);
                    *a += scale * ((T::one() - p).ln() - p.ln());
                }
                gt
            });
            give(nodes, pred, gp);
            give(nodes, target, gt);
        }
        &Op::Mse { pred, target } => {
            let scale = lit::<T>(2.0) * g[0] / T::of_usize(node_len(nodes, pred));
            let diff: Vec<T> = nodes[pred.0]
                .value
                .data()
                .iter()
                .zip(nodes[target.0].value.data())
                .map(|(&p, &y)| scale * (p - y))
                .collect();
            if let Some(mut gp) = take(nodes, pred) {
                add_into(&mut gp, &diff);
                give(nodes, pred, Some(gp));
            }
            if let Some(mut gt) = take(nodes, target) {
                gt.iter_mut().zip(&diff).for_each(|(a, &d)| *a -= d);
                give(nodes, target, Some(gt));
            }
        }
        &Op::Pad { x, rows, cols } => {
            let in_shape = nodes[x.0].value.shape().to_vec();
            let (h, w) = (in_shape[2], in_shape[3]);
            let out = node.value.shape();
            let (oh, ow) = (out[2], out[3]);
            if let Some(mut gx) = take(nodes, x) {
                let col_src: Vec<Option<usize>> = (0..ow).map(|j| cols.source(j, w)).collect();
                for plane in 0..in_shape[0] * in_shape[1] {
                    for i in 0..oh {
                        let Some(si) = rows.source(i, h) else { continue };
                        let src = &g[plane * oh * ow + i * ow..plane * oh * ow + (i + 1) * ow];
                        let dst = &mut gx[plane * h * w + si * w..plane * h * w + (si + 1) * w];
                        for (&gv, s) in src.iter().zip(&col_src) {
                            if let Some(s) = s {
                                dst[*s] += gv;
                            }
                        }
                    }
                }
                give(nodes, x, Some(gx));
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(mut gx) = take(nodes, *x) {
                for (a, &w) in gx.iter_mut().zip(weights) {
                    *a += g[0] * w;
                }
                give(nodes, *x, Some(gx));
            }
        }
    }
    Ok(())
}

fn node_len<T: Scalar>(nodes: &[Node<T>], v: Var) -> usize {
    nodes[v.0].value.len()
}

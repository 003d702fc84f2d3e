//! Neural building blocks: convolutions, normalizations, attention and resampling.
//!
//! Tape-level primitives take and return [`Var`]s. The layer structs below name
//! their tensors inside a [`ParamSet`] and bind them through a [`Graph`] on every
//! forward pass.

use rand::Rng;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamSet;
use crate::tensor::{Float, Tensor};

/// Leaky ReLU slope used throughout the convolutional blocks.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum NormKind {
    /// Statistics per column (channel) over all rows (pixels).
    Batch { train: bool },
    /// Statistics per row (token) over all columns.
    Layer,
}

#[derive(Clone, Debug)]
pub(crate) struct NormSaved<T: Float> {
    x: Var,
    pub(crate) gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    cols: usize,
    kind: NormKind,
}

pub(crate) fn norm_backward<T: Float, F>(s: &NormSaved<T>, gamma: &[T], g: &[T], acc: &mut F)
where
    F: FnMut(Var, &mut dyn FnMut(&mut [T])),
{
    let cols = s.cols;
    acc(s.beta, &mut |d| {
        for (i, &gi) in g.iter().enumerate() {
            d[i % cols] = d[i % cols] + gi;
        }
    });
    acc(s.gamma, &mut |d| {
        for (i, &gi) in g.iter().enumerate() {
            d[i % cols] = d[i % cols] + gi * s.xhat[i];
        }
    });
    let dx = norm_input_grad(s, gamma, g);
    acc(s.x, &mut |d| {
        for (a, &b) in d.iter_mut().zip(&dx) {
            *a = *a + b;
        }
    });
}

/// Execution context for one forward pass: tape, parameter source, mode and pending
/// buffer updates (BatchNorm running statistics).
pub struct Graph<'p, T: Float = f64> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    pub mode: Mode,
    updates: Vec<(String, Vec<T>)>,
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>, mode: Mode) -> Self {
        Self { tape: Tape::new(), params, mode, updates: Vec::new() }
    }

    /// Binds a parameter by name.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        Ok(self.tape.param(name, t))
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.tape.leaf(t)
    }

    pub fn take_updates(&mut self) -> Vec<(String, Vec<T>)> {
        std::mem::take(&mut self.updates)
    }
}

// ---- tape primitives ---------------------------------------------------

impl<T: Float> Tape<T> {
    /// Cross-correlation of `x[H×W×Cin]` with `w[k×k×Cin×Cout]` plus optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] {
            return Err(Error::Shape(format!("conv2d input {xs:?} kernel {ws:?}")));
        }
        if ws[2] != xs[2] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                xs[2], ws[2]
            )));
        }
        let (k, cout) = (ws[0], ws[3]);
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::Shape("conv2d bias length".into()));
            }
        }
        let (Some(oh), Some(ow)) = (
            ConvGeom::out_extent(xs[0], k, stride, pad),
            ConvGeom::out_extent(xs[1], k, stride, pad),
        ) else {
            return Err(Error::Shape(format!(
                "kernel {k} larger than padded input {:?} (pad {pad}) or zero stride",
                &xs[..2]
            )));
        };
        let geom = ConvGeom { in_h: xs[0], in_w: xs[1], channels: xs[2], kernel: k, stride, pad };
        let cols = kernels::im2col(self.value(x), &geom);
        let mut out = vec![T::zero(); oh * ow * cout];
        kernels::matmul_acc(&cols, self.value(w), &mut out, oh * ow, geom.patch_len(), cout);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b));
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = deps.iter().any(|&v| self.needs_grad(v));
        Ok(self.push(vec![oh, ow, cout], out, Op::Conv2d { x, w, b, geom, cout }, g))
    }

    /// Transposed convolution of `x[H×W×Cin]` with `w[k×k×Cout×Cin]`: the adjoint of
    /// [`Tape::conv2d`] with the same kernel, producing `(H−1)·stride + k − 2·pad` rows.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] {
            return Err(Error::Shape(format!("conv_transpose2d input {xs:?} kernel {ws:?}")));
        }
        if ws[3] != xs[2] {
            return Err(Error::Shape(format!(
                "conv_transpose2d channel mismatch: input has {}, kernel expects {}",
                xs[2], ws[3]
            )));
        }
        let (k, cout, cin) = (ws[0], ws[2], ws[3]);
        if stride == 0 || (xs[0] - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::Shape("conv_transpose2d geometry".into()));
        }
        let oh = (xs[0] - 1) * stride + k - 2 * pad;
        let ow = (xs[1] - 1) * stride + k - 2 * pad;
        let geom = ConvGeom { in_h: oh, in_w: ow, channels: cout, kernel: k, stride, pad };
        debug_assert_eq!(geom.out_h(), xs[0]);
        let pixels = xs[0] * xs[1];
        let mut cols = vec![T::zero(); pixels * geom.patch_len()];
        kernels::matmul_nt_acc(self.value(x), self.value(w), &mut cols, pixels, cin, geom.patch_len());
        let mut out = kernels::col2im(&cols, &geom);
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::Shape("conv_transpose2d bias length".into()));
            }
            add_channel_bias(&mut out, self.value(b));
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = deps.iter().any(|&v| self.needs_grad(v));
        Ok(self.push(vec![oh, ow, cout], out, Op::ConvT2d { x, w, b, geom, cin }, g))
    }

    /// Batch normalization of `x[H×W×C]` over its spatial extent.
    ///
    /// In train mode returns the batch mean and unbiased variance alongside the output
    /// so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(x).len() / c;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape("batch_norm affine length".into()));
        }
        let xv = self.value(x);
        let (mean, var, batch_stats) = match running {
            None => {
                if rows < 2 {
                    return Err(Error::Invalid("batch_norm needs at least 2 samples per channel in train mode".into()));
                }
                let mut mean = vec![T::zero(); c];
                for (i, &v) in xv.iter().enumerate() {
                    mean[i % c] = mean[i % c] + v;
                }
                let n = T::c(rows as f64);
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for (i, &v) in xv.iter().enumerate() {
                    let d = v - mean[i % c];
                    var[i % c] = var[i % c] + d * d;
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                let unbiased: Vec<T> = var.iter().map(|&v| v * n / T::c(rows as f64 - 1.0)).collect();
                (mean.clone(), var, Some((mean, unbiased)))
            }
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        if inv_std.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch_norm statistics".into()));
        }
        let xhat: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &h)| gv[i % c] * h + bv[i % c]).collect();
        let g = [x, gamma, beta].iter().any(|&v| self.needs_grad(v));
        let saved = NormSaved { x, gamma, beta, xhat, inv_std, cols: c, kind: NormKind::Batch { train: running.is_none() } };
        Ok((self.push(shape, out, Op::Norm(saved), g), batch_stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if d < 2 {
            return Err(Error::Shape("layer_norm needs a last axis of at least 2".into()));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape("layer_norm affine length".into()));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let n = T::c(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &h)| gv[i % d] * h + bv[i % d]).collect();
        let g = [x, gamma, beta].iter().any(|&v| self.needs_grad(v));
        let saved = NormSaved { x, gamma, beta, xhat, inv_std, cols: d, kind: NormKind::Layer };
        Ok(self.push(shape, out, Op::Norm(saved), g))
    }

    /// Align-corners-false bilinear resampling of `x[H×W×C]`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::Shape(format!("bilinear_resize {s:?} -> {out_h}x{out_w}")));
        }
        let out = bilinear_values(self.value(x), s[0], s[1], s[2], out_h, out_w);
        let g = self.needs_grad(x);
        Ok(self.push(vec![out_h, out_w, s[2]], out, Op::Bilinear { src: x, in_h: s[0], in_w: s[1] }, g))
    }
}

/// Plain (untracked) bilinear resize, used for teacher maps and masks.
pub fn bilinear_values<T: Float>(x: &[T], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = kernels::bilinear_taps(h, oh);
    let tx = kernels::bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow * c);
    for &(y0, y1, fy) in &ty {
        let fy = T::c(fy);
        for &(x0, x1, fx) in &tx {
            let fx = T::c(fx);
            for ch in 0..c {
                let at = |y: usize, xx: usize| x[(y * w + xx) * c + ch];
                let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
                let bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
                out.push(top + fy * (bot - top));
            }
        }
    }
    out
}

fn add_channel_bias<T: Float>(out: &mut [T], b: &[T]) {
    let c = b.len();
    for (i, v) in out.iter_mut().enumerate() {
        *v = *v + b[i % c];
    }
}

fn norm_input_grad<T: Float>(s: &NormSaved<T>, gamma: &[T], g: &[T]) -> Vec<T> {
    let cols = s.cols;
    let rows = g.len() / cols;
    let dxhat: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * gamma[i % cols]).collect();
    let mut dx = vec![T::zero(); g.len()];
    match s.kind {
        NormKind::Batch { train: false } => {
            for i in 0..g.len() {
                dx[i] = dxhat[i] * s.inv_std[i % cols];
            }
        }
        NormKind::Batch { train: true } => {
            let n = T::c(rows as f64);
            let mut sum = vec![T::zero(); cols];
            let mut dot = vec![T::zero(); cols];
            for i in 0..g.len() {
                sum[i % cols] = sum[i % cols] + dxhat[i];
                dot[i % cols] = dot[i % cols] + dxhat[i] * s.xhat[i];
            }
            for i in 0..g.len() {
                let c = i % cols;
                dx[i] = s.inv_std[c] / n * (n * dxhat[i] - sum[c] - s.xhat[i] * dot[c]);
            }
        }
        NormKind::Layer => {
            let n = T::c(cols as f64);
            for r in 0..rows {
                let range = r * cols..(r + 1) * cols;
                let sum: T = dxhat[range.clone()].iter().copied().sum();
                let dot: T = range.clone().map(|i| dxhat[i] * s.xhat[i]).sum();
                for i in range {
                    dx[i] = s.inv_std[r] / n * (n * dxhat[i] - sum - s.xhat[i] * dot);
                }
            }
        }
    }
    dx
}

// ---- layers --------------------------------------------------------------

fn he_uniform<T: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::c(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

fn xavier_uniform<T: Float>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::c(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

/// A convolution whose kernel `[k×k×Cin×Cout]` and bias `[Cout]` live under `name.w` / `name.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub name: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(name: impl Into<String>, k: usize, cin: usize, cout: usize, stride: usize, padding: usize) -> Self {
        Self { name: name.into(), k, cin, cout, stride, padding }
    }

    /// `k×k`, stride 1, "same" padding.
    pub fn same(name: impl Into<String>, k: usize, cin: usize, cout: usize) -> Self {
        Self::new(name, k, cin, cout, 1, k / 2)
    }

    pub fn init<T: Float>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        let fan_in = self.k * self.k * self.cin;
        params.insert(format!("{}.w", self.name), he_uniform(&[self.k, self.k, self.cin, self.cout], fan_in, rng));
        params.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]).with_grad());
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        ConvGeom::out_extent(input, self.k, self.stride, self.padding)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(&format!("{}.w", self.name))?;
        let b = g.p(&format!("{}.b", self.name))?;
        let in_shape = g.tape.shape(x).to_vec();
        let y = g.tape.conv2d(x, w, Some(b), self.stride, self.padding)?;
        let out = g.tape.shape(y);
        if Some(out[0]) != self.out_extent(in_shape[0]) || Some(out[1]) != self.out_extent(in_shape[1]) {
            return Err(Error::Shape(format!("{}: output extent law violated", self.name)));
        }
        Ok(y)
    }
}

/// Transposed convolution with kernel `[k×k×Cout×Cin]`; output extent `stride·in` when `k = stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvT2dParams {
    pub name: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvT2dParams {
    pub fn new(name: impl Into<String>, k: usize, cin: usize, cout: usize, stride: usize) -> Self {
        Self { name: name.into(), k, cin, cout, stride }
    }

    /// Symmetric cropping so that the output is exactly `stride·in`.
    fn crop(&self) -> usize {
        (self.k - self.stride) / 2
    }

    pub fn init<T: Float>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        let fan_in = self.k * self.k * self.cin / (self.stride * self.stride).max(1);
        params.insert(
            format!("{}.w", self.name),
            he_uniform(&[self.k, self.k, self.cout, self.cin], fan_in.max(1), rng),
        );
        params.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]).with_grad());
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(&format!("{}.w", self.name))?;
        let b = g.p(&format!("{}.b", self.name))?;
        let in_shape = g.tape.shape(x).to_vec();
        let y = g.tape.conv_transpose2d(x, w, Some(b), self.stride, self.crop())?;
        let out = g.tape.shape(y);
        if out[0] != self.stride * in_shape[0] || out[1] != self.stride * in_shape[1] {
            return Err(Error::Shape(format!("{}: output is not stride × input", self.name)));
        }
        Ok(y)
    }
}

/// BatchNorm affine parameters (`name.gamma`, `name.beta`) and running statistics
/// (`name.running_mean`, `name.running_var`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels, momentum: 0.1, eps: 1e-5 }
    }

    pub fn init<T: Float>(&self, params: &mut ParamSet<T>) {
        let c = self.channels;
        params.insert(format!("{}.gamma", self.name), Tensor::full(&[c], T::one()).with_grad());
        params.insert(format!("{}.beta", self.name), Tensor::zeros(&[c]).with_grad());
        params.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[c]));
        params.insert(format!("{}.running_var", self.name), Tensor::full(&[c], T::one()));
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.p(&format!("{}.gamma", self.name))?;
        let beta = g.p(&format!("{}.beta", self.name))?;
        let rm_name = format!("{}.running_mean", self.name);
        let rv_name = format!("{}.running_var", self.name);
        let params = g.params();
        let (rm, rv) = (params.get(&rm_name)?, params.get(&rv_name)?);
        let eps = T::c(self.eps);
        match g.mode {
            Mode::Eval => Ok(g.tape.batch_norm(x, gamma, beta, Some((rm.data(), rv.data())), eps)?.0),
            Mode::Train => {
                let (y, stats) = g.tape.batch_norm(x, gamma, beta, None, eps)?;
                let (bm, bv) = stats.expect("train mode returns statistics");
                let m = T::c(self.momentum);
                let blend = |old: &[T], new: &[T]| -> Vec<T> {
                    old.iter().zip(new).map(|(&o, &n)| (T::one() - m) * o + m * n).collect()
                };
                let (nm, nv) = (blend(rm.data(), &bm), blend(rv.data(), &bv));
                g.updates.push((rm_name, nm));
                g.updates.push((rv_name, nv));
                Ok(y)
            }
        }
    }
}

/// Dense layer `x·W + b` with `W[Din×Dout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout }
    }

    pub fn init<T: Float>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        params.insert(format!("{}.w", self.name), xavier_uniform(&[self.din, self.dout], self.din, self.dout, rng));
        params.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dout]).with_grad());
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(&format!("{}.w", self.name))?;
        let b = g.p(&format!("{}.b", self.name))?;
        g.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub name: String,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init<T: Float>(&self, params: &mut ParamSet<T>) {
        params.insert(format!("{}.gamma", self.name), Tensor::full(&[self.dim], T::one()).with_grad());
        params.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim]).with_grad());
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.p(&format!("{}.gamma", self.name))?;
        let beta = g.p(&format!("{}.beta", self.name))?;
        g.tape.layer_norm(x, gamma, beta, T::c(1e-6))
    }
}

/// Multi-head self-attention over a token matrix `[N×D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaParams {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
}

/// Attention output together with the per-head attention matrices `[N×N]`.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MhsaParams {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self { name: name.into(), dim, heads })
    }

    fn proj(&self, which: &str) -> Linear {
        Linear::new(format!("{}.{which}", self.name), self.dim, self.dim)
    }

    pub fn init<T: Float>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        for which in ["q", "k", "v", "out"] {
            self.proj(which).init(params, rng);
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        Ok(self.forward_traced(g, tokens)?.output)
    }

    pub fn forward_traced<T: Float>(&self, g: &mut Graph<T>, tokens: Var) -> Result<AttentionTrace> {
        let s = g.tape.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::Shape(format!("{}: tokens {s:?}, width {}", self.name, self.dim)));
        }
        let q = self.proj("q").forward(g, tokens)?;
        let k = self.proj("k").forward(g, tokens)?;
        let v = self.proj("v").forward(g, tokens)?;
        let hd = self.dim / self.heads;
        let scale = T::one() / T::c(hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.tape.slice(q, 1, h * hd, hd)?;
            let kh = g.tape.slice(k, 1, h * hd, hd)?;
            let vh = g.tape.slice(v, 1, h * hd, hd)?;
            let kt = g.tape.transpose(kh)?;
            let scores = g.tape.matmul(qh, kt)?;
            let scores = g.tape.scale(scores, scale);
            let attn = g.tape.softmax(scores, 1)?;
            heads.push(g.tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.tape.concat(&heads, 1)? };
        let output = self.proj("out").forward(g, cat)?;
        Ok(AttentionTrace { output, weights })
    }
}

//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its value and whatever it needs for the backward pass; parents always
//! precede children, so the reverse sweep is a single walk from the root down.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::nn;
use crate::tensor::{numel, Float, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Float> {
    Leaf,
    Binary(Binary, Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, T),
    Scale(Var, T),
    Offset(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Gelu(Var),
    Huber(Var, T),
    Sum(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias(Var, Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Permute { src: Var, perm: Vec<usize> },
    Softmax { src: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize },
    Norm(nn::NormSaved<T>),
    Bilinear { src: Var, in_h: usize, in_w: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T: Float> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug)]
pub struct Tape<T: Float = f64> {
    id: usize,
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx]
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.idx < self.nodes.len()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let n = self.node(v);
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are valid")
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let idx = self.nodes.len();
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var { tape: self.id, idx }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).needs_grad)
    }

    /// Adds a leaf copied from `t`; it is differentiable when `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.push(vec![1], vec![x], Op::Leaf, false)
    }

    /// Binds a named parameter once per tape; repeated lookups return the same leaf.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.param_index.insert(name.to_string(), v);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn check_finite(&self, what: &str, value: &[T]) -> Result<()> {
        if value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} produced NaN/Inf")))
        }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (la, lb) = (na.value.len(), nb.value.len());
        let shape = if na.shape == nb.shape || lb == 1 {
            na.shape.clone()
        } else if la == 1 {
            nb.shape.clone()
        } else {
            return Err(Error::Shape(format!(
                "elementwise {op:?} on {:?} and {:?}",
                na.shape, nb.shape
            )));
        };
        let n = la.max(lb);
        let av = |i: usize| na.value[if la == 1 { 0 } else { i }];
        let bv = |i: usize| nb.value[if lb == 1 { 0 } else { i }];
        if op == Binary::Div && nb.value.iter().any(|x| x.is_zero()) {
            return Err(Error::Invalid("division by zero".into()));
        }
        let value: Vec<T> = (0..n)
            .map(|i| match op {
                Binary::Add => av(i) + bv(i),
                Binary::Sub => av(i) - bv(i),
                Binary::Mul => av(i) * bv(i),
                Binary::Div => av(i) / bv(i),
            })
            .collect();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(shape, value, Op::Binary(op, a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        let g = n.needs_grad;
        self.push(shape, value, op, g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, Op::Exp(a), |x| x.exp());
        self.check_finite("exp", self.value(v))?;
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= T::zero()) {
            return Err(Error::Invalid("log of a non-positive value".into()));
        }
        Ok(self.unary(a, Op::Log(a), |x| x.ln()))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| if x > lo { x } else { lo })
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x >= T::zero() { x } else { slope * x })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus_scalar)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu_parts(x).0)
    }

    /// Elementwise Huber penalty of a residual.
    pub fn huber_elem(&mut self, r: Var, delta: T) -> Var {
        let half = T::c(0.5);
        self.unary(r, Op::Huber(r, delta), |x| {
            if x.abs() < delta {
                half * x * x
            } else {
                delta * (x.abs() - half * delta)
            }
        })
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().copied().sum();
        let g = n.needs_grad;
        self.push(vec![1], vec![s], Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, g))
    }

    /// Adds `bias[C]` along the last axis of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.value(bias).len() != c {
            return Err(Error::Shape(format!(
                "bias of {} entries for last axis {c}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(shape, value, Op::AddBias(x, bias), g))
    }

    /// `x[N×Din] · w[Din×Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- shape ops -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a);
        if numel(shape) != n.value.len() || shape.contains(&0) {
            return Err(Error::Shape(format!("reshape {:?} -> {shape:?}", n.shape)));
        }
        let value = n.value.clone();
        let g = n.needs_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), g))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} on rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Shape(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let g = self.any_grad(parts);
        Ok(self.push(shape, value, Op::Concat { parts: parts.to_vec(), axis }, g))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let g = self.needs_grad(a);
        Ok(self.push(out_shape, value, Op::Slice { src: a, axis, start }, g))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = permute_data(self.value(a), &shape, perm);
        let g = self.needs_grad(a);
        Ok(self.push(out_shape, value, Op::Permute { src: a, perm: perm.to_vec() }, g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut value = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (src[idx(j)] - mx).exp();
                    value[idx(j)] = e;
                    z = z + e;
                }
                for j in 0..n {
                    value[idx(j)] = value[idx(j)] / z;
                }
            }
        }
        let g = self.needs_grad(a);
        Ok(self.push(shape, value, Op::Softmax { src: a, axis }, g))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.owns(root) {
            return Err(Error::Invalid("backward root is not on this tape".into()));
        }
        if self.node(root).value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}; use backward_with_seed",
                self.node(root).shape
            )));
        }
        self.backward_with_seed(root, &[T::one()])
    }

    pub fn backward_with_seed(&self, root: Var, seed: &[T]) -> Result<Gradients<T>> {
        if !self.owns(root) {
            return Err(Error::Invalid("backward root is not on this tape".into()));
        }
        if seed.len() != self.node(root).value.len() {
            return Err(Error::Shape("seed gradient length mismatch".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.idx + 1];
        grads[root.idx] = Some(seed.to_vec());
        for idx in (0..=root.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.idx].needs_grad {
                return;
            }
            let slot = grads[v.idx].get_or_insert_with(|| vec![T::zero(); self.nodes[v.idx].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                let (la, lb) = (av.len(), bv.len());
                let ai = |i: usize| if la == 1 { 0 } else { i };
                let bi = |i: usize| if lb == 1 { 0 } else { i };
                acc(*a, &mut |s| {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match op {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bv[bi(i)],
                            Binary::Div => gi / bv[bi(i)],
                        };
                        s[ai(i)] = s[ai(i)] + d;
                    }
                });
                acc(*b, &mut |s| {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match op {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av[ai(i)],
                            Binary::Div => {
                                let bb = bv[bi(i)];
                                -gi * av[ai(i)] / (bb * bb)
                            }
                        };
                        s[bi(i)] = s[bi(i)] + d;
                    }
                });
            }
            Op::Neg(a) => acc(*a, &mut |s| zip_add(s, g, |_, gi| -gi)),
            Op::Exp(a) => acc(*a, &mut |s| zip_add(s, g, |i, gi| gi * node.value[i])),
            Op::Log(a) => {
                let x = &self.nodes[a.idx].value;
                acc(*a, &mut |s| zip_add(s, g, |i, gi| gi / x[i]))
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.idx].value;
                acc(*a, &mut |s| zip_add(s, g, |i, gi| gi * sign0(x[i])))
            }
            Op::ClampMin(a, lo) => {
                let x = &self.nodes[a.idx].value;
                acc(*a, &mut |s| zip_add(s, g, |i, gi| if x[i] > *lo { gi } else { T::zero() }))
            }
            Op::Scale(a, c) => acc(*a, &mut |s| zip_add(s, g, |_, gi| gi * *c)),
            Op::Offset(a) => acc(*a, &mut |s| zip_add(s, g, |_, gi| gi)),
            Op::LeakyRelu(a, slope) => {
                let x = &self.nodes[a.idx].value;
                acc(*a, &mut |s| {
                    zip_add(s, g, |i, gi| if x[i] >= T::zero() { gi } else { gi * *slope })
                })
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.idx].value;
                acc(*a, &mut |s| zip_add(s, g, |i, gi| gi * sigmoid(x[i])))
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.idx].value;
                acc(*a, &mut |s| zip_add(s, g, |i, gi| gi * gelu_parts(x[i]).1))
            }
            Op::Huber(a, delta) => {
                let x = &self.nodes[a.idx].value;
                acc(*a, &mut |s| {
                    zip_add(s, g, |i, gi| {
                        if x[i].abs() < *delta {
                            gi * x[i]
                        } else {
                            gi * *delta * sign0(x[i])
                        }
                    })
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x = *x + g[0])),
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                acc(*a, &mut |s| kernels::matmul_nt_acc(g, bv, s, *m, *n, *k));
                acc(*b, &mut |s| kernels::matmul_tn_acc(av, g, s, *k, *m, *n));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| zip_add(s, g, |_, gi| gi));
                let c = self.nodes[b.idx].value.len();
                acc(*b, &mut |s| {
                    for (i, &gi) in g.iter().enumerate() {
                        s[i % c] = s[i % c] + gi;
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| zip_add(s, g, |_, gi| gi)),
            Op::Concat { parts, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.idx].shape[*axis] * inner;
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + len];
                            for (d, &x) in s[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d = *d + x;
                            }
                        }
                    });
                    off += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let sshape = &self.nodes[src.idx].shape;
                let outer: usize = sshape[..*axis].iter().product();
                let inner: usize = sshape[axis + 1..].iter().product();
                let len = node.shape[*axis] * inner;
                acc(*src, &mut |s| {
                    for o in 0..outer {
                        let base = (o * sshape[*axis] + start) * inner;
                        for (d, &x) in s[base..base + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
                            *d = *d + x;
                        }
                    }
                });
            }
            Op::Permute { src, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &node.shape, &inv);
                acc(*src, &mut |s| zip_add(s, &back, |_, gi| gi));
            }
            Op::Softmax { src, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                acc(*src, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                s[idx(j)] = s[idx(j)] + y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cout } => {
                let pixels = geom.out_h() * geom.out_w();
                let pl = geom.patch_len();
                let xv = &self.nodes[x.idx].value;
                let wv = &self.nodes[w.idx].value;
                if self.nodes[w.idx].needs_grad {
                    let cols = kernels::im2col(xv, geom);
                    acc(*w, &mut |s| kernels::matmul_tn_acc(&cols, g, s, pl, pixels, *cout));
                }
                if self.nodes[x.idx].needs_grad {
                    let mut dcols = vec![T::zero(); pixels * pl];
                    kernels::matmul_nt_acc(g, wv, &mut dcols, pixels, *cout, pl);
                    let dx = kernels::col2im(&dcols, geom);
                    acc(*x, &mut |s| zip_add(s, &dx, |_, gi| gi));
                }
                if let Some(b) = b {
                    acc(*b, &mut |s| channel_sum_add(s, g, *cout));
                }
            }
            Op::ConvT2d { x, w, b, geom, cin } => {
                // `geom` describes the forward conv that maps the output back onto `x`.
                let pixels = geom.out_h() * geom.out_w();
                let pl = geom.patch_len();
                let xv = &self.nodes[x.idx].value;
                let wv = &self.nodes[w.idx].value;
                let dcols = kernels::im2col(g, geom);
                acc(*x, &mut |s| kernels::matmul_acc(&dcols, wv, s, pixels, pl, *cin));
                acc(*w, &mut |s| kernels::matmul_tn_acc(&dcols, xv, s, pl, pixels, *cin));
                if let Some(b) = b {
                    acc(*b, &mut |s| channel_sum_add(s, g, geom.channels));
                }
            }
            Op::Norm(saved) => nn::norm_backward(saved, self.value(saved.gamma), g, &mut acc),
            Op::Bilinear { src, in_h, in_w } => {
                let (oh, ow, c) = (node.shape[0], node.shape[1], node.shape[2]);
                let ty = kernels::bilinear_taps(*in_h, oh);
                let tx = kernels::bilinear_taps(*in_w, ow);
                acc(*src, &mut |s| {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::c(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::c(fx);
                            let w00 = (T::one() - fy) * (T::one() - fx);
                            let w01 = (T::one() - fy) * fx;
                            let w10 = fy * (T::one() - fx);
                            let w11 = fy * fx;
                            for ch in 0..c {
                                let gi = g[(oy * ow + ox) * c + ch];
                                let at = |y: usize, x: usize| (y * in_w + x) * c + ch;
                                s[at(y0, x0)] = s[at(y0, x0)] + gi * w00;
                                s[at(y0, x1)] = s[at(y0, x1)] + gi * w01;
                                s[at(y1, x0)] = s[at(y1, x0)] + gi * w10;
                                s[at(y1, x1)] = s[at(y1, x1)] + gi * w11;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Float> {
    tape: usize,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; `None` when no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradients of every named parameter bound on the tape (zeros when unreached).
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&[T]>)> {
        self.params.iter().map(|(name, v)| (name.as_str(), self.wrt(*v)))
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.wrt(*v))
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Float>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn zip_add<T: Float>(s: &mut [T], g: &[T], f: impl Fn(usize, T) -> T) {
    for (i, (d, &gi)) in s.iter_mut().zip(g).enumerate() {
        *d = *d + f(i, gi);
    }
}

fn channel_sum_add<T: Float>(s: &mut [T], g: &[T], c: usize) {
    for (i, &gi) in g.iter().enumerate() {
        s[i % c] = s[i % c] + gi;
    }
}

fn sign0<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_scalar<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// GELU value and derivative (tanh form).
fn gelu_parts<T: Float>(x: T) -> (T, T) {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0) * a * x * x);
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (value, deriv)
}

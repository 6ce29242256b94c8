//! Tape-style reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node appended to a flat list.
//! Parents always precede children, so creation order is a topological order
//! and the backward pass is a single reverse sweep.
//!
//! Broadcasting is limited to leading dimensions: the right operand of the
//! binary elementwise ops may have a shape equal to a suffix of the left
//! operand's shape, and `matmul` broadcasts a rank-2 operand across the
//! batch dimensions of the other.

pub(crate) mod kernels;

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::ssm::scan;
use crate::tensor::{axis_split, Tensor};
use kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, softplus};

/// Layer-norm epsilon. Fixed; not configurable.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Padding mode for temporal convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length `T - k + 1`.
    Valid,
    /// Centered window, output length `T`; kernel size must be odd.
    Same,
    /// Window ends at the output position, output length `T`.
    Causal,
}

impl Padding {
    fn resolve(self, t: usize, k: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Valid => {
                if k > t {
                    Err(shape_err!("kernel {k} longer than sequence {t} with valid padding"))
                } else {
                    Ok((0, t - k + 1))
                }
            }
            Padding::Same => {
                if k.is_multiple_of(2) {
                    Err(shape_err!("same padding needs an odd kernel, got {k}"))
                } else {
                    Ok(((k - 1) / 2, t))
                }
            }
            Padding::Causal => Ok((k - 1, t)),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: usize,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    MeanAxis(Var, usize),
    ExpandAxis(Var, usize),
    Concat(Vec<Var>, usize),
    SliceAxis {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        idx: Vec<usize>,
    },
    GatherBatched {
        x: Var,
        idx: Vec<Vec<usize>>,
    },
    SelectiveScan {
        inputs: [Var; 6],
        states: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph. Build it forward, call [`Graph::backward`] once on a
/// scalar root, then read gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
}

fn suffix_reps(a: &[usize], b: &[usize], what: &str) -> Result<usize> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(a.iter().product::<usize>() / b.iter().product::<usize>())
    } else {
        Err(shape_err!(
            "{what}: right operand {b:?} must equal a suffix of {a:?}"
        ))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each output linear index of a permutation to its input linear index.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = counter
            .iter()
            .zip(perm)
            .map(|(&c, &p)| c * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    map
}

fn removed_axis_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input node.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter from `store` as a gradient-tracking leaf. Each
    /// name is bound at most once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.leaf(t, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients for every bound parameter, zero-filled where none flowed.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    /// Clears every gradient so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        suffix_reps(av.shape(), bv.shape(), what)?;
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bl]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product (⊙).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    // ---- unary --------------------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a), &[a])
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last dimension with optional affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [n] {
                return Err(shape_err!(
                    "layer_norm affine shape {:?} != [{n}]",
                    self.shape(p)
                ));
            }
        }
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gd = self.value(g).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o *= gd[i % n];
            }
        }
        if let Some(b) = beta {
            let bd = self.value(b).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bd[i % n];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let parents: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &parents,
        ))
    }

    // ---- linear algebra -----------------------------------------------------

    /// Batched matrix product `[.., M, K] x [.., K, N]`. Batch dimensions must
    /// match, or one operand must be rank 2 and is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch_shape, m, k, n) = matmul_dims(&sa, &sb)?;
        let nb: usize = batch_shape.iter().product();
        let (a_stride, b_stride) = (
            if sa.len() == 2 { 0 } else { m * k },
            if sb.len() == 2 { 0 } else { k * n },
        );
        let mut out = vec![0.0; nb * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..nb {
                gemm_acc(
                    m,
                    k,
                    n,
                    &ad[i * a_stride..i * a_stride + m * k],
                    &bd[i * b_stride..i * b_stride + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// General axis permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for rank {}", s.len()));
        }
        let map = permute_map(&s, perm);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Temporal convolution `x [B,T,C] * w [k,C,C'] + bias [C'] -> [B,T',C']`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] {
            return Err(shape_err!("conv1d: x {sx:?} incompatible with w {sw:?}"));
        }
        let (b, t, c, k, co) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        if let Some(bv) = bias {
            if self.shape(bv) != [co] {
                return Err(shape_err!("conv1d bias {:?} != [{co}]", self.shape(bv)));
            }
        }
        let (pad, t_out) = padding.resolve(t, k)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * t_out * co];
        for bi in 0..b {
            for to in 0..t_out {
                let orow = &mut out[(bi * t_out + to) * co..(bi * t_out + to + 1) * co];
                if let Some(bv) = bias {
                    orow.copy_from_slice(self.nodes[bv.0].value.data());
                }
                for j in 0..k {
                    let ti = to + j;
                    if ti < pad || ti - pad >= t {
                        continue;
                    }
                    let xrow = &xd[(bi * t + ti - pad) * c..(bi * t + ti - pad + 1) * c];
                    gemm_acc(1, c, co, xrow, &wd[j * c * co..(j + 1) * c * co], orow);
                }
            }
        }
        let tt = Tensor::new(vec![b, t_out, co], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push(tt, Op::Conv1d { x, w, bias, pad }, &parents))
    }

    /// Per-channel temporal convolution `x [B,T,C] * w [k,C] + bias [C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[2] {
            return Err(shape_err!("depthwise conv: x {sx:?} incompatible with w {sw:?}"));
        }
        let (b, t, c, k) = (sx[0], sx[1], sx[2], sw[0]);
        if let Some(bv) = bias {
            if self.shape(bv) != [c] {
                return Err(shape_err!("depthwise conv bias {:?} != [{c}]", self.shape(bv)));
            }
        }
        let (pad, t_out) = padding.resolve(t, k)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * t_out * c];
        for bi in 0..b {
            for to in 0..t_out {
                let orow = &mut out[(bi * t_out + to) * c..(bi * t_out + to + 1) * c];
                if let Some(bv) = bias {
                    orow.copy_from_slice(self.nodes[bv.0].value.data());
                }
                for j in 0..k {
                    let ti = to + j;
                    if ti < pad || ti - pad >= t {
                        continue;
                    }
                    let xrow = &xd[(bi * t + ti - pad) * c..(bi * t + ti - pad + 1) * c];
                    let wrow = &wd[j * c..(j + 1) * c];
                    for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let tt = Tensor::new(vec![b, t_out, c], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push(tt, Op::DepthwiseConv1d { x, w, bias, pad }, &parents))
    }

    // ---- reductions and shape plumbing -------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(t, Op::MeanAll(a), &[a])
    }

    /// Max over `axis`, removing it. Ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err!("axis {axis} out of range for {s:?}"));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let v = d[(o * n + j) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = j;
                    }
                }
            }
        }
        let t = Tensor::new(removed_axis_shape(&s, axis), out)?;
        Ok(self.push(t, Op::MaxAxis { x: a, axis, argmax }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err!("axis {axis} out of range for {s:?}"));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let t = Tensor::new(removed_axis_shape(&s, axis), out)?;
        Ok(self.push(t, Op::MeanAxis(a, axis), &[a]))
    }

    /// Inserts a new axis of size `n` at position `axis` by repetition.
    pub fn expand_axis(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis > s.len() || n == 0 {
            return Err(shape_err!("cannot expand {s:?} at axis {axis}"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s.clone();
        shape.insert(axis, n);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ExpandAxis(a, axis), &[a]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err!("concat of nothing"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err!("axis {axis} out of range for {s0:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i])
            {
                return Err(shape_err!("concat: {s:?} incompatible with {s0:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                out.extend_from_slice(&self.value(x).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err!("slice [{start}, {}) out of range on axis {axis} of {s:?}", start + len));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SliceAxis { x: a, axis, start }, &[a]))
    }

    /// Selects entries along `axis` by index (repeats allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || idx.is_empty() || idx.iter().any(|&i| i >= s[axis]) {
            return Err(shape_err!("index_select out of range on axis {axis} of {s:?}"));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                out.extend_from_slice(&d[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[axis] = idx.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::IndexSelect {
                x: a,
                axis,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Per-batch-element selection along axis 1: `x [B,T,...]` with one index
    /// list per batch element (all of equal length) gives `[B,T',...]`.
    pub fn gather_batched(&mut self, a: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || idx.len() != s[0] {
            return Err(shape_err!("gather_batched: {} index rows for {s:?}", idx.len()));
        }
        let tp = idx[0].len();
        if tp == 0 || idx.iter().any(|r| r.len() != tp || r.iter().any(|&i| i >= s[1])) {
            return Err(shape_err!("gather_batched: ragged or out-of-range indices for {s:?}"));
        }
        let inner: usize = s[2..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * tp * inner);
        for (b, row) in idx.iter().enumerate() {
            for &i in row {
                let o = (b * s[1] + i) * inner;
                out.extend_from_slice(&d[o..o + inner]);
            }
        }
        let mut shape = s;
        shape[1] = tp;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::GatherBatched {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Fused selective scan with zero-order-hold discretization.
    ///
    /// `x, delta: [B,T,C]`, `a: [C,N]` (strictly negative), `b, c: [B,T,N]`,
    /// `d: [C]`. Returns `y: [B,T,C]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let dims = scan::ScanDims::infer(
            self.shape(x),
            self.shape(delta),
            self.shape(a),
            self.shape(b),
            self.shape(c),
            self.shape(d),
        )?;
        let inputs = scan::ScanInputs {
            dims,
            x: self.value(x).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        };
        let (y, states) = scan::selective_scan_with_states(&inputs);
        let t = Tensor::new(vec![dims.batch, dims.len, dims.channels], y)?;
        let vars = [x, delta, a, b, c, d];
        Ok(self.push(t, Op::SelectiveScan { inputs: vars, states }, &vars))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits [N,K])`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(shape_err!("cross_entropy: logits {s:?} vs {} labels", labels.len()));
        }
        let k = s[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut nll = 0.0;
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            nll += lse - row[l];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let t = Tensor::scalar(nll / labels.len() as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// reachable node that requires them. Running twice without
    /// [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, pg) in contribs {
                let node = &mut self.nodes[p.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    res.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    let bl = self.val(*b).len();
                    let mut gb = vec![0.0; bl];
                    for (k, &gv) in g.iter().enumerate() {
                        gb[k % bl] += sign * gv;
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a), self.val(*b));
                let bl = bd.len();
                if rg(*a) {
                    res.push((*a, g.iter().enumerate().map(|(k, &gv)| gv * bd[k % bl]).collect()));
                }
                if rg(*b) {
                    let mut gb = vec![0.0; bl];
                    for (k, &gv) in g.iter().enumerate() {
                        gb[k % bl] += gv * ad[k];
                    }
                    res.push((*b, gb));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|v| v * c).collect())),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = matmul_dims(sa, sb).expect("validated in forward");
                let nb: usize = batch.iter().product();
                let (a_shared, b_shared) = (sa.len() == 2, sb.len() == 2);
                let (ad, bd) = (self.val(*a), self.val(*b));
                if rg(*a) {
                    let mut ga = vec![0.0; ad.len()];
                    for bi in 0..nb {
                        let ao = if a_shared { 0 } else { bi * m * k };
                        let bo = if b_shared { 0 } else { bi * k * n };
                        gemm_nt_acc(m, n, k, &g[bi * m * n..(bi + 1) * m * n], &bd[bo..bo + k * n], &mut ga[ao..ao + m * k]);
                    }
                    res.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for bi in 0..nb {
                        let ao = if a_shared { 0 } else { bi * m * k };
                        let bo = if b_shared { 0 } else { bi * k * n };
                        gemm_tn_acc(m, k, n, &ad[ao..ao + m * k], &g[bi * m * n..(bi + 1) * m * n], &mut gb[bo..bo + k * n]);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Permute(a, perm) => {
                let map = permute_map(self.shape(*a), perm);
                let mut ga = vec![0.0; g.len()];
                for (o, &src) in map.iter().enumerate() {
                    ga[src] = g[o];
                }
                res.push((*a, ga));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::Sigmoid(a) => res.push((*a, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect())),
            Op::Silu(a) => {
                let x = self.val(*a);
                res.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .collect(),
                ))
            }
            Op::Exp(a) => res.push((*a, g.iter().zip(out).map(|(gv, y)| gv * y).collect())),
            Op::Softplus(a) => {
                let x = self.val(*a);
                res.push((*a, g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect()))
            }
            Op::Softmax(a) => {
                let n = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gv - dot);
                    }
                }
                res.push((*a, ga));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.last_dim();
                let gam = gamma.map(|v| self.val(v));
                if let Some(gv) = gamma {
                    if rg(*gv) {
                        let mut gg = vec![0.0; n];
                        for (k, (&gr, &xh)) in g.iter().zip(xhat).enumerate() {
                            gg[k % n] += gr * xh;
                        }
                        res.push((*gv, gg));
                    }
                }
                if let Some(bv) = beta {
                    if rg(*bv) {
                        let mut gb = vec![0.0; n];
                        for (k, &gr) in g.iter().enumerate() {
                            gb[k % n] += gr;
                        }
                        res.push((*bv, gb));
                    }
                }
                if rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let dxh: Vec<f64> = g[span.clone()]
                            .iter()
                            .enumerate()
                            .map(|(j, &gv)| gv * gam.map_or(1.0, |ga| ga[j]))
                            .collect();
                        let xh = &xhat[span.clone()];
                        let m1 = dxh.iter().sum::<f64>() / n as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, o) in gx[span].iter_mut().enumerate() {
                            *o = rs * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    res.push((*x, gx));
                }
            }
            Op::Conv1d { x, w, bias, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (b, t, c, k, co) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
                let t_out = node.value.shape()[1];
                let (xd, wd) = (self.val(*x), self.val(*w));
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for to in 0..t_out {
                        let grow = &g[(bi * t_out + to) * co..(bi * t_out + to + 1) * co];
                        for j in 0..k {
                            let ti = to + j;
                            if ti < *pad || ti - pad >= t {
                                continue;
                            }
                            let xo = (bi * t + ti - pad) * c;
                            let wj = &wd[j * c * co..(j + 1) * c * co];
                            gemm_nt_acc(1, co, c, grow, wj, &mut gx[xo..xo + c]);
                            gemm_tn_acc(1, c, co, &xd[xo..xo + c], grow, &mut gw[j * c * co..(j + 1) * c * co]);
                        }
                    }
                }
                res.push((*x, gx));
                res.push((*w, gw));
                if let Some(bv) = bias {
                    let mut gb = vec![0.0; co];
                    for (q, &gv) in g.iter().enumerate() {
                        gb[q % co] += gv;
                    }
                    res.push((*bv, gb));
                }
            }
            Op::DepthwiseConv1d { x, w, bias, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (b, t, c, k) = (sx[0], sx[1], sx[2], sw[0]);
                let t_out = node.value.shape()[1];
                let (xd, wd) = (self.val(*x), self.val(*w));
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for to in 0..t_out {
                        let go = (bi * t_out + to) * c;
                        for j in 0..k {
                            let ti = to + j;
                            if ti < *pad || ti - pad >= t {
                                continue;
                            }
                            let xo = (bi * t + ti - pad) * c;
                            for ch in 0..c {
                                gx[xo + ch] += g[go + ch] * wd[j * c + ch];
                                gw[j * c + ch] += g[go + ch] * xd[xo + ch];
                            }
                        }
                    }
                }
                res.push((*x, gx));
                res.push((*w, gw));
                if let Some(bv) = bias {
                    let mut gb = vec![0.0; c];
                    for (q, &gv) in g.iter().enumerate() {
                        gb[q % c] += gv;
                    }
                    res.push((*bv, gb));
                }
            }
            Op::SumAll(a) => res.push((*a, vec![g[0]; self.val(*a).len()])),
            Op::MeanAll(a) => {
                let n = self.val(*a).len();
                res.push((*a, vec![g[0] / n as f64; n]))
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for q in 0..inner {
                        let j = argmax[o * inner + q];
                        gx[(o * n + j) * inner + q] += g[o * inner + q];
                    }
                }
                res.push((*x, gx));
            }
            Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for q in 0..inner {
                            gx[(o * n + j) * inner + q] = g[o * inner + q] / n as f64;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::ExpandAxis(x, axis) => {
                let s = node.value.shape();
                let n = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let outer = self.val(*x).len() / inner;
                let mut gx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for r in 0..n {
                        let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                        gx[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                res.push((*x, gx));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if rg(x) {
                        let mut gx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[s..s + n * inner]);
                        }
                        res.push((x, gx));
                    }
                    offset += n;
                }
            }
            Op::SliceAxis { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let d = (o * n + start) * inner;
                    gx[d..d + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, gx));
            }
            Op::IndexSelect { x, axis, idx } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for (p, &j) in idx.iter().enumerate() {
                        let src = &g[(o * idx.len() + p) * inner..(o * idx.len() + p + 1) * inner];
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                res.push((*x, gx));
            }
            Op::GatherBatched { x, idx } => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let tp = idx[0].len();
                let mut gx = vec![0.0; self.val(*x).len()];
                for (b, row) in idx.iter().enumerate() {
                    for (p, &j) in row.iter().enumerate() {
                        let src = &g[(b * tp + p) * inner..(b * tp + p + 1) * inner];
                        let d = (b * s[1] + j) * inner;
                        gx[d..d + inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                res.push((*x, gx));
            }
            Op::SelectiveScan { inputs, states } => {
                let [x, delta, a, b, c, d] = *inputs;
                let dims = scan::ScanDims::infer(
                    self.shape(x),
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c),
                    self.shape(d),
                )
                .expect("validated in forward");
                let si = scan::ScanInputs {
                    dims,
                    x: self.val(x),
                    delta: self.val(delta),
                    a: self.val(a),
                    b: self.val(b),
                    c: self.val(c),
                    d: self.val(d),
                };
                let grads = scan::selective_scan_backward(&si, states, g);
                for (v, gv) in inputs.iter().zip(grads) {
                    res.push((*v, gv));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * k + l] -= scale;
                }
                res.push((*logits, gl));
            }
        }
        res
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(Vec<usize>, usize, usize, usize)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(shape_err!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(shape_err!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
    }
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let batch = if ba == bb || bb.is_empty() {
        ba.to_vec()
    } else if ba.is_empty() {
        bb.to_vec()
    } else {
        return Err(shape_err!("matmul batch dimensions not broadcastable: {sa:?} x {sb:?}"));
    };
    Ok((batch, m, k, n))
}

#[cfg(test)]
mod tests;

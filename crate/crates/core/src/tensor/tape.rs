//! Recording tape for reverse-mode differentiation.
//!
//! Every forward primitive appends a node holding its value and the operand
//! ids; operands always precede their consumers, so a reverse sweep over the
//! node list is a valid topological order. Gradients accumulate additively
//! over fan-out. A tape is built fresh for every training step.

use super::ops::{self, BroadcastIndex};
use super::{Tensor, LAYER_NORM_EPS, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ArcMargin { x: Var, margin: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    Cosine(Var, Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    Dot(Var, Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, indices: Vec<usize> },
    ReplaceColumns { x: Var, cols: Vec<usize>, values: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Log1pSumExp { x: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every grad-participating leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownNode(v.0))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, operands: &[Var]) -> Result<Var> {
        let value = finite(name, value)?;
        let rg = self.any_grad(operands);
        Ok(self.push(value, op, rg))
    }

    /// Registers a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let value = finite("leaf", value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.node(a)?;
        self.node(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = ops::broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("{sa:?} vs {sb:?}")))?;
        let ia = BroadcastIndex::new(&out, &sa);
        let ib = BroadcastIndex::new(&out, &sb);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let n: usize = out.iter().product();
        let data: Vec<f64> = match (&ia, &ib) {
            (BroadcastIndex::Identity, BroadcastIndex::Identity) => {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            }
            _ => (0..n).map(|i| f(da[ia.at(i)], db[ib.at(i)])).collect(),
        };
        let value = Tensor::new(out, data)?;
        self.record(name, value, op, &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.node(x)?.value.clone();
        let shape = t.shape().to_vec();
        let data = t.into_data().into_iter().map(|v| v * c).collect();
        self.record("scale", Tensor::new(shape, data)?, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.node(x)?.value.clone();
        let shape = t.shape().to_vec();
        let data = t.into_data().into_iter().map(|v| v + c).collect();
        self.record("add_scalar", Tensor::new(shape, data)?, Op::AddScalar(x), &[x])
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        self.node(a)?;
        self.node(w)?;
        let sa = self.shape(a).to_vec();
        let sw = self.shape(w).to_vec();
        if sa.is_empty() || sw.len() != 2 || sa[sa.len() - 1] != sw[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sw:?}")));
        }
        let k = sw[0];
        let n = sw[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        ops::gemm(m, k, n, self.value(a).data(), self.value(w).data(), &mut out, false, false, 0.0);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.record("matmul", value, Op::MatMul(a, w), &[a, w])
    }

    /// Batched product `[b, m, k] x [b, k, p]`, or `[b, m, k] x [b, p, k]^T`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.node(a)?;
        self.node(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; bs * m * p];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for i in 0..bs {
            ops::gemm(
                m,
                k,
                p,
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * p..(i + 1) * k * p],
                &mut out[i * m * p..(i + 1) * m * p],
                false,
                trans_b,
                0.0,
            );
        }
        let value = Tensor::new(vec![bs, m, p], out)?;
        self.record("batch_matmul", value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.node(x)?;
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let (data, out_shape) = ops::permute(self.value(x).data(), &shape, axes);
        let value = Tensor::new(out_shape, data)?;
        self.record("permute", value, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.node(x)?.value.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r}")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.node(x)?.value.clone().reshape(shape)?;
        self.record("reshape", t, Op::Reshape(x), &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = &self.node(x)?.value;
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.record(name, Tensor::new(shape, data)?, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, ops::gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// Square root of `max(x, 0)`; the derivative at zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    /// Elementwise `cos(acos(x) + margin)` with the linear fallback past pi.
    pub fn arc_margin(&mut self, x: Var, margin: f64) -> Result<Var> {
        self.unary("arc_margin", x, |c| ops::arc_margin(c, margin), Op::ArcMargin { x, margin })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.node(x)?;
        self.node(gamma)?;
        self.node(beta)?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank 0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("{shape:?} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.record(
            "layer_norm",
            value,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let shape = t.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "rank 0 input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.record("softmax", Tensor::new(shape, out)?, Op::Softmax(x), &[x])
    }

    /// `x / max(|x|, eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let shape = t.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize", "rank 0 input"))?;
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = super::norm(row);
            norms.push(n);
            let den = n.max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= den;
            }
        }
        self.record("l2_normalize", Tensor::new(shape, out)?, Op::L2Normalize { x, norms }, &[x])
    }

    /// Cosine similarity over the last axis of two equally shaped tensors,
    /// using the zero-vector rule of [`super::cosine_similarity`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.node(a)?;
        self.node(b)?;
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) || shape.is_empty() {
            return Err(Error::shape("cosine", format!("{shape:?} vs {:?}", self.shape(b))));
        }
        let d = *shape.last().unwrap();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let out: Vec<f64> = da
            .chunks(d)
            .zip(db.chunks(d))
            .map(|(u, v)| super::cosine_similarity(u, v))
            .collect();
        let out_shape = ops::without_axis(&shape, shape.len() - 1);
        let value = Tensor::new(out_shape, out)?;
        self.record("cosine", value, Op::Cosine(a, b), &[a, b])
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.node(x)?.value.shape().to_vec();
        ops::check_axis(name, &shape, axis)?;
        let (outer, n, inner) = ops::axis_split(&shape, axis);
        Ok((ops::without_axis(&shape, axis), outer, n, inner))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, n, inner) = self.reduce_axis("sum_axis", x, axis)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xs[base + i];
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.record("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, n, inner) = self.reduce_axis("mean_axis", x, axis)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xs[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let value = Tensor::new(out_shape, out)?;
        self.record("mean_axis", value, Op::MeanAxis { x, axis }, &[x])
    }

    /// Maximum over `axis`; the gradient routes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, n, inner) = self.reduce_axis("max_axis", x, axis)?;
        let xs = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    let v = xs[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.record("max_axis", value, Op::MaxAxis { x, argmax }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record("mean", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Inner product of two vectors of equal length.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.node(a)?;
        self.node(b)?;
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::shape("dot", format!("{:?} . {:?}", self.shape(a), self.shape(b))));
        }
        let s = super::dot(self.value(a).data(), self.value(b).data());
        self.record("dot", Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.node(first)?.value.shape().to_vec();
        ops::check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.node(v)?.value.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = ops::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.record("concat", value, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        ops::check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, n, inner) = ops::axis_split(&shape, axis);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * n + start) * inner;
            out.extend_from_slice(&xs[b..b + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.record("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    /// Picks flat-indexed entries of `x` into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.node(x)?.value;
        if indices.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::shape("gather", format!("index {bad} of {}", t.len())));
        }
        let out: Vec<f64> = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::from_vec(out);
        self.record("gather", value, Op::Gather { x, indices: indices.to_vec() }, &[x])
    }

    /// Copy of `x: [rows, cols]` with entry `(i, cols[i])` replaced by `values[i]`.
    pub fn replace_columns(&mut self, x: Var, cols: &[usize], values: Var) -> Result<Var> {
        self.node(x)?;
        self.node(values)?;
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || cols.len() != shape[0] || self.shape(values) != [shape[0]] {
            return Err(Error::shape(
                "replace_columns",
                format!("{shape:?} with {} cols and values {:?}", cols.len(), self.shape(values)),
            ));
        }
        let c = shape[1];
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let mut out = self.value(x).data().to_vec();
        let vals = self.value(values).data();
        for (i, &j) in cols.iter().enumerate() {
            out[i * c + j] = vals[i];
        }
        let value = Tensor::new(shape, out)?;
        self.record(
            "replace_columns",
            value,
            Op::ReplaceColumns { x, cols: cols.to_vec(), values },
            &[x, values],
        )
    }

    /// Mean softmax cross-entropy of `logits: [rows, classes]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.node(logits)?.value;
        let shape = t.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", format!("{shape:?} with {} labels", labels.len())));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let lse = mx + s.ln();
            loss += lse - t.data()[i * c + labels[i]];
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        self.record(
            "cross_entropy",
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// `log(1 + sum_j mask_j exp(x_j))` over the last axis, stabilized.
    pub fn log1p_sum_exp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = &self.node(x)?.value;
        let shape = t.shape().to_vec();
        if shape.is_empty() || mask.len() != t.len() {
            return Err(Error::shape("log1p_sum_exp", format!("{shape:?} with mask of {}", mask.len())));
        }
        let d = *shape.last().unwrap();
        let out: Vec<f64> = t
            .data()
            .chunks(d)
            .zip(mask.chunks(d))
            .map(|(row, m)| ops::log1p_sum_exp(row, m))
            .collect();
        let value = Tensor::new(ops::without_axis(&shape, shape.len() - 1), out)?;
        self.record("log1p_sum_exp", value, Op::Log1pSumExp { x, mask: mask.to_vec() }, &[x])
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::shape("backward", format!("loss has shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => Some(Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let ga = self.unbroadcast(g, out.shape(), *a, |_| 1.0);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.unbroadcast(g, out.shape(), *b, |_| sign);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let ib = BroadcastIndex::new(out.shape(), self.shape(*b));
                let ia = BroadcastIndex::new(out.shape(), self.shape(*a));
                if self.wants(*a) {
                    let vb = self.value(*b).data();
                    let ga = self.unbroadcast(g, out.shape(), *a, |i| vb[ib.at(i)]);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let va = self.value(*a).data();
                    let gb = self.unbroadcast(g, out.shape(), *b, |i| va[ia.at(i)]);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                accumulate(grads, *x, g.to_vec());
            }
            Op::MatMul(a, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = g.len() / n;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    ops::gemm(m, n, k, g, self.value(*w).data(), &mut ga, false, true, 0.0);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; k * n];
                    ops::gemm(k, m, n, self.value(*a).data(), g, &mut gw, true, false, 0.0);
                    accumulate(grads, *w, gw);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let p = out.shape()[2];
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                if self.wants(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        // ga = g . op(b)^T
                        ops::gemm(
                            m,
                            p,
                            k,
                            &g[i * m * p..(i + 1) * m * p],
                            &db[i * k * p..(i + 1) * k * p],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                            !trans_b,
                            0.0,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bs * k * p];
                    for i in 0..bs {
                        let ga_slice = &da[i * m * k..(i + 1) * m * k];
                        let g_slice = &g[i * m * p..(i + 1) * m * p];
                        let dst = &mut gb[i * k * p..(i + 1) * k * p];
                        if *trans_b {
                            // gb [p, k] = g^T . a
                            ops::gemm(p, m, k, g_slice, ga_slice, dst, true, false, 0.0);
                        } else {
                            // gb [k, p] = a^T . g
                            ops::gemm(k, m, p, ga_slice, g_slice, dst, true, false, 0.0);
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Permute { x, axes } => {
                let (back, _) = ops::permute(g, out.shape(), &ops::inverse_axes(axes));
                accumulate(grads, *x, back);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(g, &v)| g * ops::gelu_grad(v)).collect());
            }
            Op::Exp(x) => {
                accumulate(grads, *x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect());
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(g, v)| g / v).collect());
            }
            Op::Sqrt(x) => {
                accumulate(
                    grads,
                    *x,
                    g.iter().zip(out.data()).map(|(g, &y)| if y > 0.0 { 0.5 * g / y } else { 0.0 }).collect(),
                );
            }
            Op::ArcMargin { x, margin } => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(g, &c)| g * ops::arc_margin_grad(c, *margin)).collect());
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] = is * (dh - inv_d * s1 - hr[j] * inv_d * s2);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (i, (gi, hi)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gi * hi;
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![0.0; d];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                    accumulate(grads, *beta, gb);
                }
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let d = *out.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &out.data()[r * d..(r + 1) * d];
                    let dst = &mut gx[r * d..(r + 1) * d];
                    if n >= NORM_EPS {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] = (gr[j] - yr[j] * s) / n;
                        }
                    } else {
                        for j in 0..d {
                            dst[j] = gr[j] / NORM_EPS;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Cosine(a, b) => {
                let d = *self.shape(*a).last().unwrap();
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for (r, gr) in g.iter().enumerate() {
                    let u = &da[r * d..(r + 1) * d];
                    let v = &db[r * d..(r + 1) * d];
                    let nu = super::norm(u);
                    let nv = super::norm(v);
                    if nu < NORM_EPS || nv < NORM_EPS {
                        continue;
                    }
                    let dt = super::dot(u, v);
                    let den = nu * nv + NORM_EPS;
                    for j in 0..d {
                        ga[r * d + j] = gr * (v[j] / den - dt * nv * u[j] / (nu * den * den));
                        gb[r * d + j] = gr * (u[j] / den - dt * nu * v[j] / (nv * den * den));
                    }
                }
                if self.wants(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = ops::axis_split(shape, *axis);
                let f = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / n as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g[o * inner + i] * f;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxAxis { x, argmax, .. } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    gx[src] += gi;
                }
                accumulate(grads, *x, gx);
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let f = if matches!(node.op, Op::MeanAll(_)) { g[0] / n as f64 } else { g[0] };
                accumulate(grads, *x, vec![f; n]);
            }
            Op::Dot(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, self.value(*b).data().iter().map(|v| v * g[0]).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).data().iter().map(|v| v * g[0]).collect());
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = ops::axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let b = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[b..b + n * inner]);
                        }
                        accumulate(grads, v, gv);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = ops::axis_split(shape, *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let b = (o * n + start) * inner;
                    gx[b..b + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather { x, indices } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (gi, &src) in g.iter().zip(indices) {
                    gx[src] += gi;
                }
                accumulate(grads, *x, gx);
            }
            Op::ReplaceColumns { x, cols, values } => {
                let c = out.shape()[1];
                if self.wants(*x) {
                    let mut gx = g.to_vec();
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] = 0.0;
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*values) {
                    let gv = cols.iter().enumerate().map(|(i, &j)| g[i * c + j]).collect();
                    accumulate(grads, *values, gv);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let s = g[0] / b as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * c + y] -= s;
                }
                accumulate(grads, *logits, gx);
            }
            Op::Log1pSumExp { x, mask } => {
                let xv = self.value(*x).data();
                let d = *self.shape(*x).last().unwrap();
                let mut gx = vec![0.0; xv.len()];
                for (r, (gr, lr)) in g.iter().zip(out.data()).enumerate() {
                    for j in 0..d {
                        let i = r * d + j;
                        if mask[i] {
                            gx[i] = gr * (xv[i] - lr).exp();
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }

    /// Sums `g * factor(i)` (indexed in output space) back onto the shape of `target`.
    fn unbroadcast(&self, g: &[f64], out_shape: &[usize], target: Var, factor: impl Fn(usize) -> f64) -> Vec<f64> {
        let ts = self.shape(target);
        let idx = BroadcastIndex::new(out_shape, ts);
        let mut acc = vec![0.0; self.value(target).len()];
        match idx {
            BroadcastIndex::Identity => {
                for (i, (a, gi)) in acc.iter_mut().zip(g).enumerate() {
                    *a = gi * factor(i);
                }
            }
            _ => {
                for (i, gi) in g.iter().enumerate() {
                    acc[idx.at(i)] += gi * factor(i);
                }
            }
        }
        acc
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

use std::collections::HashMap;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::params::{Gradients, ParamId, ParamStore};
use super::{Real, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Val<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    BmmNt { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Gelu(usize),
    LayerNorm { a: usize, rstd: Vec<T> },
    Softmax(usize),
    LogSoftmax(usize),
    Extreme { a: usize, n: usize, inner: usize, arg: Vec<usize> },
    MeanAxis { a: usize, outer: usize, n: usize, inner: usize },
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, outer: usize, widths: Vec<usize> },
    Slice { a: usize, outer: usize, width: usize, offset: usize, len: usize },
    GatherRows { a: usize, idx: Vec<usize>, row: usize },
    PairwiseSqDist { a: usize, b: usize, batch: usize, n: usize, m: usize, d: usize },
}

struct Node<T> {
    value: Val<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use reverse-mode tape over parameters borrowed from a store.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// valid reverse topological order.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    consumed: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Input offsets of every output element of a permutation, in output order.
fn permute_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    offs
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            consumed: false,
        }
    }

    /// Drops every node so the graph can be rebuilt for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.val(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v.0).shape()
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        match &self.nodes[i].value {
            Val::Owned(t) => t,
            Val::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Val::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Val::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            a: a.to_vec(),
            b: b.to_vec(),
        }
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.val(a.0).data(), self.val(b.0).data(), &mut out);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a: a.0, b: b.0, m, k, n }, ng))
    }

    /// `[m,k] · [n,k]ᵀ`, the layout of a linear layer with `[out, in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Self::mismatch("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.val(a.0).data(), self.val(b.0).data(), &mut out);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt { a: a.0, b: b.0, m, k, n }, ng))
    }

    /// `[B,m,k] · [B,k,n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Self::mismatch("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.val(a.0).data(), self.val(b.0).data());
        for i in 0..batch {
            gemm_nn(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        let op = Op::Bmm { a: a.0, b: b.0, batch, m, k, n };
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, op, ng))
    }

    /// `[B,m,k] · [B,n,k]ᵀ`
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Self::mismatch("bmm_nt", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.val(a.0).data(), self.val(b.0).data());
        for i in 0..batch {
            gemm_nt(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                &db[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        let op = Op::BmmNt { a: a.0, b: b.0, batch, m, k, n };
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, op, ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape() != tb.shape() {
            return Err(Self::mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn bcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || tb.is_empty() {
            return Err(Self::mismatch(name, sa, sb));
        }
        let w = tb.len();
        let db = tb.data();
        let data = ta
            .data()
            .chunks(w)
            .flat_map(|row| row.iter().zip(db).map(|(x, y)| f(*x, *y)))
            .collect();
        let t = Tensor::new(sa, data)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, op, ng))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bcast(a, b, "add_bcast", |x, y| x + y, Op::AddBcast(a.0, b.0))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bcast(a, b, "mul_bcast", |x, y| x * y, Op::MulBcast(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let ta = self.val(a.0);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| f(*x)).collect(),
        };
        let ng = self.ng(a.0);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        self.unary(
            a,
            |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a.0),
        )
    }

    /// Normalises the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let ta = self.val(a.0);
        let w = *ta.shape().last().ok_or_else(|| TensorError::BadShape {
            op: "layer_norm",
            shape: vec![],
            reason: "needs at least one axis".into(),
        })?;
        let nf = T::lit(w as f64);
        let eps = T::lit(eps);
        let mut data = Vec::with_capacity(ta.len());
        let mut rstd = Vec::with_capacity(ta.len() / w.max(1));
        for row in ta.data().chunks(w) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|x| (*x - mean) * (*x - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|x| (*x - mean) * r));
        }
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::LayerNorm { a: a.0, rstd }, ng))
    }

    fn last_axis(&self, a: Var, op: &'static str) -> Result<usize, TensorError> {
        match self.shape(a).last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(TensorError::BadShape {
                op,
                shape: self.shape(a).to_vec(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let w = self.last_axis(a, "softmax")?;
        let ta = self.val(a.0);
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(w) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|x| (*x - mx).exp()));
            let s: T = data[start..].iter().copied().sum();
            for v in &mut data[start..] {
                *v /= s;
            }
        }
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Softmax(a.0), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let w = self.last_axis(a, "log_softmax")?;
        let ta = self.val(a.0);
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(w) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|x| (*x - mx).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|x| *x - lse));
        }
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::LogSoftmax(a.0), ng))
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<(), TensorError> {
        let s = self.shape(a);
        if axis >= s.len() || s[axis] == 0 {
            return Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                reason: format!("axis {axis} missing or empty"),
            });
        }
        Ok(())
    }

    fn extreme(&mut self, a: Var, axis: usize, take_max: bool) -> Result<Var, TensorError> {
        self.check_axis(a, axis, if take_max { "max_axis" } else { "min_axis" })?;
        let ta = self.val(a.0);
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let d = ta.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = d[o * n * inner + i];
                for j in 1..n {
                    let v = d[(o * n + j) * inner + i];
                    if (take_max && v > bv) || (!take_max && v < bv) {
                        best = j;
                        bv = v;
                    }
                }
                out.push(bv);
                arg.push(best);
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Extreme { a: a.0, n, inner, arg }, ng))
    }

    /// Maximum over `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.extreme(a, axis, true)
    }

    /// Minimum over `axis`; the gradient goes to the first minimal element.
    pub fn min_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.extreme(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(a, axis, "mean_axis")?;
        let ta = self.val(a.0);
        let (outer, n, inner) = split_axis(ta.shape(), axis);
        let d = ta.data();
        let nf = T::lit(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += *s;
                }
            }
        }
        for v in &mut out {
            *v /= nf;
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::MeanAxis { a: a.0, outer, n, inner }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a.0).data().iter().copied().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.val(a.0);
        if ta.is_empty() {
            return Err(TensorError::BadShape {
                op: "mean",
                shape: ta.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let s = ta.data().iter().copied().sum::<T>() / T::lit(ta.len() as f64);
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a.0), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.val(a.0).clone().reshaped(shape)?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Reshape(a.0), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Self::mismatch("permute", &s, perm));
        }
        let offs = permute_offsets(&s, perm);
        let d = self.val(a.0).data();
        let data = offs.iter().map(|&o| d[o]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Permute { a: a.0, perm: perm.to_vec() }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::BadShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(Self::mismatch("concat", &first, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == first.len();
            if !same_rank || (0..s.len()).any(|i| i != axis && s[i] != first[i]) {
                return Err(Self::mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p.0).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|p| self.ng(p.0));
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.0).collect(),
            outer,
            widths,
        };
        Ok(self.push(t, op, ng))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::BadShape {
                op: "slice",
                shape: s,
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let width = n * inner;
        let d = self.val(a.0).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[o * width + start * inner..o * width + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(a.0);
        let op = Op::Slice {
            a: a.0,
            outer,
            width,
            offset: start * inner,
            len: len * inner,
        };
        Ok(self.push(t, op, ng))
    }

    /// Rows (entries of axis 0) picked by `idx`; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                shape: s,
                reason: "needs at least one axis".into(),
            });
        }
        let row: usize = s[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                extent: s[0],
            });
        }
        let d = self.val(a.0).data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::GatherRows { a: a.0, idx: idx.to_vec(), row }, ng))
    }

    /// Squared distances between the point sets `a [B,n,d]` and `b [B,m,d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Self::mismatch("pairwise_sq_dist", &sa, &sb));
        }
        let (batch, n, m, d) = (sa[0], sa[1], sb[1], sa[2]);
        let (da, db) = (self.val(a.0).data(), self.val(b.0).data());
        let mut out = Vec::with_capacity(batch * n * m);
        for bi in 0..batch {
            for i in 0..n {
                let p = &da[(bi * n + i) * d..(bi * n + i + 1) * d];
                for j in 0..m {
                    let q = &db[(bi * m + j) * d..(bi * m + j + 1) * d];
                    out.push(p.iter().zip(q).map(|(x, y)| (*x - *y) * (*x - *y)).sum());
                }
            }
        }
        let t = Tensor::new(&[batch, n, m], out)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        let op = Op::PairwiseSqDist { a: a.0, b: b.0, batch, n, m, d };
        Ok(self.push(t, op, ng))
    }

    /// `x · wᵀ + b` over the last axis of a 2-D input.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var, TensorError> {
        let wv = self.param(w);
        let y = self.matmul_nt(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.add_bcast(y, bv)
            }
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar loss. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let y = self.val(i);
        // accumulation buffer of input `j`, or None when it needs no gradient
        macro_rules! buf {
            ($j:expr) => {{
                let j = $j;
                if self.nodes[j].needs_grad {
                    let len = self.val(j).len();
                    Some(grads[j].get_or_insert_with(|| vec![T::zero(); len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {
                let t = Tensor::new(y.shape(), g.to_vec())?;
                out.inputs.insert(i, t);
            }
            Op::Param(id) => {
                let slot = &mut out.params[id.0];
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(Tensor::new(y.shape(), g.to_vec())?),
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                if let Some(ga) = buf!(a) {
                    // dA = dY · Bᵀ
                    gemm_nt(m, n, k, g, vb, ga);
                }
                if let Some(gb) = buf!(b) {
                    // dB = Aᵀ · dY
                    gemm_tn(k, m, n, va, g, gb);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                if let Some(ga) = buf!(a) {
                    // dA = dY · B
                    gemm_nn(m, n, k, g, vb, ga);
                }
                if let Some(gb) = buf!(b) {
                    // dB = dYᵀ · A
                    gemm_tn(n, m, k, g, va, gb);
                }
            }
            &Op::Bmm { a, b, batch, m, k, n } => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                if let Some(ga) = buf!(a) {
                    for s in 0..batch {
                        gemm_nt(m, n, k, &g[s * m * n..][..m * n], &vb[s * k * n..][..k * n], &mut ga[s * m * k..][..m * k]);
                    }
                }
                if let Some(gb) = buf!(b) {
                    for s in 0..batch {
                        gemm_tn(k, m, n, &va[s * m * k..][..m * k], &g[s * m * n..][..m * n], &mut gb[s * k * n..][..k * n]);
                    }
                }
            }
            &Op::BmmNt { a, b, batch, m, k, n } => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                if let Some(ga) = buf!(a) {
                    for s in 0..batch {
                        gemm_nn(m, n, k, &g[s * m * n..][..m * n], &vb[s * n * k..][..n * k], &mut ga[s * m * k..][..m * k]);
                    }
                }
                if let Some(gb) = buf!(b) {
                    for s in 0..batch {
                        gemm_tn(n, m, k, &g[s * m * n..][..m * n], &va[s * m * k..][..m * k], &mut gb[s * n * k..][..n * k]);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = buf!(a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = buf!(b) {
                    axpy(T::one(), g, gb);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = buf!(a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = buf!(b) {
                    axpy(-T::one(), g, gb);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                if let Some(ga) = buf!(a) {
                    for ((d, gv), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *d += *gv * *bv;
                    }
                }
                if let Some(gb) = buf!(b) {
                    for ((d, gv), av) in gb.iter_mut().zip(g).zip(va) {
                        *d += *gv * *av;
                    }
                }
            }
            &Op::AddBcast(a, b) => {
                if let Some(ga) = buf!(a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = buf!(b) {
                    let w = gb.len();
                    for row in g.chunks(w) {
                        axpy(T::one(), row, gb);
                    }
                }
            }
            &Op::MulBcast(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                let w = vb.len();
                if let Some(ga) = buf!(a) {
                    for (grow, drow) in g.chunks(w).zip(ga.chunks_mut(w)) {
                        for ((d, gv), bv) in drow.iter_mut().zip(grow).zip(vb) {
                            *d += *gv * *bv;
                        }
                    }
                }
                if let Some(gb) = buf!(b) {
                    for (grow, arow) in g.chunks(w).zip(va.chunks(w)) {
                        for ((d, gv), av) in gb.iter_mut().zip(grow).zip(arow) {
                            *d += *gv * *av;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = buf!(a) {
                    axpy(s, g, ga);
                }
            }
            &Op::Relu(a) => {
                let va = self.val(a).data();
                if let Some(ga) = buf!(a) {
                    for ((d, gv), x) in ga.iter_mut().zip(g).zip(va) {
                        if *x > T::zero() {
                            *d += *gv;
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                let va = self.val(a).data();
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                if let Some(ga) = buf!(a) {
                    for ((d, gv), &x) in ga.iter_mut().zip(g).zip(va) {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let dudx = c * (T::one() + three * k * x * x);
                        let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dudx;
                        *d += *gv * dy;
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let w = *y.shape().last().unwrap_or(&1);
                let nf = T::lit(w as f64);
                if let Some(ga) = buf!(*a) {
                    for (r, ((grow, yrow), drow)) in
                        g.chunks(w).zip(y.data().chunks(w)).zip(ga.chunks_mut(w)).enumerate()
                    {
                        let sg: T = grow.iter().copied().sum();
                        let sgy = dot(grow, yrow);
                        let scale = rstd[r] / nf;
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += scale * (nf * *gv - sg - *yv * sgy);
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                let w = *y.shape().last().unwrap_or(&1);
                if let Some(ga) = buf!(a) {
                    for ((grow, yrow), drow) in g.chunks(w).zip(y.data().chunks(w)).zip(ga.chunks_mut(w)) {
                        let s = dot(grow, yrow);
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += *yv * (*gv - s);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let w = *y.shape().last().unwrap_or(&1);
                if let Some(ga) = buf!(a) {
                    for ((grow, yrow), drow) in g.chunks(w).zip(y.data().chunks(w)).zip(ga.chunks_mut(w)) {
                        let s: T = grow.iter().copied().sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += *gv - yv.exp() * s;
                        }
                    }
                }
            }
            Op::Extreme { a, n, inner, arg } => {
                let (n, inner) = (*n, *inner);
                if let Some(ga) = buf!(*a) {
                    for (idx, (gv, j)) in g.iter().zip(arg).enumerate() {
                        let (o, i) = (idx / inner, idx % inner);
                        ga[(o * n + j) * inner + i] += *gv;
                    }
                }
            }
            &Op::MeanAxis { a, outer, n, inner } => {
                let nf = T::one() / T::lit(n as f64);
                if let Some(ga) = buf!(a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            axpy(nf, src, &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner]);
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                if let Some(ga) = buf!(a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::MeanAll(a) => {
                let len = self.val(a).len();
                let s = g[0] / T::lit(len as f64);
                if let Some(ga) = buf!(a) {
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = buf!(a) {
                    axpy(T::one(), g, ga);
                }
            }
            Op::Permute { a, perm } => {
                let in_shape = self.val(*a).shape().to_vec();
                if let Some(ga) = buf!(*a) {
                    for (gv, o) in g.iter().zip(permute_offsets(&in_shape, perm)) {
                        ga[o] += *gv;
                    }
                }
            }
            Op::Concat { parts, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (p, w) in parts.iter().zip(widths) {
                    if let Some(gp) = buf!(*p) {
                        for o in 0..*outer {
                            axpy(T::one(), &g[o * total + off..o * total + off + w], &mut gp[o * w..(o + 1) * w]);
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice { a, outer, width, offset, len } => {
                if let Some(ga) = buf!(a) {
                    for o in 0..outer {
                        axpy(T::one(), &g[o * len..(o + 1) * len], &mut ga[o * width + offset..o * width + offset + len]);
                    }
                }
            }
            Op::GatherRows { a, idx, row } => {
                let row = *row;
                if let Some(ga) = buf!(*a) {
                    for (k, &r) in idx.iter().enumerate() {
                        axpy(T::one(), &g[k * row..(k + 1) * row], &mut ga[r * row..(r + 1) * row]);
                    }
                }
            }
            &Op::PairwiseSqDist { a, b, batch, n, m, d } => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                let two = T::lit(2.0);
                let need_a = self.nodes[a].needs_grad;
                let need_b = self.nodes[b].needs_grad;
                let mut ga_local = if need_a { vec![T::zero(); va.len()] } else { Vec::new() };
                let mut gb_local = if need_b { vec![T::zero(); vb.len()] } else { Vec::new() };
                for bi in 0..batch {
                    for i in 0..n {
                        let pa = (bi * n + i) * d;
                        for j in 0..m {
                            let gv = g[(bi * n + i) * m + j];
                            if gv == T::zero() {
                                continue;
                            }
                            let pb = (bi * m + j) * d;
                            for c in 0..d {
                                let diff = two * gv * (va[pa + c] - vb[pb + c]);
                                if need_a {
                                    ga_local[pa + c] += diff;
                                }
                                if need_b {
                                    gb_local[pb + c] -= diff;
                                }
                            }
                        }
                    }
                }
                if let Some(ga) = buf!(a) {
                    axpy(T::one(), &ga_local, ga);
                }
                if let Some(gb) = buf!(b) {
                    axpy(T::one(), &gb_local, gb);
                }
            }
        }
        Ok(())
    }
}

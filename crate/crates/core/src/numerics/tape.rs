//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its nodes in execution
//! order. Nodes are addressed by [`Var`] handles; since a node can only be
//! built from nodes that already exist, the record is topologically sorted
//! and the backward sweep is a single reverse pass over it.
//!
//! Binary element-wise ops broadcast their right operand when it is a single
//! value or when its shape (ignoring leading unit extents) matches a trailing
//! suffix of the left operand's shape.

use std::fmt;
use std::sync::Arc;

use super::gemm::{gemm, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive implemented outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the op object carries whatever it needs to map the
/// output gradient back onto its inputs.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradient contributions for each input (same order as recorded).
    /// `needs[i]` tells whether input `i` wants a gradient; `None` means
    /// "no contribution".
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[Real],
        needs: &[bool],
    ) -> Vec<Option<Vec<Real>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// Right operand repeats every `block` values of the left operand.
    Rows(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Softplus,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, Real),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumLast(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Clamp(Var, Arc<Vec<Real>>, Arc<Vec<Real>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("record", &self.record)
            .finish()
    }
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
    lens: Vec<usize>,
    leaves: Vec<bool>,
}

impl Gradients {
    /// Gradient of a node. Leaves that require a gradient but were not
    /// reached by the sweep report zeros; other unreached nodes report `None`.
    pub fn get(&self, v: Var) -> Option<std::borrow::Cow<'_, [Real]>> {
        match &self.grads[v.0] {
            Some(g) => Some(std::borrow::Cow::Borrowed(g.as_slice())),
            None if self.leaves[v.0] => Some(std::borrow::Cow::Owned(vec![0.0; self.lens[v.0]])),
            None => None,
        }
    }

    /// Takes ownership of a leaf gradient, zero-filled if it was not reached.
    pub fn take(&mut self, v: Var) -> Option<Vec<Real>> {
        match self.grads[v.0].take() {
            Some(g) => Some(g),
            None if self.leaves[v.0] => Some(vec![0.0; self.lens[v.0]]),
            None => None,
        }
    }
}

fn add_into(dst: &mut Option<Vec<Real>>, src: Vec<Real>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let b_len: usize = b.iter().product();
    if b_len == 1 {
        return Ok(Broadcast::Scalar);
    }
    let trimmed: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= a.len() && a[a.len() - trimmed.len()..] == trimmed[..] {
        return Ok(Broadcast::Rows(b_len));
    }
    Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")))
}

fn b_index(kind: Broadcast, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Rows(block) => i % block,
    }
}

fn reduce_to_b(kind: Broadcast, b_len: usize, g: impl Iterator<Item = (usize, Real)>) -> Vec<Real> {
    let mut out = vec![0.0; b_len];
    for (i, v) in g {
        out[b_index(kind, i)] += v;
    }
    out
}

fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: Real) -> Real {
    softplus(x)
}

pub(crate) fn sigmoid_scalar(x: Real) -> Real {
    sigmoid(x)
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Tape {
    /// Tape that records gradients for any leaf marked as requiring them.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only tape: every node is constant and nothing is saved for
    /// the backward sweep.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Const };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let needs_grad = self.record;
        self.nodes.push(Node {
            value,
            op: if needs_grad { Op::Leaf } else { Op::Const },
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Const, &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            View::row_major(self.value(a).data(), k),
            View::row_major(self.value(b).data(), n),
            &mut out,
            0.0,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: impl FnOnce(Broadcast) -> Op,
    ) -> Result<Var> {
        let kind = broadcast_kind(name, self.value(a).shape(), self.value(b).shape())?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<Real> = av.iter().enumerate().map(|(i, &x)| f(x, bv[b_index(kind, i)])).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, Tensor::from_parts(shape, out), op(kind), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |k| Op::Add(a, b, k))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |k| Op::Sub(a, b, k))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |k| Op::Mul(a, b, k))
    }

    pub fn scale(&mut self, a: Var, factor: Real) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: Real) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x + offset).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("add_scalar", Tensor::from_parts(shape, out), Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let (name, f): (&'static str, fn(Real) -> Real) = match kind {
            Unary::Sin => ("sin", Real::sin),
            Unary::Cos => ("cos", Real::cos),
            Unary::Exp => ("exp", Real::exp),
            Unary::Ln => ("ln", Real::ln),
            Unary::Sqrt => ("sqrt", Real::sqrt),
            Unary::Softplus => ("softplus", softplus),
            Unary::Sigmoid => ("sigmoid", sigmoid),
            Unary::Relu => ("relu", |x: Real| x.max(0.0)),
        };
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, Tensor::from_parts(shape, out), Op::Unary(a, kind), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Cos)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().ok_or_else(|| Error::shape("softmax", "empty shape"))?;
        if d == 0 {
            return Err(Error::shape("softmax", "zero-length axis"));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = t.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: Real = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: Real = t.data().iter().sum::<Real>() / t.len() as Real;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum over the leading axis: `[m, ...] -> [...]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = t.row_len();
        let mut out = vec![0.0; w];
        for row in t.data().chunks(w.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let shape = if t.shape().len() > 1 {
            t.shape()[1..].to_vec()
        } else {
            vec![1]
        };
        self.push("sum_rows", Tensor::from_parts(shape, out), Op::SumRows(a), &[a])
    }

    /// Sum over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| Error::shape("sum_last", "empty shape"))?;
        if n == 0 {
            return Err(Error::shape("sum_last", "zero-length axis"));
        }
        let out: Vec<Real> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape()[..t.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("sum_last", Tensor::from_parts(shape, out), Op::SumLast(a), &[a])
    }

    /// Selects rows of `a` (leading axis); indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let rows = t.rows();
        let w = t.row_len();
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("row {i} out of {rows}")));
            }
            out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = index.len();
        self.push("gather_rows", Tensor::from_parts(shape, out), Op::GatherRows(a, index.clone()), &[a])
    }

    /// `out[index[i]] += a[i]` into a zero tensor with `rows` leading extent.
    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != index.len() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} rows but {} indices", t.rows(), index.len()),
            ));
        }
        let w = t.row_len();
        let mut out = vec![0.0; rows * w];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(Error::shape("scatter_add_rows", format!("row {i} out of {rows}")));
            }
            for (o, v) in out[i * w..(i + 1) * w].iter_mut().zip(&t.data()[r * w..(r + 1) * w]) {
                *o += v;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows;
        self.push(
            "scatter_add_rows",
            Tensor::from_parts(shape, out),
            Op::ScatterAddRows(a, index),
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_cols", self.value(a))?;
        if start > end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let src = self.value(a).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, w], out),
            Op::SliceCols(a, start, end),
            &[a],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(matrix_dims("concat_cols", self.value(p))?);
        }
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::shape("concat_cols", format!("row counts differ: {dims:?}")));
        }
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, d) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * d.1..(i + 1) * d.1]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let w = self.value(parts[0]).row_len();
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("trailing shapes differ: {:?} vs {:?}", t.shape(), tail),
                ));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        debug_assert_eq!(out.len(), rows * w);
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(
            "concat_rows",
            Tensor::from_parts(shape, out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Clamps each column of the last axis to `[lo[j], hi[j]]`. The
    /// derivative is 1 inside the closed interval and 0 outside it.
    pub fn clamp(&mut self, a: Var, lo: Arc<Vec<Real>>, hi: Arc<Vec<Real>>) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().unwrap_or(&1);
        if lo.len() != n || hi.len() != n {
            return Err(Error::shape(
                "clamp",
                format!("bounds of length {}/{} for last axis {n}", lo.len(), hi.len()),
            ));
        }
        let out = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x.clamp(lo[i % n], hi[i % n]))
            .collect();
        let shape = t.shape().to_vec();
        self.push("clamp", Tensor::from_parts(shape, out), Op::Clamp(a, lo, hi), &[a])
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::shape("layer_norm", "empty shape"))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias of length {}/{} for width {d}", self.value(gamma).len(), self.value(beta).len()),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<Real>() / d as Real;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Records an externally computed primitive.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        let name = op.name();
        self.push(name, output, Op::Custom(op, inputs.to_vec()), inputs)
    }

    /// Backward sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let n = self.value(output).len();
        if n != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, shape is {:?}", self.shape(output)),
            ));
        }
        self.backward_seeded(&[(output, vec![1.0])])
    }

    /// Backward sweep from arbitrary seed gradients on any nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<Real>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::shape(
                    "backward",
                    format!("seed of length {} for node of shape {:?}", g.len(), self.shape(*v)),
                ));
            }
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], g.clone());
            }
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
            leaves: self.nodes.iter().map(|n| matches!(n.op, Op::Leaf)).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        View::row_major(g, n),
                        View::transposed(self.value(*b).data(), n),
                        &mut ga,
                        0.0,
                    );
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        View::transposed(self.value(*a).data(), k),
                        View::row_major(g, n),
                        &mut gb,
                        0.0,
                    );
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    let gb = if *kind == Broadcast::Same {
                        g.iter().map(|v| sign * v).collect()
                    } else {
                        reduce_to_b(*kind, self.value(*b).len(), g.iter().map(|v| sign * v).enumerate())
                    };
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Mul(a, b, kind) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, v)| v * bv[b_index(*kind, i)]).collect();
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let gb = if *kind == Broadcast::Same {
                        g.iter().zip(av).map(|(v, x)| v * x).collect()
                    } else {
                        reduce_to_b(*kind, bv.len(), g.iter().zip(av).map(|(v, x)| v * x).enumerate())
                    };
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Scale(a, f) => add_into(&mut grads[a.0], g.iter().map(|v| v * f).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => add_into(&mut grads[a.0], g.to_vec()),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = out.data();
                let ga: Vec<Real> = match kind {
                    Unary::Sin => g.iter().zip(x).map(|(v, x)| v * x.cos()).collect(),
                    Unary::Cos => g.iter().zip(x).map(|(v, x)| -v * x.sin()).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(v, y)| v * y).collect(),
                    Unary::Ln => g.iter().zip(x).map(|(v, x)| v / x).collect(),
                    Unary::Sqrt => g.iter().zip(y).map(|(v, y)| v * 0.5 / y).collect(),
                    Unary::Softplus => g.iter().zip(x).map(|(v, x)| v * sigmoid(*x)).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(v, y)| v * y * (1.0 - y)).collect(),
                    Unary::Relu => g.iter().zip(x).map(|(v, x)| if *x > 0.0 { *v } else { 0.0 }).collect(),
                };
                add_into(&mut grads[a.0], ga);
            }
            Op::Softmax(a) => {
                let d = *out.shape().last().unwrap();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), or) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        or[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::Sum(a) => add_into(&mut grads[a.0], vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                add_into(&mut grads[a.0], vec![g[0] / n as Real; n]);
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                let w = t.row_len();
                let ga = (0..t.len()).map(|i| g[i % w]).collect();
                add_into(&mut grads[a.0], ga);
            }
            Op::SumLast(a) => {
                let t = self.value(*a);
                let n = *t.shape().last().unwrap();
                let ga = (0..t.len()).map(|i| g[i / n]).collect();
                add_into(&mut grads[a.0], ga);
            }
            Op::GatherRows(a, index) => {
                let t = self.value(*a);
                let w = t.row_len();
                let mut ga = vec![0.0; t.len()];
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in ga[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *o += v;
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::ScatterAddRows(a, index) => {
                let w = self.value(*a).row_len();
                let mut ga = Vec::with_capacity(index.len() * w);
                for &i in index.iter() {
                    ga.extend_from_slice(&g[i * w..(i + 1) * w]);
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let w = end - start;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let m = out.shape()[0];
                let n = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * n + offset..i * n + offset + w]);
                        }
                        add_into(&mut grads[p.0], gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let n = lo.len();
                let ga = g
                    .iter()
                    .zip(x)
                    .enumerate()
                    .map(|(i, (v, x))| {
                        if *x >= lo[i % n] && *x <= hi[i % n] {
                            *v
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(&mut grads[a.0], ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    add_into(&mut grads[gamma.0], gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    add_into(&mut grads[beta.0], gb);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let dn = d as Real;
                    for (r, ((gr, hr), or)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            or[j] = inv_std[r] / dn * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.wants(*v)).collect();
                let contributions = op.backward(&values, out, g, &needs);
                for (v, c) in inputs.iter().zip(contributions) {
                    if let Some(c) = c {
                        if self.wants(*v) {
                            add_into(&mut grads[v.0], c);
                        }
                    }
                }
            }
        }
    }
}

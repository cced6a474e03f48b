use std::rc::Rc;

use super::tensor::{DType, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Sqrt,
    Square,
    Exp,
    Log,
    Abs,
    Sign,
    Asin,
    Acos,
    Asinh,
    Acosh,
    Tanh,
    Gelu,
    Softplus,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    LogSumExp { x: Var, mask: Option<Rc<Vec<bool>>> },
    Clamp { x: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any leaf is upstream of this node.
    grad: bool,
}

/// Ordered record of primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a reverse scan over indices is a
/// reverse topological order. A tape has a single writer; build one per thread.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    dtype: DType,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps flat indices of a broadcast output back to an operand.
enum Broadcast {
    Same,
    Scalar,
    /// Input equals the trailing axes of the output.
    Suffix(usize),
    /// Input equals the leading axes of the output, with size-1 trailing axes.
    Rows(usize),
    General(Vec<usize>),
}

impl Broadcast {
    fn new(out: &[usize], input: &[usize]) -> Self {
        let numel: usize = input.iter().product();
        if out == input {
            return Broadcast::Same;
        }
        if numel == 1 {
            return Broadcast::Scalar;
        }
        let off = out.len() - input.len();
        if out[off..] == *input {
            return Broadcast::Suffix(numel);
        }
        if off == 0 {
            if let Some(lead) = input.iter().rposition(|&d| d != 1) {
                if input[..=lead] == out[..=lead] {
                    return Broadcast::Rows(out[lead + 1..].iter().product());
                }
            }
        }
        let mut in_strides = vec![0usize; out.len()];
        let mut stride = 1;
        for (k, &dim) in input.iter().enumerate().rev() {
            if dim != 1 {
                in_strides[off + k] = stride;
            }
            stride *= dim;
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Broadcast::General(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Suffix(n) => i % n,
            Broadcast::Rows(n) => i / n,
            Broadcast::General(map) => map[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            bail!(Dimension, "cannot broadcast {:?} with {:?}", a, b);
        };
    }
    Ok(out)
}

// The kernels below walk the shared `[k, n]` operand row by row in the outer
// loop so each row is loaded once per call. Every output element still
// accumulates over the reduction index in increasing order.

/// `c[m, n] += a[m, k] @ b[k, n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (cj, bj) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `da[m, k] += dc[m, n] @ b[k, n]^T`
fn gemm_nt_acc(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let drow = &dc[i * n..(i + 1) * n];
            let s: f64 = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
            da[i * k + p] += s;
        }
    }
}

/// `db[k, n] += a[m, k]^T @ dc[m, n]`
fn gemm_tn_acc(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let dbrow = &mut db[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (x, y) in dbrow.iter_mut().zip(&dc[i * n..(i + 1) * n]) {
                *x += aip * y;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Self {
            nodes: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
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

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        // Rounds to the tape precision before the finiteness check, so an f32
        // overflow is reported here.
        let value = Tensor::with_dtype(shape, data, self.dtype)?;
        if let Some(bad) = value.data().iter().find(|x| !x.is_finite()) {
            bail!(Numeric, "non-finite value {} produced by {:?}", bad, op_name(&op));
        }
        let grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::Softmax(x)
            | Op::LogSumExp { x, .. }
            | Op::Clamp { x, .. } => self.nodes[x.0].grad,
            Op::Binary(_, a, b) | Op::MatMul(a, b) => self.nodes[a.0].grad || self.nodes[b.0].grad,
            Op::Concat(parts) => parts.iter().any(|v| self.nodes[v.0].grad),
        };
        self.nodes.push(Node { value, op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (parameter or constant). Leaves have no parents.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape(), t.data().to_vec(), Op::Leaf)
    }

    /// Records data that never needs a gradient; backward skips everything
    /// that depends only on constants.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape(), t.data().to_vec(), Op::Constant)
    }

    /// A rank-0 constant.
    pub fn scalar(&mut self, x: f64) -> Result<Var> {
        self.constant(&Tensor::scalar(x))
    }

    /// A constant holding the current value of `x`, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.constant(&t)
    }

    fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let input = &self.nodes[x.0].value;
        let shape = input.shape().to_vec();
        let src = input.data();
        let data: Vec<f64> = match op {
            Unary::Neg => src.iter().map(|v| -v).collect(),
            Unary::Sqrt => {
                if let Some(v) = src.iter().find(|v| **v < 0.0) {
                    bail!(Numeric, "sqrt of negative value {}", v);
                }
                src.iter().map(|v| v.sqrt()).collect()
            }
            Unary::Square => src.iter().map(|v| v * v).collect(),
            Unary::Exp => src.iter().map(|v| v.exp()).collect(),
            Unary::Log => {
                if let Some(v) = src.iter().find(|v| **v <= 0.0) {
                    bail!(Numeric, "log of non-positive value {}", v);
                }
                src.iter().map(|v| v.ln()).collect()
            }
            Unary::Abs => src.iter().map(|v| v.abs()).collect(),
            Unary::Sign => src
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
                .collect(),
            Unary::Asin | Unary::Acos => {
                if let Some(v) = src.iter().find(|v| v.abs() > 1.0) {
                    bail!(Numeric, "inverse trig argument {} outside [-1, 1]", v);
                }
                match op {
                    Unary::Asin => src.iter().map(|v| v.asin()).collect(),
                    _ => src.iter().map(|v| v.acos()).collect(),
                }
            }
            Unary::Asinh => src.iter().map(|v| v.asinh()).collect(),
            Unary::Acosh => {
                if let Some(v) = src.iter().find(|v| **v < 1.0) {
                    bail!(Numeric, "arccosh argument {} below 1", v);
                }
                src.iter().map(|v| v.acosh()).collect()
            }
            Unary::Tanh => src.iter().map(|v| v.tanh()).collect(),
            Unary::Gelu => src.iter().map(|&v| gelu(v)).collect(),
            Unary::Softplus => src.iter().map(|&v| softplus(v)).collect(),
        };
        self.push(&shape, data, Op::Unary(op, x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }
    /// Sign with zero derivative everywhere.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sign, x)
    }
    pub fn asin(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Asin, x)
    }
    pub fn acos(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Acos, x)
    }
    pub fn asinh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Asinh, x)
    }
    pub fn acosh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Acosh, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }
    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let ia = Broadcast::new(&shape, va.shape());
        let ib = Broadcast::new(&shape, vb.shape());
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let f: fn(f64, f64) -> f64 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = (0..n).map(|i| f(da[ia.at(i)], db[ib.at(i)])).collect();
        self.push(&shape, data, Op::Binary(op, a, b))
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

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let c = self.scalar(s)?;
        self.add(a, c)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let c = self.scalar(s)?;
        self.mul(a, c)
    }

    /// `a[..., n, k] @ b[k, m]` or `a[..., n, k] @ b[..., k, m]` with equal leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            bail!(Dimension, "matmul needs rank >= 2, got {:?} @ {:?}", sa, sb);
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            bail!(Dimension, "matmul inner dims differ: {:?} @ {:?}", sa, sb);
        }
        let lead = &sa[..sa.len() - 2];
        let batches: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([n, m]);
        let mut out = vec![0.0; batches * n * m];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            gemm_acc(da, db, &mut out, batches * n, k, m);
        } else {
            if sb[..sb.len() - 2] != *lead {
                bail!(Dimension, "matmul batch dims differ: {:?} @ {:?}", sa, sb);
            }
            for bi in 0..batches {
                gemm_acc(
                    &da[bi * n * k..(bi + 1) * n * k],
                    &db[bi * k * m..(bi + 1) * k * m],
                    &mut out[bi * n * m..(bi + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        self.push(&out_shape, out, Op::MatMul(a, b))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            bail!(Dimension, "transpose needs rank >= 2, got {:?}", s);
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batches: usize = s[..s.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batches {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.push(&shape, out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(shape, v.into_data(), Op::Reshape(x))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            bail!(Usage, "concat of zero tensors");
        };
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                bail!(Dimension, "concat leading dims differ: {:?} vs {:?}", lead, s);
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(&shape, out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::Dimension("slice of a scalar".into()))?;
        if start >= end || end > w {
            bail!(Dimension, "slice {}..{} out of range for width {}", start, end, w);
        }
        let rows = self.value(x).numel() / w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&src[r * w + start..r * w + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        self.push(&shape, out, Op::Slice { x, start, end })
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(&[], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(&[], vec![s], Op::Mean(x))
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            bail!(Dimension, "axis {} out of range for {:?}", axis, s);
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        self.push(&shape, out, Op::SumAxis { x, axis })
    }

    /// Sum over the last axis, kept with size 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r == 0 {
            bail!(Dimension, "sum_last of a scalar");
        }
        self.sum_axis(x, r - 1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let w = *shape.last().ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(w) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        self.push(&shape, out, Op::Softmax(x))
    }

    /// `log Σ exp` over the last axis, kept with size 1. Entries whose mask
    /// bit is `false` are excluded; the mask has the shape of `x`.
    pub fn logsumexp(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let w = *shape.last().ok_or_else(|| Error::Dimension("logsumexp of a scalar".into()))?;
        if let Some(m) = &mask {
            if m.len() != v.numel() {
                bail!(Dimension, "mask length {} for {} values", m.len(), v.numel());
            }
        }
        let mut out = Vec::with_capacity(v.numel() / w);
        for (r, row) in v.data().chunks(w).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * w + j]);
            let mx = (0..w).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                bail!(Usage, "logsumexp row {} has no unmasked entries", r);
            }
            let z: f64 = (0..w).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum();
            out.push(mx + z.ln());
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = 1;
        self.push(&oshape, out, Op::LogSumExp { x, mask: mask.map(Rc::new) })
    }

    /// Clamp to `[lo, hi]`; the derivative is zero outside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let data = v.data().iter().map(|e| e.max(lo).min(hi)).collect();
        self.push(&shape, data, Op::Clamp { x, lo, hi })
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", lv.shape());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Unary(op, x) => {
                let xv = self.value(*x).data();
                let dst = accumulate(&mut grads[x.0], xv.len());
                for k in 0..xv.len() {
                    let a = xv[k];
                    let d = match op {
                        Unary::Neg => -1.0,
                        Unary::Sqrt => {
                            if out[k] > 0.0 {
                                0.5 / out[k]
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * a,
                        Unary::Exp => out[k],
                        Unary::Log => 1.0 / a,
                        Unary::Abs => {
                            if a > 0.0 {
                                1.0
                            } else if a < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sign => 0.0,
                        Unary::Asin => {
                            if a.abs() < 1.0 {
                                1.0 / (1.0 - a * a).sqrt()
                            } else {
                                0.0
                            }
                        }
                        Unary::Acos => {
                            if a.abs() < 1.0 {
                                -1.0 / (1.0 - a * a).sqrt()
                            } else {
                                0.0
                            }
                        }
                        Unary::Asinh => 1.0 / (a * a + 1.0).sqrt(),
                        Unary::Acosh => {
                            if a > 1.0 {
                                1.0 / ((a - 1.0).sqrt() * (a + 1.0).sqrt())
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - out[k] * out[k],
                        Unary::Gelu => gelu_grad(a),
                        Unary::Softplus => sigmoid(a),
                    };
                    dst[k] += g[k] * d;
                }
            }
            Op::Binary(op, a, b) => {
                let shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let (da, db) = (va.data(), vb.data());
                if self.nodes[a.0].grad {
                    let ia = Broadcast::new(shape, va.shape());
                    let ib = Broadcast::new(shape, vb.shape());
                    let mut ga = vec![0.0; da.len()];
                    for k in 0..g.len() {
                        let ka = ia.at(k);
                        ga[ka] += match op {
                            Binary::Add | Binary::Sub => g[k],
                            Binary::Mul => g[k] * db[ib.at(k)],
                            Binary::Div => g[k] / db[ib.at(k)],
                        };
                    }
                    move_into(&mut grads[a.0], ga);
                }
                if self.nodes[b.0].grad {
                    let ia = Broadcast::new(shape, va.shape());
                    let ib = Broadcast::new(shape, vb.shape());
                    let mut gb = vec![0.0; db.len()];
                    for k in 0..g.len() {
                        let kb = ib.at(k);
                        gb[kb] += match op {
                            Binary::Add => g[k],
                            Binary::Sub => -g[k],
                            Binary::Mul => g[k] * da[ia.at(k)],
                            Binary::Div => -(g[k] * da[ia.at(k)] / (db[kb] * db[kb])),
                        };
                    }
                    move_into(&mut grads[b.0], gb);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let m = sb[sb.len() - 1];
                let batches: usize = sa[..sa.len() - 2].iter().product();
                let (need_a, need_b) = (self.nodes[a.0].grad, self.nodes[b.0].grad);
                if need_a {
                    let mut ga = vec![0.0; va.numel()];
                    if sb.len() == 2 {
                        gemm_nt_acc(g, vb.data(), &mut ga, batches * n, k, m);
                    } else {
                        for bi in 0..batches {
                            gemm_nt_acc(
                                &g[bi * n * m..(bi + 1) * n * m],
                                &vb.data()[bi * k * m..(bi + 1) * k * m],
                                &mut ga[bi * n * k..(bi + 1) * n * k],
                                n,
                                k,
                                m,
                            );
                        }
                    }
                    move_into(&mut grads[a.0], ga);
                }
                if need_b {
                    let mut gb = vec![0.0; vb.numel()];
                    if sb.len() == 2 {
                        gemm_tn_acc(va.data(), g, &mut gb, batches * n, k, m);
                    } else {
                        for bi in 0..batches {
                            gemm_tn_acc(
                                &va.data()[bi * n * k..(bi + 1) * n * k],
                                &g[bi * n * m..(bi + 1) * n * m],
                                &mut gb[bi * k * m..(bi + 1) * k * m],
                                n,
                                k,
                                m,
                            );
                        }
                    }
                    move_into(&mut grads[b.0], gb);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batches = g.len() / (r * c);
                let dst = accumulate(&mut grads[x.0], g.len());
                for b in 0..batches {
                    let off = b * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            dst[off + j * r + i] += g[off + i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut off = 0;
                for p in parts {
                    let w = *self.shape(*p).last().unwrap();
                    let dst = accumulate(&mut grads[p.0], rows * w);
                    for r in 0..rows {
                        for j in 0..w {
                            dst[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, start, end } => {
                let w = *self.shape(*x).last().unwrap();
                let sw = end - start;
                let rows = g.len() / sw;
                let dst = accumulate(&mut grads[x.0], rows * w);
                for r in 0..rows {
                    for j in 0..sw {
                        dst[r * w + start + j] += g[r * sw + j];
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dst = accumulate(&mut grads[x.0], n);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let dst = accumulate(&mut grads[x.0], n);
                let share = g[0] / n as f64;
                dst.iter_mut().for_each(|d| *d += share);
            }
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let len = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let dst = accumulate(&mut grads[x.0], outer * len * inner);
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dst[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let w = *node.value.shape().last().unwrap();
                let dst = accumulate(&mut grads[x.0], g.len());
                for (r, (srow, grow)) in out.chunks(w).zip(g.chunks(w)).enumerate() {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gg)| s * gg).sum();
                    for j in 0..w {
                        dst[r * w + j] += srow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LogSumExp { x, mask } => {
                let xv = self.value(*x).data();
                let w = *self.shape(*x).last().unwrap();
                let dst = accumulate(&mut grads[x.0], xv.len());
                for (r, row) in xv.chunks(w).enumerate() {
                    for j in 0..w {
                        if mask.as_ref().is_none_or(|m| m[r * w + j]) {
                            dst[r * w + j] += g[r] * (row[j] - out[r]).exp();
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let dst = accumulate(&mut grads[x.0], xv.len());
                for k in 0..xv.len() {
                    if xv[k] >= *lo && xv[k] <= *hi {
                        dst[k] += g[k];
                    }
                }
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(dst) => {
            for (d, x) in dst.iter_mut().zip(g) {
                *d += x;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn move_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(dst) => {
            for (d, x) in dst.iter_mut().zip(&g) {
                *d += x;
            }
        }
        None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::Unary(u, _) => match u {
            Unary::Neg => "neg",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Sign => "sign",
            Unary::Asin => "asin",
            Unary::Acos => "acos",
            Unary::Asinh => "asinh",
            Unary::Acosh => "arccosh",
            Unary::Tanh => "tanh",
            Unary::Gelu => "gelu",
            Unary::Softplus => "softplus",
        },
        Op::Binary(b, _, _) => match b {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        },
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Concat(_) => "concat",
        Op::Slice { .. } => "slice",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumAxis { .. } => "sum_axis",
        Op::Softmax(_) => "softmax",
        Op::LogSumExp { .. } => "logsumexp",
        Op::Clamp { .. } => "clamp",
    }
}

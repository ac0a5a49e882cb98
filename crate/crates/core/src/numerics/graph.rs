//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as an append-only node, so inputs
//! always precede the nodes that consume them and the reverse sweep is a
//! plain backwards walk over the node list. Parameter leaves borrow their
//! storage from the caller; only intermediate values are owned.

use std::borrow::Cow;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{PaeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise kinds exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Gelu,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        scale: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    Sum(NodeId),
    SquaredError {
        pred: NodeId,
        target: NodeId,
        weight: f64,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation record. Single-threaded by construction; build
/// one graph per batch member to evaluate in parallel.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let len: usize = shape.iter().product();
    let rows = if shape.len() == 1 { 1 } else { shape[0] };
    (rows, len / rows)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if k < 32 {
        // short dots vectorise poorly; transpose b and stream rows instead
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        return gemm_nn(a, &bt, out, m, k, n);
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'g mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> NodeId {
        let (rows, cols) = matrix_dims(&shape);
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            shape,
            rows,
            cols,
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<'a> {
        &self.nodes[id.0]
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Leaf borrowing the tensor's storage; differentiable when the tensor
    /// is flagged `requires_grad`.
    pub fn leaf(&mut self, t: &'a Tensor) -> NodeId {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad)
    }

    /// Differentiable leaf borrowing the tensor's storage.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.input(t, false)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(&self.node(id).shape, self.node(id).value.to_vec()).expect("node shapes are valid")
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.node(id).value[0]
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(PaeError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(PaeError::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMulTransB(a, b), rg))
    }

    fn binary_same(&mut self, a: NodeId, b: NodeId, name: &'static str) -> Result<Vec<usize>> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return Err(PaeError::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row (bias) to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(PaeError::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::AddRow(a, bias), rg))
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        self.push(shape, Cow::Owned(out), Op::Scale(a, factor), rg)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Gaussian error linear unit, `x·Φ(x)` with the exact normal CDF.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Dispatches one of the elementwise kinds; binary kinds need `b`.
    pub fn elementwise(&mut self, kind: Elementwise, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let need_b = || {
            b.ok_or_else(|| PaeError::Contract(format!("{kind:?} needs a second operand")))
        };
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
            Elementwise::Tanh => Ok(self.tanh(a)),
            Elementwise::Gelu => Ok(self.gelu(a)),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.needs(&[a]);
        self.push(vec![m, n], Cow::Owned(out), Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(PaeError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(vec![m, n], Cow::Owned(out), op, rg))
    }

    /// Inverted dropout. Outside training, or at rate zero, returns `x`
    /// itself so evaluation is an exact identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(PaeError::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(shape, Cow::Owned(out), Op::Dropout { x, scale }, rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(PaeError::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(vec![m, len], Cow::Owned(out), Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(PaeError::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(vec![len, n], Cow::Owned(out), Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(PaeError::shape("concat_cols", self.shape(parts[0]), self.shape(parts[parts.len() - 1])));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let n = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * n..(r + 1) * n]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![m, total], Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(PaeError::shape("concat_rows", self.shape(parts[0]), self.shape(parts[parts.len() - 1])));
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p));
            m += self.dims(p).0;
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row-major reinterpretation under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(PaeError::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), Cow::Owned(out), Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum::<f64>();
        let rg = self.needs(&[x]);
        self.push(vec![1, 1], Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    fn squared_error(&mut self, pred: NodeId, target: NodeId, mean: bool) -> Result<NodeId> {
        if self.value(pred).len() != self.value(target).len() {
            return Err(PaeError::shape("squared_error", self.shape(pred), self.shape(target)));
        }
        let len = self.value(pred).len();
        let weight = if mean { 1.0 / len as f64 } else { 1.0 };
        let total: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.needs(&[pred, target]);
        let op = Op::SquaredError { pred, target, weight };
        Ok(self.push(vec![1, 1], Cow::Owned(vec![total * weight]), op, rg))
    }

    /// Mean of squared residuals over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.squared_error(pred, target, true)
    }

    /// Sum of squared residuals over all elements.
    pub fn sse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.squared_error(pred, target, false)
    }

    /// Softmax cross-entropy summed over rows, one class index per row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, c) = self.dims(logits);
        if labels.len() != m {
            return Err(PaeError::shape("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(PaeError::Parameter(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for r in 0..m {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[labels[r]];
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
        }
        let rg = self.needs(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1, 1], Cow::Owned(vec![total]), op, rg))
    }

    /// Reverse sweep from a scalar node. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(PaeError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let rg = |id: NodeId| self.nodes[id.0].requires_grad;
            let val = |id: NodeId| -> &[f64] { &self.nodes[id.0].value };
            let len_of = |id: NodeId| self.nodes[id.0].value.len();
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].cols;
                    if rg(*a) {
                        gemm_nt(&g, val(*b), grad_slot(&mut grads, *a, m * k), m, n, k);
                    }
                    if rg(*b) {
                        gemm_tn(val(*a), &g, grad_slot(&mut grads, *b, k * n), m, k, n);
                    }
                }
                Op::MatMulTransB(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].rows;
                    if rg(*a) {
                        gemm_nn(&g, val(*b), grad_slot(&mut grads, *a, m * k), m, n, k);
                    }
                    if rg(*b) {
                        gemm_tn(&g, val(*a), grad_slot(&mut grads, *b, n * k), m, n, k);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if rg(*a) {
                        let s = grad_slot(&mut grads, *a, g.len());
                        s.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                    }
                    if rg(*b) {
                        let s = grad_slot(&mut grads, *b, g.len());
                        s.iter_mut().zip(&g).for_each(|(s, x)| *s += sign * x);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let bv = val(*b);
                        let s = grad_slot(&mut grads, *a, g.len());
                        for i in 0..g.len() {
                            s[i] += g[i] * bv[i];
                        }
                    }
                    if rg(*b) {
                        let av = val(*a);
                        let s = grad_slot(&mut grads, *b, g.len());
                        for i in 0..g.len() {
                            s[i] += g[i] * av[i];
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if rg(*a) {
                        let s = grad_slot(&mut grads, *a, g.len());
                        s.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                    }
                    if rg(*bias) {
                        let n = len_of(*bias);
                        let s = grad_slot(&mut grads, *bias, n);
                        for row in g.chunks_exact(n) {
                            s.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if rg(*a) {
                        let s = grad_slot(&mut grads, *a, g.len());
                        s.iter_mut().zip(&g).for_each(|(s, x)| *s += f * x);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let s = grad_slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let s = grad_slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Gelu(a) => {
                    let xv = val(*a);
                    let s = grad_slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let n = node.cols;
                    let y = &node.value;
                    let s = grad_slot(&mut grads, *a, g.len());
                    for r in 0..node.rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inner = dot(yr, gr);
                        for c in 0..n {
                            s[r * n + c] += yr[c] * (gr[c] - inner);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = (node.rows, node.cols);
                    if rg(*gamma) {
                        let s = grad_slot(&mut grads, *gamma, n);
                        for r in 0..m {
                            for c in 0..n {
                                s[c] += g[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    if rg(*beta) {
                        let s = grad_slot(&mut grads, *beta, n);
                        for row in g.chunks_exact(n) {
                            s.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                        }
                    }
                    if rg(*x) {
                        let gv = val(*gamma).to_vec();
                        let s = grad_slot(&mut grads, *x, m * n);
                        let mut dxhat = vec![0.0; n];
                        for r in 0..m {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..n {
                                let d = g[r * n + c] * gv[c];
                                dxhat[c] = d;
                                mean_d += d;
                                mean_dx += d * xhat[r * n + c];
                            }
                            mean_d /= n as f64;
                            mean_dx /= n as f64;
                            for c in 0..n {
                                s[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                            }
                        }
                    }
                }
                Op::Dropout { x, scale } => {
                    let s = grad_slot(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * scale[i];
                    }
                }
                Op::SliceCols { x, start } => {
                    let (n_in, len) = (self.nodes[x.0].cols, node.cols);
                    let total = len_of(*x);
                    let s = grad_slot(&mut grads, *x, total);
                    for r in 0..node.rows {
                        for c in 0..len {
                            s[r * n_in + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let n = node.cols;
                    let total = len_of(*x);
                    let s = grad_slot(&mut grads, *x, total);
                    for (o, v) in s[start * n..].iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].cols;
                        if rg(p) {
                            let s = grad_slot(&mut grads, p, node.rows * n);
                            for r in 0..node.rows {
                                for c in 0..n {
                                    s[r * n + c] += g[r * total + offset + c];
                                }
                            }
                        }
                        offset += n;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = len_of(p);
                        if rg(p) {
                            let s = grad_slot(&mut grads, p, len);
                            s.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, x)| *s += x);
                        }
                        offset += len;
                    }
                }
                Op::Reshape(x) => {
                    let s = grad_slot(&mut grads, *x, g.len());
                    s.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                }
                Op::Sum(x) => {
                    let total = len_of(*x);
                    let s = grad_slot(&mut grads, *x, total);
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
                Op::SquaredError { pred, target, weight } => {
                    let (pv, tv) = (val(*pred), val(*target));
                    let k = 2.0 * weight * g[0];
                    if rg(*pred) {
                        let s = grad_slot(&mut grads, *pred, pv.len());
                        for i in 0..pv.len() {
                            s[i] += k * (pv[i] - tv[i]);
                        }
                    }
                    if rg(*target) {
                        let s = grad_slot(&mut grads, *target, pv.len());
                        for i in 0..pv.len() {
                            s[i] -= k * (pv[i] - tv[i]);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let c = self.nodes[logits.0].cols;
                    let s = grad_slot(&mut grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            s[r * c + k] += g[0] * (probs[r * c + k] - onehot);
                        }
                    }
                }
            }
        }

        for (idx, g) in leaf_grads {
            let slot = &mut self.nodes[idx].grad;
            match slot {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_rhs() {
        let i3 = Tensor::identity(3);
        let b = mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let (ni, nb) = (g.leaf(&i3), g.leaf(&b));
        let c = g.matmul(ni, nb).unwrap();
        assert_eq!(g.value(c), b.data());
        assert_eq!(g.shape(c), &[3, 2]);
    }

    #[test]
    fn scalar_matmul() {
        let (a, b) = (mat(1, 1, &[2.0]), mat(1, 1, &[3.0]));
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(na, nb).unwrap();
        assert_eq!(g.value(c), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let (a, b) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3]));
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let err = g.matmul(na, nb).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let x = mat(2, 2, &[0.0, 0.0, 1000.0, 0.0]);
        let mut g = Graph::new();
        let n = g.leaf(&x);
        let y = g.softmax_rows(n);
        let v = g.value(y);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert_eq!(v[2], 1.0);
        assert!(v[3] >= 0.0 && v[3] < 1e-300);
    }

    #[test]
    fn layer_norm_constant_row_and_zero_gamma() {
        let x = mat(1, 4, &[3.0; 4]);
        let (ones, zeros) = (Tensor::filled(&[4], 1.0), Tensor::zeros(&[4]));
        let mut g = Graph::new();
        let (nx, n1, n0) = (g.leaf(&x), g.leaf(&ones), g.leaf(&zeros));
        let y = g.layer_norm(nx, n1, n0, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        let beta = Tensor::filled(&[4], 2.5);
        let x2 = mat(1, 4, &[1.0, -2.0, 7.0, 0.5]);
        let (nx2, nz, nb) = (g.leaf(&x2), g.leaf(&zeros), g.leaf(&beta));
        let y2 = g.layer_norm(nx2, nz, nb, 1e-5).unwrap();
        assert!(g.value(y2).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn sigmoid_tanh_at_zero() {
        let z = Tensor::zeros(&[1]);
        let mut g = Graph::new();
        let n = g.leaf(&z);
        let s = g.sigmoid(n);
        let t = g.tanh(n);
        assert_eq!(g.value(s), &[0.5]);
        assert_eq!(g.value(t), &[0.0]);
    }

    #[test]
    fn elementwise_binary_requires_operand() {
        let z = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let n = g.leaf(&z);
        assert!(g.elementwise(Elementwise::Add, n, None).is_err());
        let w = Tensor::zeros(&[3]);
        let m = g.leaf(&w);
        assert!(matches!(g.elementwise(Elementwise::Mul, n, Some(m)), Err(PaeError::Shape { .. })));
    }

    #[test]
    fn dropout_identity_cases_and_rate_error() {
        let x = Tensor::filled(&[10], 1.5);
        let mut g = Graph::new();
        let n = g.leaf(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(g.dropout(n, 0.0, &mut rng, true).unwrap(), n);
        assert_eq!(g.dropout(n, 0.1, &mut rng, false).unwrap(), n);
        assert!(g.dropout(n, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_zero_fraction_matches_rate() {
        let x = Tensor::filled(&[100_000], 1.0);
        let mut g = Graph::new();
        let n = g.leaf(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y = g.dropout(n, 0.1, &mut rng, true).unwrap();
        let zeros = g.value(y).iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.1).abs() < 0.01, "zero fraction {zeros}");
        let survivors: Vec<_> = g.value(y).iter().filter(|&&v| v != 0.0).collect();
        assert!(survivors.iter().all(|&&v| (v - 1.0 / 0.9).abs() < 1e-15));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::matrix(2, 3, vec![0.3; 6]).unwrap().with_grad();
        let mut g = Graph::new();
        let n = g.leaf(&x);
        let s = g.sum(n);
        g.backward(s).unwrap();
        assert_eq!(g.grad(n).unwrap(), &[1.0; 6]);
        // second call accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(n).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn backward_of_dot_self_is_twice_x() {
        let x = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let mut g = Graph::new();
        let n = g.leaf(&x);
        let xxt = g.matmul_t(n, n).unwrap();
        g.backward(xxt).unwrap();
        assert_eq!(g.grad(n).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[2, 2]).with_grad();
        let mut g = Graph::new();
        let n = g.leaf(&x);
        assert!(matches!(g.backward(n), Err(PaeError::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let logits = Tensor::zeros(&[3, 2]);
        let mut g = Graph::new();
        let n = g.leaf(&logits);
        let l = g.softmax_cross_entropy(n, &[0, 1, 1]).unwrap();
        assert!((g.scalar(l) - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }
}

//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks the record in
//! reverse and returns a [`GradientMap`] over the leaves that require
//! gradients. Tensors themselves are plain values (row-major `Vec<f64>` plus a
//! shape) and can move freely between threads; recording is confined to one
//! tape on one thread. The tape is reset explicitly between training steps.
//!
//! Numerical guards: softmax subtracts the row max, cross-entropy and
//! log-sum-exp go through the max-shifted form, and sigmoid clamps its
//! exponent argument at ±700.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Cheap to copy, valid until the next reset.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    epoch: u64,
}

/// Dense row-major tensor of 64-bit floats.
///
/// Scalars use shape `[1]`. `tape_node` is set on tensors stored inside a
/// tape; detached values carry `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    tape_node: Option<Var>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            tape_node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("valid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v]).expect("scalar")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_vec(vec![n], data).expect("nonempty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(shape, data).expect("valid shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape_node(&self) -> Option<Var> {
        self.tape_node
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Row `i` of a matrix as a plain slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value copy with gradient tracking stripped.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            tape_node: None,
        }
    }
}

fn identity_matrix(n: usize) -> Vec<f64> {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    data
}

impl Tensor {
    pub fn identity(n: usize) -> Self {
        Tensor::from_vec(vec![n, n], identity_matrix(n)).expect("identity")
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn raw_transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    // exponent clamp keeps exp() finite at the extreme tails
    let t = (-x).clamp(-700.0, 700.0);
    1.0 / (1.0 + t.exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * du
}

fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn logsumexp_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

// ── Tape ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { mat: Var, row: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    MeanRows(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Pick { x: Var, index: usize },
    MulScalar { x: Var, s: Var },
    CosineSim(Var, Var),
    LogSumExp(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    grad_needed: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    epoch: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), epoch: 0 }
    }

    /// Drops every recorded node; previously issued handles become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.epoch += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(
            v.epoch, self.epoch,
            "stale tape handle used after reset (handle epoch {}, tape epoch {})",
            v.epoch, self.epoch
        );
        v.index
    }

    fn push(&mut self, op: Op, mut value: Tensor, grad_needed: bool) -> Var {
        let var = Var { index: self.nodes.len(), epoch: self.epoch };
        value.tape_node = Some(var);
        self.nodes.push(Node { op, value, grad_needed });
        var
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[self.check(v)].grad_needed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v);
        &self.nodes[i].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Registers a tensor as a leaf; gradient is tracked iff the tensor
    /// requires it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let grad = t.requires_grad;
        let mut value = t.clone();
        value.requires_grad = grad;
        self.push(Op::Leaf, value, grad)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut value = t.detached();
        value.requires_grad = false;
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(&Tensor::scalar(v))
    }

    // ── Element-wise and linear ops ─────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        if self.nodes[ia].value.shape != self.nodes[ib].value.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.nodes[ia].value.shape.clone(),
                rhs: self.nodes[ib].value.shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[ia]
            .value
            .data
            .iter()
            .zip(&self.nodes[ib].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[ia].value.shape.clone();
        let needed = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Tensor::from_vec(shape, data)?, needed))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        if self.nodes[ia].value.shape != self.nodes[ib].value.shape {
            return Err(Error::Dimension {
                op: "sub",
                lhs: self.nodes[ia].value.shape.clone(),
                rhs: self.nodes[ib].value.shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[ia]
            .value
            .data
            .iter()
            .zip(&self.nodes[ib].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[ia].value.shape.clone();
        let needed = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), Tensor::from_vec(shape, data)?, needed))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        if self.nodes[ia].value.shape != self.nodes[ib].value.shape {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.nodes[ia].value.shape.clone(),
                rhs: self.nodes[ib].value.shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[ia]
            .value
            .data
            .iter()
            .zip(&self.nodes[ib].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[ia].value.shape.clone();
        let needed = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), Tensor::from_vec(shape, data)?, needed))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ia = self.check(a);
        let data: Vec<f64> = self.nodes[ia].value.data.iter().map(|x| c * x).collect();
        let shape = self.nodes[ia].value.shape.clone();
        let needed = self.needs(a);
        self.push(
            Op::Scale(a, c),
            Tensor::from_vec(shape, data).expect("same shape"),
            needed,
        )
    }

    /// Broadcast add of a `[d]` row vector onto every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (im, ir) = (self.check(mat), self.check(row));
        let mshape = self.nodes[im].value.shape.clone();
        let rshape = self.nodes[ir].value.shape.clone();
        if mshape.len() != 2 || rshape.len() != 1 || mshape[1] != rshape[0] {
            return Err(Error::Dimension { op: "add_row", lhs: mshape, rhs: rshape });
        }
        let (n, d) = (mshape[0], mshape[1]);
        let mut data = self.nodes[im].value.data.clone();
        let rdata = &self.nodes[ir].value.data;
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += rdata[j];
            }
        }
        let needed = self.needs(mat) || self.needs(row);
        Ok(self.push(Op::AddRow { mat, row }, Tensor::from_vec(mshape, data)?, needed))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let ashape = self.nodes[ia].value.shape.clone();
        let bshape = self.nodes[ib].value.shape.clone();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::Dimension { op: "matmul", lhs: ashape, rhs: bshape });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let data = raw_matmul(&self.nodes[ia].value.data, &self.nodes[ib].value.data, m, k, n);
        let needed = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_vec(vec![m, n], data)?, needed))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let shape = self.nodes[ia].value.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension { op: "transpose", lhs: shape, rhs: vec![] });
        }
        let (r, c) = (shape[0], shape[1]);
        let data = raw_transpose(&self.nodes[ia].value.data, r, c);
        let needed = self.needs(a);
        Ok(self.push(Op::Transpose(a), Tensor::from_vec(vec![c, r], data)?, needed))
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let data: Vec<f64> = self.nodes[ia].value.data.iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.nodes[ia].value.shape.clone();
        let needed = self.needs(a);
        self.push(Op::Sigmoid(a), Tensor::from_vec(shape, data).expect("same shape"), needed)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let data: Vec<f64> = self.nodes[ia].value.data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[ia].value.shape.clone();
        let needed = self.needs(a);
        self.push(Op::Gelu(a), Tensor::from_vec(shape, data).expect("same shape"), needed)
    }

    /// Row-wise softmax of a matrix, max-shifted per row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let shape = self.nodes[ia].value.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension { op: "softmax_rows", lhs: shape, rhs: vec![] });
        }
        let (n, d) = (shape[0], shape[1]);
        let mut data = self.nodes[ia].value.data.clone();
        for i in 0..n {
            softmax_row_in_place(&mut data[i * d..(i + 1) * d]);
        }
        let needed = self.needs(a);
        Ok(self.push(Op::SoftmaxRows(a), Tensor::from_vec(shape, data)?, needed))
    }

    /// Layer normalization over the last axis of `[n, d]`, with per-feature
    /// gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x), self.check(gamma), self.check(beta));
        let xshape = self.nodes[ix].value.shape.clone();
        let gshape = self.nodes[ig].value.shape.clone();
        let bshape = self.nodes[ib].value.shape.clone();
        if xshape.len() != 2 || gshape != vec![xshape[1]] || bshape != vec![xshape[1]] {
            return Err(Error::Dimension { op: "layer_norm", lhs: xshape, rhs: gshape });
        }
        let (n, d) = (xshape[0], xshape[1]);
        let xd = &self.nodes[ix].value.data;
        let gd = &self.nodes[ig].value.data;
        let bd = &self.nodes[ib].value.data;
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = gd[j] * (row[j] - mean) * inv + bd[j];
            }
        }
        let needed = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            Tensor::from_vec(xshape, data)?,
            needed,
        ))
    }

    /// Row lookup: `table[ids[i], :]` stacked into `[len(ids), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table);
        let tshape = self.nodes[it].value.shape.clone();
        if tshape.len() != 2 {
            return Err(Error::Dimension { op: "embedding", lhs: tshape, rhs: vec![] });
        }
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup needs at least one id".into()));
        }
        let (v, d) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let td = &self.nodes[it].value.data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let needed = self.needs(table);
        Ok(self.push(
            Op::Embedding { table, ids: ids.to_vec() },
            Tensor::from_vec(vec![ids.len(), d], data)?,
            needed,
        ))
    }

    /// Mean cross-entropy of `[n, v]` logits against `n` target ids, computed
    /// through log-sum-exp. The next-token shift is the caller's convention.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits);
        let lshape = self.nodes[il].value.shape.clone();
        if lshape.len() != 2 {
            return Err(Error::Dimension { op: "cross_entropy", lhs: lshape, rhs: vec![] });
        }
        let (n, v) = (lshape[0], lshape[1]);
        if targets.len() != n {
            return Err(Error::Contract(format!(
                "cross_entropy: {n} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!(
                "cross_entropy target {bad} out of range for {v} classes"
            )));
        }
        let ld = &self.nodes[il].value.data;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * v..(i + 1) * v];
            total += logsumexp_slice(row) - row[t];
        }
        let needed = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            Tensor::scalar(total / n as f64),
            needed,
        ))
    }

    // ── Reductions and shape ops ────────────────────────────────────

    /// Mean over rows of `[n, d]`, yielding `[d]` (pooling along the
    /// sequence axis).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let shape = self.nodes[ia].value.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension { op: "mean_rows", lhs: shape, rhs: vec![] });
        }
        let (n, d) = (shape[0], shape[1]);
        let ad = &self.nodes[ia].value.data;
        let mut data = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                data[j] += ad[i * d + j];
            }
        }
        for v in data.iter_mut() {
            *v /= n as f64;
        }
        let needed = self.needs(a);
        Ok(self.push(Op::MeanRows(a), Tensor::from_vec(vec![d], data)?, needed))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let total: f64 = self.nodes[ia].value.data.iter().sum();
        let needed = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(total), needed)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let first = self.check(parts[0]);
        let tail_shape = self.nodes[first].value.shape[1..].to_vec();
        let mut rows = 0usize;
        for &p in parts {
            let ip = self.check(p);
            let s = &self.nodes[ip].value.shape;
            if s[1..] != tail_shape[..] {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.nodes[first].value.shape.clone(),
                    rhs: s.clone(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.nodes[self.check(p)].value.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail_shape);
        let needed = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(shape, data)?, needed))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a);
        let shape = self.nodes[ia].value.shape.clone();
        if len == 0 || start + len > shape[0] {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of range for {:?}",
                start + len,
                shape
            )));
        }
        let stride: usize = shape[1..].iter().product::<usize>().max(1);
        let data = self.nodes[ia].value.data[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = vec![len];
        out_shape.extend_from_slice(&shape[1..]);
        let needed = self.needs(a);
        Ok(self.push(Op::SliceRows { x: a, start, len }, Tensor::from_vec(out_shape, data)?, needed))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a);
        let shape = self.nodes[ia].value.shape.clone();
        if shape.len() != 2 || len == 0 || start + len > shape[1] {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of range for {:?}",
                start + len,
                shape
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        let ad = &self.nodes[ia].value.data;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&ad[i * d + start..i * d + start + len]);
        }
        let needed = self.needs(a);
        Ok(self.push(Op::SliceCols { x: a, start, len }, Tensor::from_vec(vec![n, len], data)?, needed))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let n = self.value(parts[0]).shape()[0];
        let mut cols = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols += s[1];
        }
        let mut data = vec![0.0; n * cols];
        let mut offset = 0usize;
        for &p in parts {
            let ip = self.check(p);
            let pc = self.nodes[ip].value.shape[1];
            for i in 0..n {
                let src = &self.nodes[ip].value.data[i * pc..(i + 1) * pc];
                data[i * cols + offset..i * cols + offset + pc].copy_from_slice(src);
            }
            offset += pc;
        }
        let needed = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_vec(vec![n, cols], data)?, needed))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a);
        let numel: usize = shape.iter().product();
        if numel != self.nodes[ia].value.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.nodes[ia].value.shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[ia].value.data.clone();
        let needed = self.needs(a);
        Ok(self.push(Op::Reshape(a), Tensor::from_vec(shape, data)?, needed))
    }

    /// Single element of a 1-D tensor as a scalar node.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let ia = self.check(a);
        let shape = self.nodes[ia].value.shape.clone();
        if shape.len() != 1 || index >= shape[0] {
            return Err(Error::Contract(format!("pick index {index} out of range for {shape:?}")));
        }
        let v = self.nodes[ia].value.data[index];
        let needed = self.needs(a);
        Ok(self.push(Op::Pick { x: a, index }, Tensor::scalar(v), needed))
    }

    /// Multiply every element of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x), self.check(s));
        if !self.nodes[is].value.is_scalar() {
            return Err(Error::Contract(format!(
                "mul_scalar needs a scalar, got {:?}",
                self.nodes[is].value.shape
            )));
        }
        let sv = self.nodes[is].value.data[0];
        let data: Vec<f64> = self.nodes[ix].value.data.iter().map(|v| v * sv).collect();
        let shape = self.nodes[ix].value.shape.clone();
        let needed = self.needs(x) || self.needs(s);
        Ok(self.push(Op::MulScalar { x, s }, Tensor::from_vec(shape, data)?, needed))
    }

    /// Cosine similarity of two equal-length vectors; errors on zero norm.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (iu, iv) = (self.check(u), self.check(v));
        let ushape = self.nodes[iu].value.shape.clone();
        let vshape = self.nodes[iv].value.shape.clone();
        if ushape.len() != 1 || ushape != vshape {
            return Err(Error::Dimension { op: "cosine_sim", lhs: ushape, rhs: vshape });
        }
        let ud = &self.nodes[iu].value.data;
        let vd = &self.nodes[iv].value.data;
        let nu = ud.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::DegenerateVector(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let dot: f64 = ud.iter().zip(vd).map(|(a, b)| a * b).sum();
        let needed = self.needs(u) || self.needs(v);
        Ok(self.push(Op::CosineSim(u, v), Tensor::scalar(dot / (nu * nv)), needed))
    }

    /// log(sum(exp(x))) of a 1-D tensor, max-shifted.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let shape = self.nodes[ia].value.shape.clone();
        if shape.len() != 1 {
            return Err(Error::Dimension { op: "logsumexp", lhs: shape, rhs: vec![] });
        }
        let v = logsumexp_slice(&self.nodes[ia].value.data);
        let needed = self.needs(a);
        Ok(self.push(Op::LogSumExp(a), Tensor::scalar(v), needed))
    }

    // ── Composite helpers ───────────────────────────────────────────

    /// `w · x` for `w: [m, n]`, `x: [n]`, via reshape + matmul.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let n = {
            let s = self.value(x).shape();
            if s.len() != 1 {
                return Err(Error::Dimension { op: "matvec", lhs: self.value(w).shape().to_vec(), rhs: s.to_vec() });
            }
            s[0]
        };
        let m = self.value(w).shape()[0];
        let col = self.reshape(x, vec![n, 1])?;
        let prod = self.matmul(w, col)?;
        self.reshape(prod, vec![m])
    }

    /// Softmax of a 1-D tensor.
    pub fn softmax_vec(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).shape()[0];
        let row = self.reshape(a, vec![1, n])?;
        let sm = self.softmax_rows(row)?;
        self.reshape(sm, vec![n])
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Gradients of a scalar loss with respect to every gradient-tracked
    /// leaf, by reverse traversal of the tape.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let il = self.check(loss);
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            if !self.nodes[i].grad_needed {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            // keep the buffer so leaves and multi-consumer reads survive
            grads[i] = Some(g);
        }

        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf = node.op {
                if node.value.requires_grad {
                    if let Some(g) = &grads[i] {
                        let t = Tensor::from_vec(node.value.shape.clone(), g.clone())?;
                        map.insert(i, t);
                    }
                }
            }
        }
        Ok(GradientMap { grads: map, epoch: self.epoch })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], target: Var, add: &[f64]) {
        let it = target.index;
        if !self.nodes[it].grad_needed {
            return;
        }
        match &mut grads[it] {
            Some(buf) => {
                for (b, a) in buf.iter_mut().zip(add) {
                    *b += a;
                }
            }
            None => grads[it] = Some(add.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ad = &self.nodes[a.index].value.data;
                let bd = &self.nodes[b.index].value.data;
                let da: Vec<f64> = g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                self.accum(grads, *a, &da);
            }
            Op::AddRow { mat, row } => {
                self.accum(grads, *mat, g);
                let d = self.nodes[row.index].value.numel();
                let n = g.len() / d;
                let mut dr = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dr[j] += g[i * d + j];
                    }
                }
                self.accum(grads, *row, &dr);
            }
            Op::MatMul(a, b) => {
                let ashape = &self.nodes[a.index].value.shape;
                let bshape = &self.nodes[b.index].value.shape;
                let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
                let ad = &self.nodes[a.index].value.data;
                let bd = &self.nodes[b.index].value.data;
                // dA = G · Bᵀ, dB = Aᵀ · G
                let bt = raw_transpose(bd, k, n);
                let da = raw_matmul(g, &bt, m, n, k);
                let at = raw_transpose(ad, m, k);
                let db = raw_matmul(&at, g, k, m, n);
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Transpose(a) => {
                let out_shape = &self.nodes[i].value.shape;
                let da = raw_transpose(g, out_shape[0], out_shape[1]);
                self.accum(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let yd = &self.nodes[i].value.data;
                let da: Vec<f64> = g.iter().zip(yd).map(|(gv, &y)| gv * y * (1.0 - y)).collect();
                self.accum(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let xd = &self.nodes[a.index].value.data;
                let da: Vec<f64> =
                    g.iter().zip(xd).map(|(gv, &x)| gv * gelu_grad_scalar(x)).collect();
                self.accum(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let shape = &self.nodes[i].value.shape;
                let (n, d) = (shape[0], shape[1]);
                let yd = &self.nodes[i].value.data;
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    let y = &yd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..d {
                        da[r * d + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xshape = &self.nodes[x.index].value.shape;
                let (n, d) = (xshape[0], xshape[1]);
                let xd = &self.nodes[x.index].value.data;
                let gd = &self.nodes[gamma.index].value.data;
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..n {
                    let row = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..d {
                        let gg = gr[j] * gd[j];
                        mean_gg += gg;
                        mean_ggx += gg * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    mean_gg /= d as f64;
                    mean_ggx /= d as f64;
                    for j in 0..d {
                        let gg = gr[j] * gd[j];
                        dx[r * d + j] = inv * (gg - mean_gg - xhat[j] * mean_ggx);
                    }
                }
                self.accum(grads, *x, &dx);
                self.accum(grads, *gamma, &dgamma);
                self.accum(grads, *beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                let tshape = &self.nodes[table.index].value.shape;
                let (v, d) = (tshape[0], tshape[1]);
                let mut dt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                self.accum(grads, *table, &dt);
            }
            Op::CrossEntropy { logits, targets } => {
                let lshape = &self.nodes[logits.index].value.shape;
                let (n, v) = (lshape[0], lshape[1]);
                let ld = &self.nodes[logits.index].value.data;
                let scale = g[0] / n as f64;
                let mut dl = vec![0.0; n * v];
                for (r, &t) in targets.iter().enumerate() {
                    let mut sm = ld[r * v..(r + 1) * v].to_vec();
                    softmax_row_in_place(&mut sm);
                    for j in 0..v {
                        dl[r * v + j] = scale * (sm[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accum(grads, *logits, &dl);
            }
            Op::MeanRows(a) => {
                let ashape = &self.nodes[a.index].value.shape;
                let (n, d) = (ashape[0], ashape[1]);
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        da[r * d + j] = g[j] / n as f64;
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::SumAll(a) => {
                let numel = self.nodes[a.index].value.numel();
                let da = vec![g[0]; numel];
                self.accum(grads, *a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let n = self.nodes[p.index].value.numel();
                    self.accum(grads, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRows { x, start, len } => {
                let xshape = &self.nodes[x.index].value.shape;
                let stride: usize = xshape[1..].iter().product::<usize>().max(1);
                let mut dx = vec![0.0; self.nodes[x.index].value.numel()];
                dx[start * stride..(start + len) * stride].copy_from_slice(g);
                self.accum(grads, *x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let xshape = &self.nodes[x.index].value.shape;
                let (n, d) = (xshape[0], xshape[1]);
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..*len {
                        dx[r * d + start + j] = g[r * len + j];
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let out_cols = self.nodes[i].value.shape[1];
                let n = self.nodes[i].value.shape[0];
                let mut offset = 0usize;
                for &p in parts {
                    let pc = self.nodes[p.index].value.shape[1];
                    let mut dp = vec![0.0; n * pc];
                    for r in 0..n {
                        dp[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g[r * out_cols + offset..r * out_cols + offset + pc]);
                    }
                    self.accum(grads, p, &dp);
                    offset += pc;
                }
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, g);
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0; self.nodes[x.index].value.numel()];
                dx[*index] = g[0];
                self.accum(grads, *x, &dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.nodes[s.index].value.data[0];
                let xd = &self.nodes[x.index].value.data;
                let dx: Vec<f64> = g.iter().map(|gv| gv * sv).collect();
                let ds: f64 = g.iter().zip(xd).map(|(gv, xv)| gv * xv).sum();
                self.accum(grads, *x, &dx);
                self.accum(grads, *s, &[ds]);
            }
            Op::CosineSim(u, v) => {
                let ud = &self.nodes[u.index].value.data;
                let vd = &self.nodes[v.index].value.data;
                let nu = ud.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = self.nodes[i].value.data[0];
                let gv = g[0];
                let du: Vec<f64> = ud
                    .iter()
                    .zip(vd)
                    .map(|(&uu, &vv)| gv * (vv / (nu * nv) - s * uu / (nu * nu)))
                    .collect();
                let dv: Vec<f64> = ud
                    .iter()
                    .zip(vd)
                    .map(|(&uu, &vv)| gv * (uu / (nu * nv) - s * vv / (nv * nv)))
                    .collect();
                self.accum(grads, *u, &du);
                self.accum(grads, *v, &dv);
            }
            Op::LogSumExp(a) => {
                let mut sm = self.nodes[a.index].value.data.clone();
                softmax_row_in_place(&mut sm);
                let da: Vec<f64> = sm.iter().map(|&p| g[0] * p).collect();
                self.accum(grads, *a, &da);
            }
        }
    }
}

/// Gradients keyed by the leaf nodes they belong to. Absent leaves read as
/// zero.
pub struct GradientMap {
    grads: HashMap<usize, Tensor>,
    epoch: u64,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        assert_eq!(leaf.epoch, self.epoch, "gradient lookup with a stale handle");
        self.grads.get(&leaf.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Per-parameter outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Result of [`grad_check`]: passes iff every parameter does.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub tol: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.pass).map(|e| e.name.as_str()).collect()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Tape gradients of `f` at `params`, in parameter order.
pub fn tape_gradients<F>(f: &F, params: &[(String, Tensor)]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| {
            let mut tt = t.clone();
            tt.set_requires_grad(true);
            tape.leaf(&tt)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    let lv = tape.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::NumericalDomain(format!("loss is not finite: {lv}")));
    }
    let map = tape.backward(loss)?;
    Ok(params
        .iter()
        .zip(&vars)
        .map(|((_, t), &v)| {
            map.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

/// Central-difference gradients of `f` at `params` with step `h`.
pub fn fd_gradients<F>(f: &F, params: &[(String, Tensor)], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |perturbed: &[(String, Tensor)]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|(_, t)| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NumericalDomain(format!("loss is not finite: {v}")));
        }
        Ok(v)
    };

    let mut work: Vec<(String, Tensor)> =
        params.iter().map(|(n, t)| (n.clone(), t.detached())).collect();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let numel = params[pi].1.numel();
        let mut grad = vec![0.0; numel];
        for ei in 0..numel {
            let orig = work[pi].1.data()[ei];
            work[pi].1.data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[pi].1.data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[pi].1.data_mut()[ei] = orig;
            grad[ei] = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::from_vec(params[pi].1.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Compare analytic and numerical gradients parameter by parameter.
pub fn compare_gradients(
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    numeric: &[Tensor],
    tol: f64,
) -> CheckReport {
    let mut entries = Vec::with_capacity(params.len());
    for (i, (name, _)) in params.iter().enumerate() {
        let max = analytic[i]
            .data()
            .iter()
            .zip(numeric[i].data())
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0f64, f64::max);
        entries.push(CheckEntry { name: name.clone(), max_rel_err: max, pass: max <= tol });
    }
    let pass = entries.iter().all(|e| e.pass);
    CheckReport { entries, tol, pass }
}

/// Check the tape gradient of a deterministic scalar function against
/// central finite differences.
pub fn grad_check<F>(f: &F, params: &[(String, Tensor)], h: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = tape_gradients(f, params)?;
    let numeric = fd_gradients(f, params, h)?;
    Ok(compare_gradients(params, &analytic, &numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let i3 = tape.leaf(&Tensor::identity(3));
        let mv = tape.leaf(&m);
        let out = tape.matmul(i3, mv).unwrap();
        assert_eq!(tape.data(out), m.data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(&Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(vec![5, 7], 1.0, &mut rng);
        let b = Tensor::randn(vec![7, 4], 1.0, &mut rng);
        let mut oracle = vec![0.0; 5 * 4];
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.data()[i * 7 + p] * b.data()[p * 4 + j];
                }
                oracle[i * 4 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.leaf(&b);
        let c = tape.matmul(av, bv).unwrap();
        let max = tape
            .data(c)
            .iter()
            .zip(&oracle)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(max, 0.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.0, 50.0, 1.0]));
        let y = tape.sigmoid(x);
        let d = tape.data(y);
        assert_eq!(d[0], 0.5);
        assert!(approx(d[1], 1.0, 1e-15));
        assert!(approx(d[2], 0.7310585786, 1e-9));
    }

    #[test]
    fn sigmoid_extreme_inputs_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![-1e9, 1e9]));
        let y = tape.sigmoid(x);
        assert!(tape.data(y)[0].is_finite() && tape.data(y)[0] < 1e-300);
        assert_eq!(tape.data(y)[1], 1.0);
    }

    #[test]
    fn cosine_similarity_cases() {
        let mut tape = Tape::new();
        let u = tape.leaf(&Tensor::vector(vec![0.3, -0.7, 2.0]));
        let s = tape.cosine_sim(u, u).unwrap();
        assert!(approx(tape.value(s).item(), 1.0, 1e-12));

        let e1 = tape.leaf(&Tensor::vector(vec![1.0, 0.0]));
        let e2 = tape.leaf(&Tensor::vector(vec![0.0, 1.0]));
        let o = tape.cosine_sim(e1, e2).unwrap();
        assert_eq!(tape.value(o).item(), 0.0);

        let a = tape.leaf(&Tensor::vector(vec![1.0, 1.0]));
        let b = tape.leaf(&Tensor::vector(vec![1.0, 0.0]));
        let c = tape.cosine_sim(a, b).unwrap();
        assert!(approx(tape.value(c).item(), 0.7071067812, 1e-9));
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::vector(vec![0.0, 0.0]));
        let u = tape.leaf(&Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.cosine_sim(z, u), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad());
        let s = tape.sum_all(x);
        let map = tape.backward(s).unwrap();
        assert_eq!(map.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_squared_norm_is_2x() {
        let mut tape = Tape::new();
        let xt = Tensor::vector(vec![0.5, -1.5, 2.0]).with_grad();
        let x = tape.leaf(&xt);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let map = tape.backward(loss).unwrap();
        assert_eq!(map.get(x).unwrap().data(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_never_enter_gradient_map() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        let b = tape.leaf(&Tensor::vector(vec![3.0, 4.0])); // requires_grad = false
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(p);
        let map = tape.backward(loss).unwrap();
        assert!(map.get(a).is_some());
        assert!(map.get(b).is_none());
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::randn(vec![6, 9], 3.0, &mut rng));
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..6 {
            let row = &tape.data(y)[r * 9..(r + 1) * 9];
            let sum: f64 = row.iter().sum();
            assert!(approx(sum, 1.0, 1e-12));
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    /// Every differentiable primitive, composed into one scalar function and
    /// checked against central differences on seeds 0–9.
    #[test]
    fn finite_difference_sweep_over_primitives() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let uniform = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            let params = vec![
                ("w".to_string(), Tensor::from_vec(vec![4, 3], uniform(&mut rng, 12)).unwrap()),
                ("x".to_string(), Tensor::from_vec(vec![3, 4], uniform(&mut rng, 12)).unwrap()),
                ("gamma".to_string(), Tensor::vector(uniform(&mut rng, 4))),
                ("beta".to_string(), Tensor::vector(uniform(&mut rng, 4))),
                ("u".to_string(), Tensor::vector(uniform(&mut rng, 5))),
                ("v".to_string(), Tensor::vector(uniform(&mut rng, 5))),
                ("emb".to_string(), Tensor::from_vec(vec![6, 3], uniform(&mut rng, 18)).unwrap()),
            ];
            let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
                let (w, x, gamma, beta, u, v, emb) =
                    (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6]);
                let prod = tape.matmul(w, x)?; // [4,4]
                let normed = tape.layer_norm(prod, gamma, beta, 1e-5)?;
                let act = tape.gelu(normed);
                let sg = tape.sigmoid(act);
                let sm = tape.softmax_rows(sg)?;
                let ce = tape.cross_entropy(sm, &[1, 3, 0, 2])?;
                let looked = tape.embedding(emb, &[0, 2, 5, 2])?; // [4,3]
                let pooled = tape.mean_rows(looked)?; // [3]
                let picked = tape.pick(pooled, 1)?;
                let cos = tape.cosine_sim(u, v)?;
                let lse_in = tape.concat_rows(&[picked, cos])?;
                let lse = tape.logsumexp(lse_in)?;
                let half = tape.slice_cols(prod, 1, 2)?;
                let halft = tape.transpose(half)?;
                let back = tape.concat_cols(&[halft, halft])?; // [2,8]
                let sum1 = tape.sum_all(back);
                let scaled = tape.scale(sum1, 0.25);
                let both = tape.add(lse, scaled)?;
                let sub = tape.sub(both, ce)?;
                let again = tape.mul_scalar(sub, ce)?;
                let row = tape.slice_rows(prod, 0, 2)?;
                let pool2 = tape.mean_rows(row)?;
                let vecsum = tape.sum_all(pool2);
                tape.add(again, vecsum)
            };
            let report = grad_check(&f, &params, 1e-5, 1e-4).unwrap();
            assert!(
                report.pass,
                "seed {seed} failed: {:?}",
                report
                    .entries
                    .iter()
                    .map(|e| (e.name.clone(), e.max_rel_err))
                    .collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let params =
            vec![("x".to_string(), Tensor::vector(vec![0.3, -0.4, 0.9]))];
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let s = tape.sum_all(vars[0]);
            Ok(tape.scale(s, 3.0))
        };
        let report = grad_check(&f, &params, 1e-3, 1e-9).unwrap();
        assert!(report.pass);
        assert!(report.entries[0].max_rel_err < 1e-9);
    }

    #[test]
    fn corrupted_gradient_fails_with_named_parameter() {
        let params = vec![
            ("good".to_string(), Tensor::vector(vec![0.2, 0.8])),
            ("bad".to_string(), Tensor::vector(vec![-0.5, 0.1])),
        ];
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let a = tape.mul(vars[0], vars[0])?;
            let b = tape.mul(vars[1], vars[1])?;
            let sa = tape.sum_all(a);
            let sb = tape.sum_all(b);
            tape.add(sa, sb)
        };
        let mut analytic = tape_gradients(&f, &params).unwrap();
        let numeric = fd_gradients(&f, &params, 1e-5).unwrap();
        for v in analytic[1].data_mut() {
            *v *= 1.1; // off by 10%
        }
        let report = compare_gradients(&params, &analytic, &numeric, 1e-4);
        assert!(!report.pass);
        assert_eq!(report.failing(), vec!["bad"]);
    }

    #[test]
    fn backward_is_linear_over_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = Tensor::randn(vec![4], 1.0, &mut rng).with_grad();
        let yt = Tensor::randn(vec![4], 1.0, &mut rng).with_grad();

        let mut tape = Tape::new();
        let x = tape.leaf(&xt);
        let y = tape.leaf(&yt);
        let l1 = {
            let m = tape.mul(x, x).unwrap();
            tape.sum_all(m)
        };
        let l2 = {
            let m = tape.mul(x, y).unwrap();
            let s = tape.sum_all(m);
            let sg = tape.sigmoid(s);
            tape.sum_all(sg)
        };
        let combined = tape.add(l1, l2).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        let gc = tape.backward(combined).unwrap();
        for var in [x, y] {
            let zeros = Tensor::zeros(vec![4]);
            let a = g1.get(var).unwrap_or(&zeros).data().to_vec();
            let b = g2.get(var).unwrap_or(&zeros).data().to_vec();
            let c = gc.get(var).unwrap().data();
            for i in 0..4 {
                assert!(approx(a[i] + b[i], c[i], 1e-12));
            }
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![3, 7]));
        let loss = tape.cross_entropy(logits, &[0, 4, 6]).unwrap();
        assert!(approx(tape.value(loss).item(), (7.0f64).ln(), 1e-12));
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.leaf(&Tensor::zeros(vec![4, 2]));
        assert!(matches!(tape.embedding(table, &[0, 4]), Err(Error::Input(_))));
    }

    #[test]
    fn tensors_and_models_cross_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
        assert_send_sync::<GradientMap>();
    }

    #[test]
    fn tape_reset_invalidates_handles() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0));
        tape.reset();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _ = tape.value(x);
        }));
        assert!(result.is_err());
    }
}

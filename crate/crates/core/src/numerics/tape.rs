use std::fmt;
use std::str::FromStr;

use super::kernels;
use super::{NumericsError, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the supported differentiable operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Multiply,
    ScalarScale,
    RowSoftmax,
    LayerNorm,
    Gelu,
    EmbeddingLookup,
    ConcatRows,
    SliceRows,
    Mean,
    CrossEntropyWithLogits,
    Sigmoid,
    Log,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Multiply,
        OpKind::ScalarScale,
        OpKind::RowSoftmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::EmbeddingLookup,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::Mean,
        OpKind::CrossEntropyWithLogits,
        OpKind::Sigmoid,
        OpKind::Log,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Multiply => "multiply",
            OpKind::ScalarScale => "scalar-scale",
            OpKind::RowSoftmax => "row-softmax",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Gelu => "gelu",
            OpKind::EmbeddingLookup => "embedding-lookup",
            OpKind::ConcatRows => "concat-rows",
            OpKind::SliceRows => "slice-rows",
            OpKind::Mean => "mean",
            OpKind::CrossEntropyWithLogits => "cross-entropy-with-logits",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = NumericsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s || (s == "relu-or-gelu" && *k == OpKind::Gelu))
            .ok_or_else(|| NumericsError::UnknownOp(s.to_string()))
    }
}

/// An operation together with its non-tensor parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `a * b`, or `a * b^T` when `transpose_rhs` is set.
    MatMul { transpose_rhs: bool },
    /// Elementwise sum; the right operand may also be a single row broadcast over rows.
    Add,
    Multiply,
    ScalarScale(f64),
    /// Softmax along each row. With `causal`, row i only sees columns 0..=i.
    RowSoftmax { causal: bool },
    /// Inputs: x (m x n), gain (n), bias (n).
    LayerNorm { eps: f64 },
    Gelu,
    /// Input: table (V x d). Output: one row per id.
    EmbeddingLookup { ids: Vec<usize> },
    ConcatRows,
    SliceRows { start: usize, end: usize },
    /// Mean over all elements.
    Mean,
    /// Mean over rows of -log softmax(row)[target].
    CrossEntropyWithLogits { targets: Vec<usize> },
    Sigmoid,
    Log,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Multiply => OpKind::Multiply,
            Op::ScalarScale(_) => OpKind::ScalarScale,
            Op::RowSoftmax { .. } => OpKind::RowSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu => OpKind::Gelu,
            Op::EmbeddingLookup { .. } => OpKind::EmbeddingLookup,
            Op::ConcatRows => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::Mean => OpKind::Mean,
            Op::CrossEntropyWithLogits { .. } => OpKind::CrossEntropyWithLogits,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Log => OpKind::Log,
        }
    }
}

#[derive(Debug)]
enum Saved {
    None,
    /// Normalized input and per-row inverse standard deviation.
    LayerNorm { normed: Vec<f64>, inv_std: Vec<f64> },
    /// Softmax probabilities of the logits.
    Probs(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<Var>,
    value: Tensor,
    saved: Saved,
}

/// Records operations in execution order for a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(kind: OpKind, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op: kind,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(kind: OpKind, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    t.matrix_dims().ok_or_else(|| NumericsError::ShapeMismatch {
        op: kind,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
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

    /// Adds a leaf. Its `requires_grad` flag decides whether backward fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(None, Vec::new(), tensor, Saved::None)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient stored on a leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_kind(&self, v: Var) -> Option<OpKind> {
        self.nodes[v.0].op.as_ref().map(Op::kind)
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<Var>, value: Tensor, saved: Saved) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs `op` forward on `inputs` and appends the node.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        let kind = op.kind();
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Multiply => Some(2),
            OpKind::LayerNorm => Some(3),
            OpKind::ConcatRows => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(NumericsError::Arity {
                    op: kind,
                    expected: n,
                    got: inputs.len(),
                })
            }
            None if inputs.is_empty() => {
                return Err(NumericsError::Arity {
                    op: kind,
                    expected: 1,
                    got: 0,
                })
            }
            _ => {}
        }
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(NumericsError::NotOnTape(v.0));
            }
        }
        let requires_grad = inputs.iter().any(|v| self.value(*v).requires_grad());
        let (shape, data, saved) = self.forward(&op, inputs)?;
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push(Some(op), inputs.to_vec(), value, saved))
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<(Vec<usize>, Vec<f64>, Saved), NumericsError> {
        let kind = op.kind();
        let x = self.value(inputs[0]);
        match op {
            Op::MatMul { transpose_rhs } => {
                let y = self.value(inputs[1]);
                let (m, k) = require_matrix(kind, x)?;
                let (r, c) = require_matrix(kind, y)?;
                let mut out;
                let n;
                if *transpose_rhs {
                    if c != k {
                        return Err(mismatch(kind, x, y));
                    }
                    n = r;
                    out = vec![0.0; m * n];
                    kernels::matmul_nt_acc(x.data(), y.data(), &mut out, m, k, n);
                } else {
                    if r != k {
                        return Err(mismatch(kind, x, y));
                    }
                    n = c;
                    out = vec![0.0; m * n];
                    kernels::matmul_acc(x.data(), y.data(), &mut out, m, k, n);
                }
                Ok((vec![m, n], out, Saved::None))
            }
            Op::Add => {
                let y = self.value(inputs[1]);
                if x.shape() == y.shape() {
                    let out = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
                    return Ok((x.shape().to_vec(), out, Saved::None));
                }
                let (m, n) = require_matrix(kind, x)?;
                let is_row = matches!(y.shape(), [c] | [1, c] if *c == n);
                if !is_row {
                    return Err(mismatch(kind, x, y));
                }
                let mut out = x.data().to_vec();
                for i in 0..m {
                    for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(y.data()) {
                        *o += b;
                    }
                }
                Ok((x.shape().to_vec(), out, Saved::None))
            }
            Op::Multiply => {
                let y = self.value(inputs[1]);
                if x.shape() != y.shape() {
                    return Err(mismatch(kind, x, y));
                }
                let out = x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
                Ok((x.shape().to_vec(), out, Saved::None))
            }
            Op::ScalarScale(s) => {
                let out = x.data().iter().map(|v| v * s).collect();
                Ok((x.shape().to_vec(), out, Saved::None))
            }
            Op::RowSoftmax { causal } => {
                let (m, n) = require_matrix(kind, x)?;
                let mut out = x.data().to_vec();
                for i in 0..m {
                    let valid = if *causal { (i + 1).min(n) } else { n };
                    kernels::softmax_in_place(&mut out[i * n..(i + 1) * n], valid);
                }
                Ok((x.shape().to_vec(), out, Saved::None))
            }
            Op::LayerNorm { eps } => {
                let gain = self.value(inputs[1]);
                let bias = self.value(inputs[2]);
                let (m, n) = require_matrix(kind, x)?;
                if gain.len() != n {
                    return Err(mismatch(kind, x, gain));
                }
                if bias.len() != n {
                    return Err(mismatch(kind, x, bias));
                }
                let mut normed = vec![0.0; m * n];
                let mut inv_std = vec![0.0; m];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let row = x.row_slice(i);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    inv_std[i] = is;
                    for j in 0..n {
                        let z = (row[j] - mean) * is;
                        normed[i * n + j] = z;
                        out[i * n + j] = z * gain.data()[j] + bias.data()[j];
                    }
                }
                Ok((x.shape().to_vec(), out, Saved::LayerNorm { normed, inv_std }))
            }
            Op::Gelu => {
                let out = x.data().iter().map(|&v| kernels::gelu(v)).collect();
                Ok((x.shape().to_vec(), out, Saved::None))
            }
            Op::EmbeddingLookup { ids } => {
                let (vocab, d) = require_matrix(kind, x)?;
                if ids.is_empty() {
                    return Err(NumericsError::InvalidShape { shape: vec![0, d] });
                }
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= vocab {
                        return Err(NumericsError::IndexOutOfRange {
                            op: kind,
                            index: id,
                            bound: vocab,
                        });
                    }
                    out.extend_from_slice(x.row_slice(id));
                }
                Ok((vec![ids.len(), d], out, Saved::None))
            }
            Op::ConcatRows => {
                let (_, n) = require_matrix(kind, x)?;
                let mut rows = 0;
                let mut out = Vec::new();
                for v in inputs {
                    let t = self.value(*v);
                    let (m, c) = require_matrix(kind, t)?;
                    if c != n {
                        return Err(mismatch(kind, x, t));
                    }
                    rows += m;
                    out.extend_from_slice(t.data());
                }
                Ok((vec![rows, n], out, Saved::None))
            }
            Op::SliceRows { start, end } => {
                let (m, n) = require_matrix(kind, x)?;
                if start >= end || *end > m {
                    return Err(NumericsError::IndexOutOfRange {
                        op: kind,
                        index: *end,
                        bound: m,
                    });
                }
                let out = x.data()[start * n..end * n].to_vec();
                Ok((vec![end - start, n], out, Saved::None))
            }
            Op::Mean => {
                let mean = x.data().iter().sum::<f64>() / x.len() as f64;
                Ok((vec![1], vec![mean], Saved::None))
            }
            Op::CrossEntropyWithLogits { targets } => {
                let (m, n) = require_matrix(kind, x)?;
                if targets.len() != m {
                    return Err(NumericsError::ShapeMismatch {
                        op: kind,
                        lhs: x.shape().to_vec(),
                        rhs: vec![targets.len()],
                    });
                }
                let mut probs = x.data().to_vec();
                let mut loss = 0.0;
                for (i, &t) in targets.iter().enumerate() {
                    if t >= n {
                        return Err(NumericsError::IndexOutOfRange {
                            op: kind,
                            index: t,
                            bound: n,
                        });
                    }
                    let row = x.row_slice(i);
                    loss += kernels::log_sum_exp(row) - row[t];
                    kernels::softmax_in_place(&mut probs[i * n..(i + 1) * n], n);
                }
                Ok((vec![1], vec![loss / m as f64], Saved::Probs(probs)))
            }
            Op::Sigmoid => {
                let out = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
                Ok((x.shape().to_vec(), out, Saved::None))
            }
            Op::Log => {
                if let Some(&bad) = x.data().iter().find(|v| **v <= 0.0) {
                    return Err(NumericsError::Domain { op: kind, value: bad });
                }
                let out = x.data().iter().map(|v| v.ln()).collect();
                Ok((x.shape().to_vec(), out, Saved::None))
            }
        }
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate into the
    /// leaves' `grad` fields; leaves with `requires_grad == false` are untouched.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::NotOnTape(loss.0));
        }
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(op) = &node.op else {
                // leaf: keep the gradient for the final write-back
                grads[idx] = Some(g);
                continue;
            };
            let contributions = self.input_grads(op, node, &g);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if node.op.is_none() && node.value.requires_grad() {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.accumulate_grad(&g);
            }
        }
        // requires_grad leaves recorded after the loss still get a (zero) gradient
        for node in self.nodes.iter_mut().skip(loss.0 + 1) {
            if node.op.is_none() && node.value.requires_grad() && node.value.grad().is_none() {
                let zeros = vec![0.0; node.value.len()];
                node.value.accumulate_grad(&zeros);
            }
        }
        Ok(())
    }

    fn input_grads(&self, op: &Op, node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let needs = |i: usize| self.value(node.inputs[i]).requires_grad();
        let x = self.value(node.inputs[0]);
        match op {
            Op::MatMul { transpose_rhs } => {
                let y = self.value(node.inputs[1]);
                let (m, k) = x.matrix_dims().unwrap();
                let n = node.value.cols();
                let mut dx = None;
                let mut dy = None;
                if needs(0) {
                    let mut d = vec![0.0; m * k];
                    if *transpose_rhs {
                        // y is n x k: dx = g * y
                        kernels::matmul_acc(g, y.data(), &mut d, m, n, k);
                    } else {
                        // y is k x n: dx = g * y^T
                        kernels::matmul_nt_acc(g, y.data(), &mut d, m, n, k);
                    }
                    dx = Some(d);
                }
                if needs(1) {
                    if *transpose_rhs {
                        // dy (n x k) = g^T * x
                        let mut d = vec![0.0; n * k];
                        kernels::matmul_tn_acc(g, x.data(), &mut d, m, n, k);
                        dy = Some(d);
                    } else {
                        // dy (k x n) = x^T * g
                        let mut d = vec![0.0; k * n];
                        kernels::matmul_tn_acc(x.data(), g, &mut d, m, k, n);
                        dy = Some(d);
                    }
                }
                vec![dx, dy]
            }
            Op::Add => {
                let y = self.value(node.inputs[1]);
                let dx = needs(0).then(|| g.to_vec());
                let dy = needs(1).then(|| {
                    if y.len() == g.len() {
                        g.to_vec()
                    } else {
                        let n = y.len();
                        let mut d = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (a, b) in d.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        d
                    }
                });
                vec![dx, dy]
            }
            Op::Multiply => {
                let y = self.value(node.inputs[1]);
                let dx = needs(0).then(|| g.iter().zip(y.data()).map(|(a, b)| a * b).collect());
                let dy = needs(1).then(|| g.iter().zip(x.data()).map(|(a, b)| a * b).collect());
                vec![dx, dy]
            }
            Op::ScalarScale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
            Op::RowSoftmax { .. } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let inner = kernels::dot(grow, yrow);
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - inner);
                    }
                }
                vec![Some(d)]
            }
            Op::LayerNorm { .. } => {
                let Saved::LayerNorm { normed, inv_std } = &node.saved else {
                    unreachable!("layer-norm node without saved statistics")
                };
                let gain = self.value(node.inputs[1]).data();
                let n = gain.len();
                let m = inv_std.len();
                let dx = needs(0).then(|| {
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let zr = &normed[i * n..(i + 1) * n];
                        let mut sum_dz = 0.0;
                        let mut sum_dz_z = 0.0;
                        for j in 0..n {
                            let dz = gr[j] * gain[j];
                            sum_dz += dz;
                            sum_dz_z += dz * zr[j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let dz = gr[j] * gain[j];
                            d[i * n + j] = inv_std[i] * (dz - sum_dz / nf - zr[j] * sum_dz_z / nf);
                        }
                    }
                    d
                });
                let dgain = needs(1).then(|| {
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * normed[i * n + j];
                        }
                    }
                    d
                });
                let dbias = needs(2).then(|| {
                    let mut d = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (a, b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    d
                });
                vec![dx, dgain, dbias]
            }
            Op::Gelu => vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| gv * kernels::gelu_derivative(xv))
                    .collect(),
            )],
            Op::EmbeddingLookup { ids } => {
                let d = x.cols();
                let mut out = vec![0.0; x.len()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut out[id * d..(id + 1) * d]);
                }
                vec![Some(out)]
            }
            Op::ConcatRows => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|v| {
                        let t = self.value(*v);
                        let part = &g[offset..offset + t.len()];
                        offset += t.len();
                        t.requires_grad().then(|| part.to_vec())
                    })
                    .collect()
            }
            Op::SliceRows { start, end } => {
                let n = x.cols();
                let mut d = vec![0.0; x.len()];
                d[start * n..end * n].copy_from_slice(g);
                vec![Some(d)]
            }
            Op::Mean => {
                let v = g[0] / x.len() as f64;
                vec![Some(vec![v; x.len()])]
            }
            Op::CrossEntropyWithLogits { targets } => {
                let Saved::Probs(probs) = &node.saved else {
                    unreachable!("cross-entropy node without saved probabilities")
                };
                let n = x.cols();
                let m = targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / m).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= g[0] / m;
                }
                vec![Some(d)]
            }
            Op::Sigmoid => {
                let y = node.value.data();
                vec![Some(g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect())]
            }
            Op::Log => vec![Some(g.iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect())],
        }
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.record(Op::MatMul { transpose_rhs: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.record(Op::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.record(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.record(Op::Multiply, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        self.record(Op::ScalarScale(s), &[a])
    }

    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var, NumericsError> {
        self.record(Op::RowSoftmax { causal }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        self.record(Op::LayerNorm { eps: 1e-5 }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(Op::Gelu, &[a])
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        self.record(Op::EmbeddingLookup { ids: ids.to_vec() }, &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        self.record(Op::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        self.record(Op::SliceRows { start, end }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(Op::Mean, &[a])
    }

    /// Sum of all elements, as mean scaled by the element count.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).len() as f64;
        let m = self.mean(a)?;
        self.scale(m, n)
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        self.record(
            Op::CrossEntropyWithLogits {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(Op::Sigmoid, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(Op::Log, &[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let s = tape.softmax(x, false).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_pair_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn unknown_op_name_is_rejected() {
        assert!(matches!(
            "conv2d".parse::<OpKind>(),
            Err(NumericsError::UnknownOp(name)) if name == "conv2d"
        ));
        for kind in OpKind::ALL {
            assert_eq!(kind.name().parse::<OpKind>().unwrap(), kind);
        }
        assert_eq!("relu-or-gelu".parse::<OpKind>().unwrap(), OpKind::Gelu);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap().with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap().with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::row(vec![3.0, 4.0]).with_requires_grad(true));
        let p = tape.mul(w, x).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]).with_requires_grad(true));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(NumericsError::NonScalarLoss { .. })));
        assert!(matches!(tape.backward(Var(99)), Err(NumericsError::NotOnTape(99))));
    }

    #[test]
    fn result_requires_grad_iff_an_input_does() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0]));
        let b = tape.leaf(Tensor::row(vec![1.0]).with_requires_grad(true));
        let c = tape.add(a, a).unwrap();
        let d = tape.add(a, b).unwrap();
        assert!(!tape.value(c).requires_grad());
        assert!(tape.value(d).requires_grad());
        assert_eq!(tape.op_kind(d), Some(OpKind::Add));
        assert_eq!(tape.len(), 4);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![0.0, 0.0]]).unwrap());
        let s = tape.softmax(x, true).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(NumericsError::Domain { .. })));
    }
}

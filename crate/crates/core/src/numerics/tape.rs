//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Operations append nodes to a [`Tape`] in execution order, so parents always
//! precede children and the backward sweep is a single reverse pass. Gradients
//! accumulate only along subgraphs that reach a `requires_grad` leaf; frozen
//! parts of a computation (e.g. base-model weights during editing) cost
//! nothing in the backward pass.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_into, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    MulScalarVar(usize, usize),
    DivScalarVar(usize, usize),
    SubScalarVar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBroadcast(usize, usize),
    MulRowBroadcast(usize, usize),
    MulConstTensor(usize, Tensor),
    Sigmoid(usize),
    Silu(usize),
    Relu(usize),
    LayerNormRows(usize, f64),
    CausalSoftmaxRows(usize),
    CrossEntropySelect { logits: usize, picks: Vec<(usize, usize)> },
    EmbedLookup { table: usize, ids: Vec<usize> },
    GatherRows { x: usize, rows: Vec<usize> },
    SliceCols { x: usize, from: usize, to: usize },
    ConcatCols(Vec<usize>),
    ColSum(usize),
    RowMax(usize),
    Sum(usize),
    Mean(usize),
    PairwiseDiff(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by the leaf variables they belong to.
pub struct Gradients {
    tape: u64,
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.map.get(&v.idx)
    }
}

/// Operation record for one reverse-mode differentiation pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grad_leaves: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_leaves: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        VarId { tape: self.id, idx }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Registers a leaf. Gradients are reported for it iff
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        let rg = t.requires_grad();
        let v = self.push(t, Op::Leaf, rg);
        if rg {
            self.grad_leaves.push(v.idx);
        }
        v
    }

    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a.idx, b.idx), self.needs(a.idx) || self.needs(b.idx))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a.idx, b.idx), self.needs(a.idx) || self.needs(b.idx))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a.idx, b.idx), self.needs(a.idx) || self.needs(b.idx))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let out = self.map(a, |x| c * x);
        self.push(out, Op::Scale(a.idx, c), self.needs(a.idx))
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> VarId {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddConst(a.idx, c), self.needs(a.idx))
    }

    /// Elementwise multiply by a scalar variable (1-element tensor).
    pub fn mul_scalar_var(&mut self, a: VarId, s: VarId) -> VarId {
        let sv = self.scalar_of(s);
        let out = self.map(a, |x| x * sv);
        self.push(out, Op::MulScalarVar(a.idx, s.idx), self.needs(a.idx) || self.needs(s.idx))
    }

    pub fn div_scalar_var(&mut self, a: VarId, s: VarId) -> VarId {
        let sv = self.scalar_of(s);
        let out = self.map(a, |x| x / sv);
        self.push(out, Op::DivScalarVar(a.idx, s.idx), self.needs(a.idx) || self.needs(s.idx))
    }

    /// y_i = a_i − s for a scalar variable s.
    pub fn sub_scalar_var(&mut self, a: VarId, s: VarId) -> VarId {
        let sv = self.scalar_of(s);
        let out = self.map(a, |x| x - sv);
        self.push(out, Op::SubScalarVar(a.idx, s.idx), self.needs(a.idx) || self.needs(s.idx))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (m, k) = (self.nodes[a.idx].value.rows(), self.nodes[a.idx].value.cols());
        let (k2, n) = (self.nodes[b.idx].value.rows(), self.nodes[b.idx].value.cols());
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.nodes[a.idx].value.data(),
            self.nodes[b.idx].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(t, Op::MatMul(a.idx, b.idx), self.needs(a.idx) || self.needs(b.idx))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.idx].value.transpose();
        self.push(out, Op::Transpose(a.idx), self.needs(a.idx))
    }

    /// (n×c) + (c) broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: VarId, v: VarId) -> VarId {
        let x = &self.nodes[a.idx].value;
        let b = &self.nodes[v.idx].value;
        let c = x.cols();
        assert_eq!(b.numel(), c, "row broadcast length");
        let mut out = x.clone();
        for i in 0..x.rows() {
            for j in 0..c {
                out.data_mut()[i * c + j] += b.data()[j];
            }
        }
        self.push(out, Op::AddRowBroadcast(a.idx, v.idx), self.needs(a.idx) || self.needs(v.idx))
    }

    /// y_ij = a_ij · v_j.
    pub fn mul_row_broadcast(&mut self, a: VarId, v: VarId) -> VarId {
        let x = &self.nodes[a.idx].value;
        let b = &self.nodes[v.idx].value;
        let c = x.cols();
        assert_eq!(b.numel(), c, "row broadcast length");
        let mut out = x.clone();
        for i in 0..x.rows() {
            for j in 0..c {
                out.data_mut()[i * c + j] *= b.data()[j];
            }
        }
        self.push(out, Op::MulRowBroadcast(a.idx, v.idx), self.needs(a.idx) || self.needs(v.idx))
    }

    /// Elementwise multiply by a constant tensor (e.g. a 0/1 position mask).
    pub fn mul_const_tensor(&mut self, a: VarId, c: Tensor) -> VarId {
        let x = &self.nodes[a.idx].value;
        assert_eq!(x.shape(), c.shape(), "mask shape");
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("mask shape");
        self.push(out, Op::MulConstTensor(a.idx, c), self.needs(a.idx))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a.idx), self.needs(a.idx))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let out = self.map(a, |x| x * sigmoid(x));
        self.push(out, Op::Silu(a.idx), self.needs(a.idx))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a.idx), self.needs(a.idx))
    }

    /// Row-wise standardization (x − μ)/√(σ² + eps); affine terms are applied
    /// separately with the broadcast ops.
    pub fn layer_norm_rows(&mut self, a: VarId, eps: f64) -> VarId {
        let x = &self.nodes[a.idx].value;
        let (n, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let t = Tensor::new(vec![n, c], out).expect("layernorm shape");
        self.push(t, Op::LayerNormRows(a.idx, eps), self.needs(a.idx))
    }

    /// Softmax over each row's causal prefix (columns 0..=row); the masked
    /// tail is exactly zero.
    pub fn causal_softmax_rows(&mut self, a: VarId) -> VarId {
        let x = &self.nodes[a.idx].value;
        let (n, c) = (x.rows(), x.cols());
        assert_eq!(n, c, "causal softmax expects a square score matrix");
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &x.row(i)[..=i];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for j in 0..=i {
                out[i * c + j] /= denom;
            }
        }
        let t = Tensor::new(vec![n, c], out).expect("softmax shape");
        self.push(t, Op::CausalSoftmaxRows(a.idx), self.needs(a.idx))
    }

    /// Σ over picks of −log softmax(logits[row])[token]; the scalar sum of
    /// per-token negative log-likelihoods.
    pub fn cross_entropy_select(&mut self, logits: VarId, picks: Vec<(usize, usize)>) -> VarId {
        let x = &self.nodes[logits.idx].value;
        let mut total = 0.0;
        for &(row, tok) in &picks {
            total += lse(x.row(row)) - x.at(row, tok);
        }
        let t = Tensor::scalar(total);
        let ng = self.needs(logits.idx);
        self.push(t, Op::CrossEntropySelect { logits: logits.idx, picks }, ng)
    }

    /// Gathers rows of an embedding table by token id.
    pub fn embed_lookup(&mut self, table: VarId, ids: Vec<usize>) -> VarId {
        let t = &self.nodes[table.idx].value;
        let c = t.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in &ids {
            out.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(vec![ids.len(), c], out).expect("embed shape");
        let ng = self.needs(table.idx);
        self.push(v, Op::EmbedLookup { table: table.idx, ids }, ng)
    }

    pub fn gather_rows(&mut self, x: VarId, rows: Vec<usize>) -> VarId {
        let t = &self.nodes[x.idx].value;
        let c = t.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            out.extend_from_slice(t.row(r));
        }
        let v = Tensor::new(vec![rows.len(), c], out).expect("gather shape");
        let ng = self.needs(x.idx);
        self.push(v, Op::GatherRows { x: x.idx, rows }, ng)
    }

    pub fn slice_cols(&mut self, x: VarId, from: usize, to: usize) -> VarId {
        let t = &self.nodes[x.idx].value;
        let (n, c) = (t.rows(), t.cols());
        assert!(from < to && to <= c, "column slice {from}..{to} of {c}");
        let mut out = Vec::with_capacity(n * (to - from));
        for i in 0..n {
            out.extend_from_slice(&t.row(i)[from..to]);
        }
        let v = Tensor::new(vec![n, to - from], out).expect("slice shape");
        let ng = self.needs(x.idx);
        self.push(v, Op::SliceCols { x: x.idx, from, to }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].idx].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.idx].value.cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                out.extend_from_slice(self.nodes[p.idx].value.row(i));
            }
        }
        let v = Tensor::new(vec![n, total], out).expect("concat shape");
        let ng = parts.iter().any(|p| self.needs(p.idx));
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), ng)
    }

    /// Column sums of an n×c matrix, producing a length-c vector.
    pub fn col_sum(&mut self, x: VarId) -> VarId {
        let t = &self.nodes[x.idx].value;
        let (n, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                out[j] += t.at(i, j);
            }
        }
        let v = Tensor::vector(out);
        self.push(v, Op::ColSum(x.idx), self.needs(x.idx))
    }

    /// Per-row maximum of an n×c matrix. Ties route gradient to the lowest
    /// column index.
    pub fn row_max(&mut self, x: VarId) -> VarId {
        let t = &self.nodes[x.idx].value;
        let out: Vec<f64> = (0..t.rows())
            .map(|i| t.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let v = Tensor::vector(out);
        self.push(v, Op::RowMax(x.idx), self.needs(x.idx))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let total: f64 = self.nodes[x.idx].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x.idx), self.needs(x.idx))
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let t = &self.nodes[x.idx].value;
        let total: f64 = t.data().iter().sum();
        let v = Tensor::scalar(total / t.numel() as f64);
        self.push(v, Op::Mean(x.idx), self.needs(x.idx))
    }

    /// Outer difference y_pq = a_p − b_q of two vectors.
    pub fn pairwise_diff(&mut self, a: VarId, b: VarId) -> VarId {
        let x = &self.nodes[a.idx].value;
        let y = &self.nodes[b.idx].value;
        let (n, m) = (x.numel(), y.numel());
        let mut out = Vec::with_capacity(n * m);
        for p in 0..n {
            for q in 0..m {
                out.push(x.data()[p] - y.data()[q]);
            }
        }
        let v = Tensor::new(vec![n, m], out).expect("pairwise shape");
        self.push(v, Op::PairwiseDiff(a.idx, b.idx), self.needs(a.idx) || self.needs(b.idx))
    }

    fn scalar_of(&self, s: VarId) -> f64 {
        let t = &self.nodes[s.idx].value;
        assert!(t.numel() == 1, "expected a scalar variable");
        t.data()[0]
    }

    fn map(&self, a: VarId, f: impl Fn(f64) -> f64) -> Tensor {
        let x = &self.nodes[a.idx].value;
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("elementwise shape")
    }

    fn zip(&self, a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let x = &self.nodes[a.idx].value;
        let y = &self.nodes[b.idx].value;
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
        .expect("elementwise shape")
    }

    /// Reverse sweep from a scalar loss. Returns a gradient for every
    /// `requires_grad` leaf (zero when the loss does not depend on it).
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if loss.tape != self.id {
            return Err(Error::InvalidArgument(
                "loss variable belongs to a different (detached) tape".into(),
            ));
        }
        if self.nodes[loss.idx].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::new(
            self.nodes[loss.idx].value.shape().to_vec(),
            vec![1.0],
        )?);

        for idx in (0..=loss.idx).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut map = HashMap::new();
        for &leaf in &self.grad_leaves {
            let g = grads[leaf]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[leaf].value.shape().to_vec()));
            map.insert(leaf, g);
        }
        Ok(Gradients { tape: self.id, map })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], parent: usize, update: &dyn Fn(&mut Tensor)| {
            if !self.nodes[parent].needs_grad {
                return;
            }
            let slot = grads[parent]
                .get_or_insert_with(|| Tensor::zeros(self.nodes[parent].value.shape().to_vec()));
            update(slot);
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|t| add_assign(t, g.data(), 1.0));
                acc(grads, *b, &|t| add_assign(t, g.data(), 1.0));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|t| add_assign(t, g.data(), 1.0));
                acc(grads, *b, &|t| add_assign(t, g.data(), -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                acc(grads, *a, &|t| {
                    for ((o, gi), bi) in t.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(grads, *b, &|t| {
                    for ((o, gi), ai) in t.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &|t| add_assign(t, g.data(), *c)),
            Op::AddConst(a, _) => acc(grads, *a, &|t| add_assign(t, g.data(), 1.0)),
            Op::MulScalarVar(a, s) => {
                let sv = self.nodes[*s].value.data()[0];
                let av = self.nodes[*a].value.data();
                acc(grads, *a, &|t| add_assign(t, g.data(), sv));
                acc(grads, *s, &|t| {
                    t.data_mut()[0] += g.data().iter().zip(av).map(|(gi, ai)| gi * ai).sum::<f64>();
                });
            }
            Op::DivScalarVar(a, s) => {
                let sv = self.nodes[*s].value.data()[0];
                let av = self.nodes[*a].value.data();
                acc(grads, *a, &|t| add_assign(t, g.data(), 1.0 / sv));
                acc(grads, *s, &|t| {
                    t.data_mut()[0] -= g
                        .data()
                        .iter()
                        .zip(av)
                        .map(|(gi, ai)| gi * ai / (sv * sv))
                        .sum::<f64>();
                });
            }
            Op::SubScalarVar(a, s) => {
                acc(grads, *a, &|t| add_assign(t, g.data(), 1.0));
                acc(grads, *s, &|t| {
                    t.data_mut()[0] -= g.data().iter().sum::<f64>();
                });
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                acc(grads, *a, &|t| {
                    // dA = g · Bᵀ
                    let bt = bv.transpose();
                    let mut tmp = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), m, n, k, &mut tmp);
                    add_assign(t, &tmp, 1.0);
                });
                acc(grads, *b, &|t| {
                    // dB = Aᵀ · g
                    let at = av.transpose();
                    let mut tmp = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), k, m, n, &mut tmp);
                    add_assign(t, &tmp, 1.0);
                });
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(grads, *a, &|t| add_assign(t, gt.data(), 1.0));
            }
            Op::AddRowBroadcast(a, v) => {
                acc(grads, *a, &|t| add_assign(t, g.data(), 1.0));
                let (n, c) = (g.rows(), g.cols());
                acc(grads, *v, &|t| {
                    for i in 0..n {
                        for j in 0..c {
                            t.data_mut()[j] += g.at(i, j);
                        }
                    }
                });
            }
            Op::MulRowBroadcast(a, v) => {
                let av = &self.nodes[*a].value;
                let vv = &self.nodes[*v].value;
                let (n, c) = (g.rows(), g.cols());
                acc(grads, *a, &|t| {
                    for i in 0..n {
                        for j in 0..c {
                            t.data_mut()[i * c + j] += g.at(i, j) * vv.data()[j];
                        }
                    }
                });
                acc(grads, *v, &|t| {
                    for i in 0..n {
                        for j in 0..c {
                            t.data_mut()[j] += g.at(i, j) * av.at(i, j);
                        }
                    }
                });
            }
            Op::MulConstTensor(a, c) => {
                let cv = c.data();
                acc(grads, *a, &|t| {
                    for ((o, gi), ci) in t.data_mut().iter_mut().zip(g.data()).zip(cv) {
                        *o += gi * ci;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[idx].value.data();
                acc(grads, *a, &|t| {
                    for ((o, gi), yi) in t.data_mut().iter_mut().zip(g.data()).zip(yv) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Silu(a) => {
                let xv = self.nodes[*a].value.data();
                acc(grads, *a, &|t| {
                    for ((o, gi), xi) in t.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        let s = sigmoid(*xi);
                        *o += gi * (s + xi * s * (1.0 - s));
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.nodes[*a].value.data();
                acc(grads, *a, &|t| {
                    for ((o, gi), xi) in t.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::LayerNormRows(a, eps) => {
                let xv = &self.nodes[*a].value;
                let yv = &self.nodes[idx].value;
                let (n, c) = (xv.rows(), xv.cols());
                acc(grads, *a, &|t| {
                    for i in 0..n {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let grow = g.row(i);
                        let yrow = yv.row(i);
                        let sum_g: f64 = grow.iter().sum();
                        let sum_gy: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            t.data_mut()[i * c + j] += inv / c as f64
                                * (c as f64 * grow[j] - sum_g - yrow[j] * sum_gy);
                        }
                    }
                });
            }
            Op::CausalSoftmaxRows(a) => {
                let pv = &self.nodes[idx].value;
                let n = pv.rows();
                acc(grads, *a, &|t| {
                    for i in 0..n {
                        let p = &pv.row(i)[..=i];
                        let grow = &g.row(i)[..=i];
                        let inner: f64 = grow.iter().zip(p).map(|(x, y)| x * y).sum();
                        for j in 0..=i {
                            t.data_mut()[i * n + j] += p[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropySelect { logits, picks } => {
                let gv = g.data()[0];
                let lv = &self.nodes[*logits].value;
                let c = lv.cols();
                acc(grads, *logits, &|t| {
                    for &(row, tok) in picks {
                        let lse_row = lse(lv.row(row));
                        for j in 0..c {
                            let p = (lv.at(row, j) - lse_row).exp();
                            t.data_mut()[row * c + j] += gv * p;
                        }
                        t.data_mut()[row * c + tok] -= gv;
                    }
                });
            }
            Op::EmbedLookup { table, ids } => {
                let c = self.nodes[*table].value.cols();
                acc(grads, *table, &|t| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            t.data_mut()[id * c + j] += g.at(i, j);
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = self.nodes[*x].value.cols();
                acc(grads, *x, &|t| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            t.data_mut()[r * c + j] += g.at(i, j);
                        }
                    }
                });
            }
            Op::SliceCols { x, from, to } => {
                let c = self.nodes[*x].value.cols();
                let w = to - from;
                acc(grads, *x, &|t| {
                    for i in 0..g.rows() {
                        for j in 0..w {
                            t.data_mut()[i * c + from + j] += g.at(i, j);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    acc(grads, p, &|t| {
                        for i in 0..g.rows() {
                            for j in 0..w {
                                t.data_mut()[i * w + j] += g.at(i, offset + j);
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ColSum(a) => {
                let (n, c) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                acc(grads, *a, &|t| {
                    for i in 0..n {
                        for j in 0..c {
                            t.data_mut()[i * c + j] += g.data()[j];
                        }
                    }
                });
            }
            Op::RowMax(a) => {
                let xv = &self.nodes[*a].value;
                let c = xv.cols();
                acc(grads, *a, &|t| {
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let mut arg = 0;
                        for j in 1..c {
                            if row[j] > row[arg] {
                                arg = j;
                            }
                        }
                        t.data_mut()[i * c + arg] += g.data()[i];
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc(grads, *a, &|t| {
                    for o in t.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel() as f64;
                let gv = g.data()[0] / n;
                acc(grads, *a, &|t| {
                    for o in t.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::PairwiseDiff(a, b) => {
                let n = self.nodes[*a].value.numel();
                let m = self.nodes[*b].value.numel();
                acc(grads, *a, &|t| {
                    for p in 0..n {
                        t.data_mut()[p] += g.row(p).iter().sum::<f64>();
                    }
                });
                acc(grads, *b, &|t| {
                    for q in 0..m {
                        for p in 0..n {
                            t.data_mut()[q] -= g.at(p, q);
                        }
                    }
                });
            }
        }
    }
}

fn add_assign(t: &mut Tensor, src: &[f64], scale: f64) {
    debug_assert_eq!(t.numel(), src.len());
    for (o, s) in t.data_mut().iter_mut().zip(src) {
        *o += scale * s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log Σ exp, stabilized by the row maximum.
fn lse(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Central-difference gradient (f(x+εe) − f(x−εe)) / 2ε, one coordinate at a
/// time. The independent oracle for every backward rule in this crate.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let scale = a.l2_norm().max(b.l2_norm());
        if scale < 1e-8 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.add_const(c, 2.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_detached_tape() {
        let mut t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(Tensor::scalar(1.0).with_grad());
        let y = t1.mul(x, x);
        assert!(t2.backward(y).is_err());
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        let mut rng = seeded_rng(11);
        let w1 = Tensor::randn(vec![4, 3], 0.7, &mut rng);
        let w2 = Tensor::randn(vec![4, 4], 0.7, &mut rng);
        let w3 = Tensor::randn(vec![1, 4], 0.7, &mut rng);
        let x0 = Tensor::randn(vec![3, 1], 1.0, &mut rng).with_grad();

        let run = |x: &Tensor| -> (Tape, VarId, VarId) {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let w1v = tape.constant(w1.clone());
            let w2v = tape.constant(w2.clone());
            let w3v = tape.constant(w3.clone());
            let h1 = tape.matmul(w1v, xv);
            let h1 = tape.silu(h1);
            let h2 = tape.matmul(w2v, h1);
            let h2 = tape.sigmoid(h2);
            let h3 = tape.matmul(w3v, h2);
            let y = tape.sum(h3);
            (tape, xv, y)
        };

        let (tape, xv, y) = run(&x0);
        let grads = tape.backward(y).unwrap();
        let ad = grads.get(xv).unwrap().clone();

        let fd = finite_difference_grad(
            &mut |x| {
                let (tape, _, y) = run(&x.clone().with_grad());
                tape.value(y).scalar_value()
            },
            &x0,
            1e-5,
        )
        .unwrap();

        assert!(rel_err(&ad, &fd) < 1e-4, "rel err {}", rel_err(&ad, &fd));
    }

    #[test]
    fn finite_difference_rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_grad(&mut |t| t.data()[0], &x, 0.0).is_err());
    }

    #[test]
    fn finite_difference_square() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_grad(&mut |t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_constant() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let g = finite_difference_grad(&mut |_| 4.25, &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    /// Every structured op gets the same treatment: random input, scalar
    /// readout, AD vs central differences.
    #[test]
    fn structured_ops_match_finite_differences() {
        let mut rng = seeded_rng(23);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, VarId) -> VarId>)> = vec![
            ("layer_norm", Box::new(|t, x| t.layer_norm_rows(x, 1e-5))),
            ("causal_softmax", Box::new(|t, x| t.causal_softmax_rows(x))),
            ("sigmoid", Box::new(|t, x| t.sigmoid(x))),
            ("silu", Box::new(|t, x| t.silu(x))),
            ("relu", Box::new(|t, x| t.relu(x))),
            ("transpose", Box::new(|t, x| t.transpose(x))),
            ("col_sum", Box::new(|t, x| t.col_sum(x))),
            ("row_max", Box::new(|t, x| t.row_max(x))),
            (
                "gather",
                Box::new(|t, x| t.gather_rows(x, vec![2, 0, 2])),
            ),
            ("slice", Box::new(|t, x| t.slice_cols(x, 1, 3))),
        ];
        for (name, build) in cases {
            let x0 = Tensor::randn(vec![4, 4], 1.0, &mut rng).with_grad();
            let run = |x: &Tensor| -> (Tape, VarId, VarId) {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let mid = build(&mut tape, xv);
                // A fixed quadratic readout makes the scalar sensitive to
                // every output entry.
                let sq = tape.mul(mid, mid);
                let shifted = tape.add_const(mid, 0.3);
                let mixed = tape.add(sq, shifted);
                let y = tape.sum(mixed);
                (tape, xv, y)
            };
            let (tape, xv, y) = run(&x0);
            let ad = tape.backward(y).unwrap().get(xv).unwrap().clone();
            let fd = finite_difference_grad(
                &mut |x| {
                    let (tape, _, y) = run(&x.clone().with_grad());
                    tape.value(y).scalar_value()
                },
                &x0,
                1e-5,
            )
            .unwrap();
            let e = rel_err(&ad, &fd);
            assert!(e < 1e-4, "{name}: rel err {e}");
        }
    }

    #[test]
    fn matmul_and_broadcast_ops_match_finite_differences() {
        let mut rng = seeded_rng(37);
        let a0 = Tensor::randn(vec![3, 4], 1.0, &mut rng).with_grad();
        let b0 = Tensor::randn(vec![4, 2], 1.0, &mut rng).with_grad();
        let v0 = Tensor::randn(vec![2], 1.0, &mut rng).with_grad();

        let run = |a: &Tensor, b: &Tensor, v: &Tensor| -> (Tape, [VarId; 3], VarId) {
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let vv = tape.leaf(v.clone());
            let m = tape.matmul(av, bv);
            let m = tape.add_row_broadcast(m, vv);
            let m = tape.mul_row_broadcast(m, vv);
            let s = tape.mean(m);
            let m2 = tape.sub_scalar_var(m, s);
            let m3 = tape.mul(m2, m2);
            let total = tape.sum(m3);
            let y = tape.div_scalar_var(total, s);
            let y = tape.mul_scalar_var(y, s);
            (tape, [av, bv, vv], y)
        };

        let (tape, vars, y) = run(&a0, &b0, &v0);
        let grads = tape.backward(y).unwrap();
        for (i, (x0, _)) in [(&a0, "a"), (&b0, "b"), (&v0, "v")].iter().enumerate() {
            let ad = grads.get(vars[i]).unwrap().clone();
            let fd = finite_difference_grad(
                &mut |x| {
                    let mut args = [a0.clone(), b0.clone(), v0.clone()];
                    args[i] = x.clone().with_grad();
                    let (tape, _, y) = run(&args[0], &args[1], &args[2]);
                    tape.value(y).scalar_value()
                },
                x0,
                1e-5,
            )
            .unwrap();
            let e = rel_err(&ad, &fd);
            assert!(e < 1e-4, "arg {i}: rel err {e}");
        }
    }

    #[test]
    fn cross_entropy_matches_finite_differences_and_uniform_value() {
        let mut rng = seeded_rng(41);
        let x0 = Tensor::randn(vec![3, 5], 1.0, &mut rng).with_grad();
        let picks = vec![(0, 2), (1, 0), (2, 4)];
        let run = |x: &Tensor| -> (Tape, VarId, VarId) {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = tape.cross_entropy_select(xv, picks.clone());
            (tape, xv, y)
        };
        let (tape, xv, y) = run(&x0);
        let ad = tape.backward(y).unwrap().get(xv).unwrap().clone();
        let fd = finite_difference_grad(
            &mut |x| {
                let (tape, _, y) = run(&x.clone().with_grad());
                tape.value(y).scalar_value()
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(rel_err(&ad, &fd) < 1e-4);

        // Uniform logits: each pick contributes ln(V).
        let mut tape = Tape::new();
        let flat = tape.constant(Tensor::zeros(vec![2, 7]));
        let y = tape.cross_entropy_select(flat, vec![(0, 3), (1, 6)]);
        let expect = 2.0 * (7.0f64).ln();
        assert!((tape.value(y).scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn embedding_and_pairwise_match_finite_differences() {
        let mut rng = seeded_rng(53);
        let table0 = Tensor::randn(vec![6, 3], 1.0, &mut rng).with_grad();
        let ids = vec![1, 4, 1, 0];
        let run = |t0: &Tensor| -> (Tape, VarId, VarId) {
            let mut tape = Tape::new();
            let tv = tape.leaf(t0.clone());
            let e = tape.embed_lookup(tv, ids.clone());
            let s = tape.col_sum(e);
            let r = tape.gather_rows(e, vec![0, 2]);
            let rsum = tape.col_sum(r);
            let pd = tape.pairwise_diff(s, rsum);
            let sq = tape.mul(pd, pd);
            let y = tape.sum(sq);
            (tape, tv, y)
        };
        let (tape, tv, y) = run(&table0);
        let ad = tape.backward(y).unwrap().get(tv).unwrap().clone();
        let fd = finite_difference_grad(
            &mut |x| {
                let (tape, _, y) = run(&x.clone().with_grad());
                tape.value(y).scalar_value()
            },
            &table0,
            1e-5,
        )
        .unwrap();
        assert!(rel_err(&ad, &fd) < 1e-4);
    }

    #[test]
    fn random_compositions_match_finite_differences() {
        // 100 random instances over a pool of smooth exported ops.
        let mut rng = seeded_rng(61);
        for case in 0..100 {
            let x0 = Tensor::randn(vec![3, 3], 0.8, &mut rng).with_grad();
            let w = Tensor::randn(vec![3, 3], 0.8, &mut rng);
            let pick = case % 5;
            let run = |x: &Tensor| -> (Tape, VarId, VarId) {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let wv = tape.constant(w.clone());
                let mid = match pick {
                    0 => {
                        let m = tape.matmul(xv, wv);
                        tape.silu(m)
                    }
                    1 => {
                        let m = tape.layer_norm_rows(xv, 1e-5);
                        tape.matmul(m, wv)
                    }
                    2 => {
                        let m = tape.causal_softmax_rows(xv);
                        tape.matmul(m, wv)
                    }
                    3 => {
                        let m = tape.sigmoid(xv);
                        tape.mul(m, xv)
                    }
                    _ => {
                        let m = tape.matmul(wv, xv);
                        let t = tape.transpose(m);
                        tape.mul(t, xv)
                    }
                };
                let y = tape.mean(mid);
                (tape, xv, y)
            };
            let (tape, xv, y) = run(&x0);
            let ad = tape.backward(y).unwrap().get(xv).unwrap().clone();
            let fd = finite_difference_grad(
                &mut |x| {
                    let (tape, _, y) = run(&x.clone().with_grad());
                    tape.value(y).scalar_value()
                },
                &x0,
                1e-5,
            )
            .unwrap();
            let e = rel_err(&ad, &fd);
            assert!(e < 1e-4, "case {case}: rel err {e}");
        }
    }
}

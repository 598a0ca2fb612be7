//! Define-by-run reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! return lightweight [`Tensor`] handles (node id plus shape) and record the
//! information their backward rule needs. [`Tape::backward`] walks the nodes
//! in reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes created before it.
//!
//! Every forward result is checked for NaN/Inf; a non-finite value is an
//! error rather than something that silently propagates into gradients.

use crate::error::{Error, Result};
use crate::matrix::{gemm_nt, gemm_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: NodeId,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce everything to 1×1.
    All,
    /// Reduce within each row, giving rows×1.
    EachRow,
    /// Reduce within each column, giving 1×cols.
    EachCol,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    Reduce(ReduceOp, Axis, NodeId, Vec<usize>),
    RowL2Normalize(NodeId, Vec<f64>),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId, Option<Vec<bool>>),
    Gather(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Rows whose L2 norm falls below this are rejected by [`Tape::row_l2_normalize`].
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.id.0].value
    }

    /// Value of a 1×1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.value(t).data()[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<Tensor> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Matrix) -> Result<Tensor> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Tensor> {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        value: Matrix,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let t = Tensor {
            id: NodeId(self.nodes.len()),
            rows: value.rows(),
            cols: value.cols(),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(t)
    }

    fn rg(&self, ids: &[Tensor]) -> bool {
        ids.iter().any(|t| self.nodes[t.id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a.id, b.id), rg, "matmul")
    }

    pub fn binary(&mut self, op: BinaryOp, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let value = match op {
            BinaryOp::Add => va.zip_map(vb, |x, y| x + y),
            BinaryOp::Sub => va.zip_map(vb, |x, y| x - y),
            BinaryOp::Mul => va.zip_map(vb, |x, y| x * y),
        };
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Binary(op, a.id, b.id), rg, "elementwise")
    }

    pub fn unary(&mut self, op: UnaryOp, a: Tensor) -> Result<Tensor> {
        let va = self.value(a);
        let value = match op {
            UnaryOp::Exp => va.map(f64::exp),
            UnaryOp::Log => {
                if let Some(&bad) = va.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::LogNonPositive { value: bad });
                }
                va.map(f64::ln)
            }
            UnaryOp::Tanh => va.map(f64::tanh),
            UnaryOp::Sigmoid => va.map(sigmoid),
            UnaryOp::Relu => va.map(|x| x.max(0.0)),
            UnaryOp::Neg => va.map(|x| -x),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary(op, a.id), rg, "elementwise")
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a.id, c), rg, "scale")
    }

    /// Adds a 1×cols row to every row of `a` (explicit bias broadcast).
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: a.shape(),
                right: row.shape(),
            });
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a.id, row.id), rg, "add_row")
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a.id), rg, "transpose")
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Tensor, axis: Axis) -> Result<Tensor> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::EmptyReduction);
        }
        let (rows, cols) = va.shape();
        let groups: Vec<Vec<usize>> = match axis {
            Axis::All => vec![(0..rows * cols).collect()],
            Axis::EachRow => (0..rows)
                .map(|r| (r * cols..(r + 1) * cols).collect())
                .collect(),
            Axis::EachCol => (0..cols)
                .map(|c| (0..rows).map(|r| r * cols + c).collect())
                .collect(),
        };
        let data = va.data();
        let mut out = Vec::with_capacity(groups.len());
        let mut argmax = Vec::new();
        for g in &groups {
            match op {
                ReduceOp::Sum => out.push(g.iter().map(|&i| data[i]).sum()),
                ReduceOp::Mean => {
                    out.push(g.iter().map(|&i| data[i]).sum::<f64>() / g.len() as f64)
                }
                ReduceOp::Max => {
                    // strict comparison keeps the first occurrence on ties
                    let mut best = g[0];
                    for &i in &g[1..] {
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(data[best]);
                }
            }
        }
        let shape = match axis {
            Axis::All => (1, 1),
            Axis::EachRow => (rows, 1),
            Axis::EachCol => (1, cols),
        };
        let value = Matrix::new(shape.0, shape.1, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reduce(op, axis, a.id, argmax), rg, "reduce")
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.reduce(ReduceOp::Sum, a, Axis::All)
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        self.reduce(ReduceOp::Mean, a, Axis::All)
    }

    /// Scales every row to unit L2 norm.
    pub fn row_l2_normalize(&mut self, a: Tensor) -> Result<Tensor> {
        let va = self.value(a);
        let mut value = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let n = crate::matrix::norm(va.row(r));
            if n < MIN_ROW_NORM {
                return Err(Error::NearZeroNorm { row: r, norm: n });
            }
            value.row_mut(r).iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RowL2Normalize(a.id, norms), rg, "row_l2_normalize")
    }

    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let va = self.value(a);
        if va.cols() == 0 {
            return Err(Error::EmptyReduction);
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a.id), rg, "softmax_rows")
    }

    /// Row-wise `log Σ exp`, optionally restricted to entries where `mask` is
    /// true. Computed with max-subtraction; output is rows×1.
    pub fn log_sum_exp_rows(&mut self, a: Tensor, mask: Option<Vec<bool>>) -> Result<Tensor> {
        let va = self.value(a);
        if let Some(m) = &mask {
            if m.len() != va.len() {
                return Err(Error::ShapeMismatch {
                    op: "log_sum_exp_rows",
                    left: va.shape(),
                    right: (m.len(), 1),
                });
            }
        }
        let cols = va.cols();
        let mut out = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
            let row = va.row(r);
            let m = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::EmptyReduction);
            }
            let s: f64 = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| (row[c] - m).exp())
                .sum();
            out.push(m + s.ln());
        }
        let value = Matrix::new(va.rows(), 1, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSumExpRows(a.id, mask), rg, "log_sum_exp_rows")
    }

    /// Collects entries at the given flat (row-major) indices into an n×1 column.
    pub fn gather(&mut self, a: Tensor, indices: Vec<usize>) -> Result<Tensor> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.len()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: va.shape(),
                right: (bad, 1),
            });
        }
        let data: Vec<f64> = indices.iter().map(|&i| va.data()[i]).collect();
        let value = Matrix::new(indices.len(), 1, data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Gather(a.id, indices), rg, "gather")
    }

    /// Reverse pass from a 1×1 `loss`.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: loss.rows,
                cols: loss.cols,
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.id.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(upstream);
                continue;
            }
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, g: Matrix| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm_nt(dy, vb, &mut da);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(va, dy, &mut db);
                    acc(*b, db);
                }
            }
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                match op {
                    BinaryOp::Add => {
                        if wants(a) {
                            acc(a, dy.clone());
                        }
                        if wants(b) {
                            acc(b, dy.clone());
                        }
                    }
                    BinaryOp::Sub => {
                        if wants(a) {
                            acc(a, dy.clone());
                        }
                        if wants(b) {
                            acc(b, dy.map(|x| -x));
                        }
                    }
                    BinaryOp::Mul => {
                        if wants(a) {
                            acc(a, dy.zip_map(val(b), |g, y| g * y));
                        }
                        if wants(b) {
                            acc(b, dy.zip_map(val(a), |g, x| g * x));
                        }
                    }
                }
            }
            Op::Unary(op, a) => {
                if !wants(*a) {
                    return;
                }
                let x = val(*a);
                let y = &node.value;
                let g = match op {
                    UnaryOp::Exp => dy.zip_map(y, |g, y| g * y),
                    UnaryOp::Log => dy.zip_map(x, |g, x| g / x),
                    UnaryOp::Tanh => dy.zip_map(y, |g, y| g * (1.0 - y * y)),
                    UnaryOp::Sigmoid => dy.zip_map(y, |g, y| g * y * (1.0 - y)),
                    UnaryOp::Relu => dy.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    UnaryOp::Neg => dy.map(|g| -g),
                };
                acc(*a, g);
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(*a, dy.map(|g| g * c));
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc(*a, dy.clone());
                }
                if wants(*row) {
                    let mut db = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (d, g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    acc(*row, db);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    acc(*a, dy.transpose());
                }
            }
            Op::Reduce(op, axis, a, argmax) => {
                if !wants(*a) {
                    return;
                }
                let x = val(*a);
                let (rows, cols) = x.shape();
                let mut dx = Matrix::zeros(rows, cols);
                let group_of = |i: usize| match axis {
                    Axis::All => 0,
                    Axis::EachRow => i / cols,
                    Axis::EachCol => i % cols,
                };
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let n = match axis {
                            Axis::All => rows * cols,
                            Axis::EachRow => cols,
                            Axis::EachCol => rows,
                        } as f64;
                        let div = if *op == ReduceOp::Mean { n } else { 1.0 };
                        for (i, d) in dx.data_mut().iter_mut().enumerate() {
                            *d = dy.data()[group_of(i)] / div;
                        }
                    }
                    ReduceOp::Max => {
                        for (g, &i) in argmax.iter().enumerate() {
                            dx.data_mut()[i] += dy.data()[g];
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::RowL2Normalize(a, norms) => {
                if !wants(*a) {
                    return;
                }
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let proj = crate::matrix::dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * proj) / norms[r];
                    }
                }
                acc(*a, dx);
            }
            Op::SoftmaxRows(a) => {
                if !wants(*a) {
                    return;
                }
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let s = crate::matrix::dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - s);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSumExpRows(a, mask) => {
                if !wants(*a) {
                    return;
                }
                let x = val(*a);
                let cols = x.cols();
                let mut dx = Matrix::zeros(x.rows(), cols);
                for r in 0..x.rows() {
                    let lse = node.value.data()[r];
                    let g = dy.data()[r];
                    for c in 0..cols {
                        if mask.as_ref().is_none_or(|m| m[r * cols + c]) {
                            dx.set(r, c, g * (x.get(r, c) - lse).exp());
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Gather(a, indices) => {
                if !wants(*a) {
                    return;
                }
                let x = val(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in indices.iter().enumerate() {
                    dx.data_mut()[i] += dy.data()[k];
                }
                acc(*a, dx);
            }
        }
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

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `t`, or zeros when `t` was not reachable from the loss.
    pub fn get(&self, t: Tensor) -> Matrix {
        self.grads
            .get(t.id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Matrix::zeros(t.rows, t.cols))
    }

    /// Appends the gradients of `params` to `out` in order.
    pub fn flatten_into(&self, params: &[Tensor], out: &mut Vec<f64>) {
        for &p in params {
            match self.grads.get(p.id.0).and_then(|g| g.as_ref()) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, p.rows * p.cols)),
            }
        }
    }

    pub fn flatten(&self, params: &[Tensor]) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(params, &mut out);
        out
    }
}

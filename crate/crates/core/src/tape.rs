//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records a DAG of operations as it evaluates them; node ids are
//! handed out in construction order, which is already a topological order,
//! so the backward pass is a single reverse sweep. Gradients flow only into
//! subgraphs rooted at leaves created with `needs_grad = true`; everything
//! else is skipped.
//!
//! Each training or scoring pass builds a fresh tape. Parameters enter as
//! leaves holding a copy of their current value; the caller maps leaf ids
//! back to parameters when applying updates.

use crate::tensor::Tensor;

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    AddBiasRow(NodeId, NodeId),
    AddBroadcastCol(NodeId, NodeId),
    AddConst(NodeId),
    MulConst(NodeId, Tensor),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Transpose(NodeId),
    GatherRows {
        x: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    /// Per column: log Σ_rows exp. Output `[1, cols]`.
    LseRows(NodeId),
    /// Per row: log Σ_cols exp. Output `[rows, 1]`.
    LseCols(NodeId),
    /// Mean over rows of `-x[i, targets[i]]`; `x` holds log-probabilities.
    PickNllMean {
        x: NodeId,
        targets: Vec<usize>,
    },
    /// Sum of the selected cells; repeated cells count multiply.
    PickSum {
        x: NodeId,
        cells: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// A leaf that never receives gradient (inputs, masks, tables).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let g = self.nodes[a].needs_grad;
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Hadamard(a, b), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMulNT(a, b), g)
    }

    /// Adds a `[1, c]` bias row to every row of `x`.
    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let v = self.value(x).add_row_broadcast(self.value(bias));
        let g = self.any_grad(&[x, bias]);
        self.push(v, Op::AddBiasRow(x, bias), g)
    }

    /// Adds a `[r, 1]` column to every column of `x`.
    pub fn add_broadcast_col(&mut self, x: NodeId, col: NodeId) -> NodeId {
        let v = self.value(x).add_col_broadcast(self.value(col));
        let g = self.any_grad(&[x, col]);
        self.push(v, Op::AddBroadcastCol(x, col), g)
    }

    /// Adds a fixed matrix (for example an attention mask) to `x`.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> NodeId {
        let v = self.value(x).add(c);
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::AddConst(x), g)
    }

    /// Elementwise product with a fixed matrix (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, c: Tensor) -> NodeId {
        let v = self.value(x).hadamard(&c);
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::MulConst(x, c), g)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::Relu(x), g)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).softmax_rows();
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::SoftmaxRows(x), g)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).log_softmax_rows();
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::LogSoftmaxRows(x), g)
    }

    /// Row-wise layer norm with learned `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (normed, _, _) = layer_norm_forward(self.value(x), eps);
        let v = normed
            .hadamard(&row_tile(self.value(gain), normed.rows))
            .add(&row_tile(self.value(bias), normed.rows));
        let g = self.any_grad(&[x, gain, bias]);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, g)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::Transpose(x), g)
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let v = self.value(x).gather_rows(&indices);
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::GatherRows { x, indices }, g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor> = parts.iter().map(|&id| self.value(id)).collect();
        let v = Tensor::concat_rows(&tensors);
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor> = parts.iter().map(|&id| self.value(id)).collect();
        let v = Tensor::concat_cols(&tensors);
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_rows(start, len);
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::SliceRows { x, start }, g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_cols(start, len);
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::SliceCols { x, start }, g)
    }

    /// Column-wise log-sum-exp: `[r, c] → [1, c]`.
    pub fn lse_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(1, xv.cols);
        for j in 0..xv.cols {
            let mut max = f64::NEG_INFINITY;
            for i in 0..xv.rows {
                max = max.max(xv.get(i, j));
            }
            let sum: f64 = (0..xv.rows).map(|i| (xv.get(i, j) - max).exp()).sum();
            v.set(0, j, max + sum.ln());
        }
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::LseRows(x), g)
    }

    /// Row-wise log-sum-exp: `[r, c] → [r, 1]`.
    pub fn lse_cols(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows, 1);
        for i in 0..xv.rows {
            let row = xv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&a| (a - max).exp()).sum();
            v.set(i, 0, max + sum.ln());
        }
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::LseCols(x), g)
    }

    /// `x` holds per-row log-probabilities; the result is the mean negative
    /// log-probability of the target column of each row, shape `[1, 1]`.
    pub fn pick_nll_mean(&mut self, x: NodeId, targets: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows, targets.len(), "one target per row required");
        let m = targets.len() as f64;
        let total: f64 = targets.iter().enumerate().map(|(i, &t)| xv.get(i, t)).sum();
        let v = Tensor::from_data(1, 1, vec![-total / m]);
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::PickNllMean { x, targets }, g)
    }

    /// Sum of selected cells, shape `[1, 1]`. Repeats accumulate.
    pub fn pick_sum(&mut self, x: NodeId, cells: Vec<(usize, usize)>) -> NodeId {
        let xv = self.value(x);
        let total: f64 = cells.iter().map(|&(i, j)| xv.get(i, j)).sum();
        let v = Tensor::from_data(1, 1, vec![total]);
        let g = self.nodes[x].needs_grad;
        self.push(v, Op::PickSum { x, cells }, g)
    }

    /// Reverse sweep from a `[1, 1]` root. Returns gradients for every
    /// reachable leaf with `needs_grad`; intermediate gradients are freed as
    /// soon as they are consumed.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root].needs_grad {
            return Gradients { grads };
        }
        grads[root] = Some(Tensor::from_data(1, 1, vec![1.0]));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(dy) = grads[id].clone() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            self.propagate(id, &dy, &mut grads);
            grads[id] = None;
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.add_scaled_in_place(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.scale(-1.0));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, dy.scale(*c));
            }
            Op::Hadamard(a, b) => {
                self.accumulate(grads, *a, dy.hadamard(self.value(*b)));
                self.accumulate(grads, *b, dy.hadamard(self.value(*a)));
            }
            Op::MatMul(a, b) => {
                self.accumulate(grads, *a, dy.matmul_nt(self.value(*b)));
                self.accumulate(grads, *b, self.value(*a).matmul_tn(dy));
            }
            Op::MatMulNT(a, b) => {
                self.accumulate(grads, *a, dy.matmul(self.value(*b)));
                self.accumulate(grads, *b, dy.matmul_tn(self.value(*a)));
            }
            Op::AddBiasRow(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                let mut db = Tensor::zeros(1, dy.cols);
                for i in 0..dy.rows {
                    for j in 0..dy.cols {
                        db.data[j] += dy.get(i, j);
                    }
                }
                self.accumulate(grads, *bias, db);
            }
            Op::AddBroadcastCol(x, col) => {
                self.accumulate(grads, *x, dy.clone());
                let mut dc = Tensor::zeros(dy.rows, 1);
                for i in 0..dy.rows {
                    dc.data[i] = dy.row(i).iter().sum();
                }
                self.accumulate(grads, *col, dc);
            }
            Op::AddConst(x) => {
                self.accumulate(grads, *x, dy.clone());
            }
            Op::MulConst(x, c) => {
                self.accumulate(grads, *x, dy.hadamard(c));
            }
            Op::Relu(x) => {
                let y = &self.nodes[id].value;
                let mut dx = dy.clone();
                for (d, &v) in dx.data.iter_mut().zip(&y.data) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let dot: f64 = (0..y.cols).map(|j| dy.get(i, j) * y.get(i, j)).sum();
                    for j in 0..y.cols {
                        dx.set(i, j, y.get(i, j) * (dy.get(i, j) - dot));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let mut dx = dy.clone();
                for i in 0..y.rows {
                    let row_sum: f64 = dy.row(i).iter().sum();
                    for j in 0..y.cols {
                        let p = y.get(i, j).exp();
                        dx.set(i, j, dy.get(i, j) - p * row_sum);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (normed, _means, stds) = layer_norm_forward(xv, *eps);
                let cols = xv.cols as f64;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                let mut dgain = Tensor::zeros(1, xv.cols);
                let mut dbias = Tensor::zeros(1, xv.cols);
                for (i, &std) in stds.iter().enumerate() {
                    // u = dy ⊙ gain for this row
                    let mut mean_u = 0.0;
                    let mut mean_ux = 0.0;
                    for j in 0..xv.cols {
                        let u = dy.get(i, j) * gv.data[j];
                        mean_u += u;
                        mean_ux += u * normed.get(i, j);
                    }
                    mean_u /= cols;
                    mean_ux /= cols;
                    for j in 0..xv.cols {
                        let u = dy.get(i, j) * gv.data[j];
                        dx.set(i, j, (u - mean_u - normed.get(i, j) * mean_ux) / std);
                        dgain.data[j] += dy.get(i, j) * normed.get(i, j);
                        dbias.data[j] += dy.get(i, j);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, dy.transpose());
            }
            Op::GatherRows { x, indices } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..dy.cols {
                        dx.data[idx * dx.cols + j] += dy.get(i, j);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    self.accumulate(grads, p, dy.slice_rows(offset, rows));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    self.accumulate(grads, p, dy.slice_cols(offset, cols));
                    offset += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for i in 0..dy.rows {
                    dx.row_mut(start + i).copy_from_slice(dy.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for i in 0..dy.rows {
                    dx.row_mut(i)[*start..start + dy.cols].copy_from_slice(dy.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LseRows(x) => {
                let xv = self.value(*x);
                let y = &self.nodes[id].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for i in 0..xv.rows {
                    for j in 0..xv.cols {
                        dx.set(i, j, (xv.get(i, j) - y.get(0, j)).exp() * dy.get(0, j));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LseCols(x) => {
                let xv = self.value(*x);
                let y = &self.nodes[id].value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for i in 0..xv.rows {
                    for j in 0..xv.cols {
                        dx.set(i, j, (xv.get(i, j) - y.get(i, 0)).exp() * dy.get(i, 0));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PickNllMean { x, targets } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                let scale = -dy.get(0, 0) / targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    dx.data[i * dx.cols + t] += scale;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PickSum { x, cells } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for &(i, j) in cells {
                    dx.data[i * dx.cols + j] += dy.get(0, 0);
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

/// Row-wise normalization shared by forward and backward: returns
/// `(x̂, means, stds)` where `x̂ = (x - μ) / sqrt(var + eps)` and variance is
/// the population variance of the row.
fn layer_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let cols = x.cols as f64;
    let mut normed = Tensor::zeros(x.rows, x.cols);
    let mut means = Vec::with_capacity(x.rows);
    let mut stds = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let std = (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            normed.set(i, j, (v - mean) / std);
        }
        means.push(mean);
        stds.push(std);
    }
    (normed, means, stds)
}

fn row_tile(row: &Tensor, rows: usize) -> Tensor {
    assert_eq!(row.rows, 1);
    let mut out = Tensor::zeros(rows, row.cols);
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(row.row(0));
    }
    out
}

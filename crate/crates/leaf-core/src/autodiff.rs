//! Reverse-mode automatic differentiation over dense rank-≤3 arrays of f64.
//!
//! A [`Graph`] is an append-only arena of [`Node`]s; each op method validates
//! operand shapes, computes the forward value eagerly, and records parent
//! links for the backward pass. The op set is exactly what a miniature
//! causal-attention model and its losses need; there is no broadcasting
//! beyond bias-row addition, no views, and no higher-order derivatives.
//!
//! Determinism: node ids are creation-ordered and [`Graph::backward`] walks
//! them in strict reverse order with freshly zeroed accumulators, so repeated
//! backward passes over the same graph produce bit-identical gradients.

use crate::error::{LeafError, Result};

/// Variance floor inside layer normalization.
const LN_EPS: f64 = 1e-5;

// ─── Tensor ───

/// Dense row-major array with 1 to 3 positive dimensions; all values finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting bad ranks, zero dims, size mismatches, and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(LeafError::ShapeMismatch {
                op: "tensor",
                detail: format!("rank {} outside 1..=3", shape.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(LeafError::ShapeMismatch {
                op: "tensor",
                detail: format!("zero dimension in {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LeafError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LeafError::NonFinite("tensor"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        let n = v.len();
        Self::new(vec![n], v)
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

    /// The value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(LeafError::ShapeMismatch {
                op: "scalar_value",
                detail: format!("shape {:?} is not scalar", self.shape),
            })
        }
    }

    /// (rows, cols) of a rank-2 tensor.
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(LeafError::ShapeMismatch {
                op,
                detail: format!("expected rank 2, got {:?}", self.shape),
            }),
        }
    }

    /// Row length for row-wise ops: rank-1 tensors count as a single row.
    fn row_width(&self, op: &'static str) -> Result<usize> {
        match self.shape[..] {
            [n] => Ok(n),
            [_, c] => Ok(c),
            _ => Err(LeafError::ShapeMismatch {
                op,
                detail: format!("expected rank 1 or 2, got {:?}", self.shape),
            }),
        }
    }
}

// ─── Graph ───

/// Handle to a node in a [`Graph`]; valid only for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    Relu(NodeId),
    LayerNorm(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Mean(NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    Transpose(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation graph; gradients live in a parallel arena so the
/// backward pass can read node values while writing accumulators.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Admits an input tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulator contents for `id` (zeros before any backward).
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.grads.push(Vec::new());
        NodeId(self.nodes.len() - 1)
    }

    /// Validates finiteness of a computed value and appends the node.
    fn push_checked(&mut self, op_name: &'static str, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.data.iter().all(|v| v.is_finite()) {
            return Err(LeafError::NonFinite(op_name));
        }
        Ok(self.push(op, value))
    }

    // ─── forward ops ───

    /// Elementwise sum; also accepts `a: [n,m] + b: [1,m]` as bias-row
    /// addition (the only broadcast admitted).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape == vb.shape {
            let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
            Tensor { shape: va.shape.clone(), data }
        } else if let ([n, m], [1, mb]) = (&va.shape[..], &vb.shape[..]) {
            if m != mb {
                return Err(LeafError::ShapeMismatch {
                    op: "add",
                    detail: format!("bias row {:?} vs {:?}", vb.shape, va.shape),
                });
            }
            let mut data = va.data.clone();
            for row in data.chunks_mut(*m) {
                for (x, y) in row.iter_mut().zip(&vb.data) {
                    *x += y;
                }
            }
            Tensor { shape: vec![*n, *m], data }
        } else {
            return Err(LeafError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape, vb.shape),
            });
        };
        self.push_checked("add", Op::Add(a, b), value)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(LeafError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", va.shape, vb.shape),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Tensor { shape: va.shape.clone(), data };
        self.push_checked("mul", Op::Mul(a, b), value)
    }

    /// Matrix product `[n,k] × [k,m] → [n,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = va.dims2("matmul")?;
        let (kb, m) = vb.dims2("matmul")?;
        if k != kb {
            return Err(LeafError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} × {:?}", va.shape, vb.shape),
            });
        }
        let mut data = vec![0.0; n * m];
        matmul_acc(&va.data, &vb.data, n, k, m, &mut data);
        let value = Tensor { shape: vec![n, m], data };
        self.push_checked("matmul", Op::MatMul(a, b), value)
    }

    /// Row lookup: `table: [r,c]` gathered at `indices` → `[len,c]`.
    /// Duplicate indices are allowed; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = &self.nodes[table.0].value;
        let (r, c) = vt.dims2("gather_rows")?;
        if indices.is_empty() {
            return Err(LeafError::InvalidArgument("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(LeafError::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&vt.data[i * c..(i + 1) * c]);
        }
        let value = Tensor { shape: vec![indices.len(), c], data };
        self.push_checked("gather_rows", Op::GatherRows(table, indices.to_vec()), value)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor { shape: va.shape.clone(), data };
        self.push_checked("relu", Op::Relu(a), value)
    }

    /// Row-wise normalization to zero mean and unit variance (ε-floored);
    /// rank-1 input is treated as a single row. No learned scale or shift.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let w = va.row_width("layer_norm")?;
        let mut data = Vec::with_capacity(va.data.len());
        for row in va.data.chunks(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            data.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let value = Tensor { shape: va.shape.clone(), data };
        self.push_checked("layer_norm", Op::LayerNorm(a), value)
    }

    /// Row-wise softmax; rank-1 input is treated as a single row.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let w = va.row_width("softmax_rows")?;
        let mut data = Vec::with_capacity(va.data.len());
        for row in va.data.chunks(w) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let value = Tensor { shape: va.shape.clone(), data };
        self.push_checked("softmax_rows", Op::SoftmaxRows(a), value)
    }

    /// Row-wise log-softmax; rank-1 input is treated as a single row.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let w = va.row_width("log_softmax_rows")?;
        let mut data = Vec::with_capacity(va.data.len());
        for row in va.data.chunks(w) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let value = Tensor { shape: va.shape.clone(), data };
        self.push_checked("log_softmax_rows", Op::LogSoftmaxRows(a), value)
    }

    /// Mean over all elements → scalar `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let m = va.data.iter().sum::<f64>() / va.data.len() as f64;
        let value = Tensor { shape: vec![1], data: vec![m] };
        self.push_checked("mean", Op::Mean(a), value)
    }

    /// Vertical stack `[a,c] ⧺ [b,c] → [a+b,c]`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, ca) = va.dims2("concat_rows")?;
        let (rb, cb) = vb.dims2("concat_rows")?;
        if ca != cb {
            return Err(LeafError::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{:?} vs {:?}", va.shape, vb.shape),
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let value = Tensor { shape: vec![ra + rb, ca], data };
        self.push_checked("concat_rows", Op::ConcatRows(a, b), value)
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (r, c) = va.dims2("slice_rows")?;
        if start >= end || end > r {
            return Err(LeafError::InvalidArgument(format!(
                "slice_rows: range {start}..{end} invalid for {r} rows"
            )));
        }
        let data = va.data[start * c..end * c].to_vec();
        let value = Tensor { shape: vec![end - start, c], data };
        self.push_checked("slice_rows", Op::SliceRows(a, start, end), value)
    }

    /// Matrix transpose `[n,m] → [m,n]`.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (n, m) = va.dims2("transpose")?;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = va.data[i * m + j];
            }
        }
        let value = Tensor { shape: vec![m, n], data };
        self.push_checked("transpose", Op::Transpose(a), value)
    }

    // ─── backward ───

    /// Reverse-mode sweep from a scalar `root`. All accumulators are zeroed
    /// first; afterwards `grad(n)` holds droot/d(value of n) for every node
    /// created no later than `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.data.len() != 1 {
            return Err(LeafError::ShapeMismatch {
                op: "backward",
                detail: format!("root shape {:?} is not scalar", self.nodes[root.0].value.shape),
            });
        }
        for (g, n) in self.grads.iter_mut().zip(&self.nodes) {
            g.clear();
            g.resize(n.value.data.len(), 0.0);
        }
        self.grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            // Parents always precede children, so splitting at i gives
            // mutable access to every parent accumulator.
            let (parent_grads, rest) = self.grads.split_at_mut(i);
            let out_grad = &rest[0];
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let ga = a.0;
                    let gb = b.0;
                    let b_shape = &self.nodes[gb].value.shape;
                    let a_shape = &self.nodes[ga].value.shape;
                    for (g, d) in parent_grads[ga].iter_mut().zip(out_grad) {
                        *g += d;
                    }
                    if a_shape == b_shape {
                        for (g, d) in parent_grads[gb].iter_mut().zip(out_grad) {
                            *g += d;
                        }
                    } else {
                        // Bias row: sum the output gradient over rows.
                        let m = b_shape[1];
                        for row in out_grad.chunks(m) {
                            for (g, d) in parent_grads[gb].iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                    for ((g, d), y) in parent_grads[a.0].iter_mut().zip(out_grad).zip(vb) {
                        *g += d * y;
                    }
                    for ((g, d), x) in parent_grads[b.0].iter_mut().zip(out_grad).zip(va) {
                        *g += d * x;
                    }
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (n, k) = (va.shape[0], va.shape[1]);
                    let m = vb.shape[1];
                    if a.0 == b.0 {
                        // Self-product: both factor gradients land in one slot.
                        let mut ga = vec![0.0; va.data.len()];
                        matmul_bt_acc(out_grad, &vb.data, n, m, k, &mut ga);
                        matmul_at_acc(&va.data, out_grad, n, k, m, &mut ga);
                        for (g, d) in parent_grads[a.0].iter_mut().zip(&ga) {
                            *g += d;
                        }
                    } else {
                        matmul_bt_acc(out_grad, &vb.data, n, m, k, &mut parent_grads[a.0]);
                        matmul_at_acc(&va.data, out_grad, n, k, m, &mut parent_grads[b.0]);
                    }
                }
                Op::GatherRows(t, indices) => {
                    let c = self.nodes[t.0].value.shape[1];
                    let tg = &mut parent_grads[t.0];
                    for (j, &row) in indices.iter().enumerate() {
                        for (g, d) in tg[row * c..(row + 1) * c].iter_mut().zip(&out_grad[j * c..(j + 1) * c]) {
                            *g += d;
                        }
                    }
                }
                Op::Relu(a) => {
                    let va = &self.nodes[a.0].value.data;
                    for ((g, d), x) in parent_grads[a.0].iter_mut().zip(out_grad).zip(va) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::LayerNorm(a) => {
                    let va = &self.nodes[a.0].value;
                    let w = if va.shape.len() == 1 { va.shape[0] } else { va.shape[1] };
                    let y = &node.value.data;
                    let ga = &mut parent_grads[a.0];
                    for r in 0..va.data.len() / w {
                        let xs = &va.data[r * w..(r + 1) * w];
                        let ys = &y[r * w..(r + 1) * w];
                        let gys = &out_grad[r * w..(r + 1) * w];
                        let mean = xs.iter().sum::<f64>() / w as f64;
                        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gmean = gys.iter().sum::<f64>() / w as f64;
                        let gymean = gys.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                        for ((g, &gy), &yv) in ga[r * w..(r + 1) * w].iter_mut().zip(gys).zip(ys) {
                            *g += inv * (gy - gmean - yv * gymean);
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let w = {
                        let s = &self.nodes[a.0].value.shape;
                        if s.len() == 1 { s[0] } else { s[1] }
                    };
                    let y = &node.value.data;
                    let ga = &mut parent_grads[a.0];
                    for r in 0..y.len() / w {
                        let ys = &y[r * w..(r + 1) * w];
                        let gys = &out_grad[r * w..(r + 1) * w];
                        let dot: f64 = ys.iter().zip(gys).map(|(y, g)| y * g).sum();
                        for ((g, &gy), &yv) in ga[r * w..(r + 1) * w].iter_mut().zip(gys).zip(ys) {
                            *g += yv * (gy - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let w = {
                        let s = &self.nodes[a.0].value.shape;
                        if s.len() == 1 { s[0] } else { s[1] }
                    };
                    let y = &node.value.data;
                    let ga = &mut parent_grads[a.0];
                    for r in 0..y.len() / w {
                        let ys = &y[r * w..(r + 1) * w];
                        let gys = &out_grad[r * w..(r + 1) * w];
                        let gsum: f64 = gys.iter().sum();
                        for ((g, &gy), &yv) in ga[r * w..(r + 1) * w].iter_mut().zip(gys).zip(ys) {
                            *g += gy - yv.exp() * gsum;
                        }
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.data.len() as f64;
                    let d = out_grad[0] / n;
                    for g in parent_grads[a.0].iter_mut() {
                        *g += d;
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = self.nodes[a.0].value.data.len();
                    for (g, d) in parent_grads[a.0].iter_mut().zip(&out_grad[..na]) {
                        *g += d;
                    }
                    for (g, d) in parent_grads[b.0].iter_mut().zip(&out_grad[na..]) {
                        *g += d;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let c = self.nodes[a.0].value.shape[1];
                    for (g, d) in parent_grads[a.0][start * c..end * c].iter_mut().zip(out_grad) {
                        *g += d;
                    }
                }
                Op::Transpose(a) => {
                    let (n, m) = {
                        let s = &self.nodes[a.0].value.shape;
                        (s[0], s[1])
                    };
                    let ga = &mut parent_grads[a.0];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += out_grad[j * n + i];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ─── matmul kernels (shared by forward and backward) ───

/// `out[n,m] += a[n,k] · b[k,m]`, all row-major.
fn matmul_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,k] += g[n,m] · b[k,m]ᵀ` — dA of a matmul.
fn matmul_bt_acc(g: &[f64], b: &[f64], n: usize, m: usize, k: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,m] += a[n,k]ᵀ · g[n,m]` — dB of a matmul.
fn matmul_at_acc(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * m..(kk + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

// ─── finite differences ───

/// Compares the analytic gradient of a scalar-valued graph against central
/// finite differences, coordinate by coordinate.
///
/// `build` must construct the same function each call from the given leaf;
/// `h` is the half-step and must lie in (0, 1e-2]. Returns
/// `max_i |analytic_i − centraldiff_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(LeafError::InvalidArgument(format!("finite_diff_check: h {h} outside (0, 1e-2]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(t.clone());
        let root = build(&mut g, xid)?;
        g.value(root).scalar_value()
    };

    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let root = build(&mut g, xid)?;
    g.value(root).scalar_value()?;
    g.backward(root)?;
    let analytic = g.grad(xid).to_vec();

    let mut max_rel = 0.0f64;
    let mut xp = x.clone();
    for c in 0..xp.data.len() {
        let orig = xp.data[c];
        xp.data[c] = orig + h;
        let fp = eval(&xp)?;
        xp.data[c] = orig - h;
        let fm = eval(&xp)?;
        xp.data[c] = orig;
        let cd = (fp - fm) / (2.0 * h);
        let rel = (analytic[c] - cd).abs() / analytic[c].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    fn t2(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[1.0, 2.0]));
        let b = g.leaf(t1(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[0.0, 0.0]));
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 3, &[1.0; 6]));
        let b = g.leaf(t2(3, 2, &[1.0; 6]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.leaf(t2(3, 4, &[0.3, -2.0, 5.0, 1.1, 0.0, 0.0, 0.0, 0.0, -9.0, 4.0, 2.0, 7.5]));
        let s = g.softmax_rows(a).unwrap();
        for row in g.value(s).data().chunks(4) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_of_square_via_mean() {
        // ℓ = mean(x ⊙ x) at x=[3] → dℓ/dx = 2x = 6.
        let mut g = Graph::new();
        let x = g.leaf(t1(&[3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.mean(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn grad_fanout_accumulates() {
        // ℓ = mean(x + x) at x=[1] → dℓ/dx = 2.
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0]));
        let y = g.add(x, x).unwrap();
        let l = g.mean(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), &[2.0]);
    }

    #[test]
    fn backward_twice_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 3, &[0.4, -1.2, 2.0, 0.7, 0.1, -0.5]));
        let w = g.leaf(t2(3, 2, &[1.0, 0.2, -0.7, 0.5, 0.3, -0.1]));
        let h = g.matmul(x, w).unwrap();
        let n = g.layer_norm(h).unwrap();
        let s = g.softmax_rows(n).unwrap();
        let l = g.mean(s).unwrap();
        g.backward(l).unwrap();
        let first: Vec<u64> = g.grad(w).iter().map(|v| v.to_bits()).collect();
        g.backward(l).unwrap();
        let second: Vec<u64> = g.grad(w).iter().map(|v| v.to_bits()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn backward_rejects_nonscalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(LeafError::ShapeMismatch { .. })));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 3, &[0.0; 6]));
        let b = g.leaf(t2(2, 2, &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn nonfinite_product_is_error() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[1e200]));
        assert!(matches!(g.mul(a, a), Err(LeafError::NonFinite("mul"))));
    }

    #[test]
    fn tensor_rejects_nan() {
        assert!(Tensor::from_vec(vec![f64::NAN]).is_err());
    }

    #[test]
    fn gather_duplicate_indices_scatter_add() {
        let mut g = Graph::new();
        let table = g.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = g.gather_rows(table, &[1, 1, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
        let l = g.mean(rows).unwrap();
        g.backward(l).unwrap();
        // Each gathered element contributes 1/6; row 1 is hit twice.
        let tg = g.grad(table);
        assert!((tg[2] - 2.0 / 6.0).abs() < 1e-15);
        assert!((tg[4] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(tg[0], 0.0);
    }

    #[test]
    fn bias_row_broadcast_add() {
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(t2(1, 3, &[10.0, 20.0, 30.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let l = g.mean(c).unwrap();
        g.backward(l).unwrap();
        // Bias grad sums over the two rows: 2 × 1/6 each.
        for &v in g.grad(b) {
            assert!((v - 2.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn transpose_roundtrip_grad() {
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let t = g.transpose(a).unwrap();
        assert_eq!(g.value(t).shape(), &[3, 2]);
        assert_eq!(g.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let l = g.mean(t).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn slice_and_concat_inverse() {
        let mut g = Graph::new();
        let a = g.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = g.slice_rows(a, 0, 1).unwrap();
        let bottom = g.slice_rows(a, 1, 3).unwrap();
        let back = g.concat_rows(top, bottom).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
    }

    #[test]
    fn finite_diff_linear_function_is_exact() {
        let x = t1(&[0.3, -1.0, 2.5]);
        let err = finite_diff_check(|g, x| g.mean(x), &x, 1e-5).unwrap();
        assert!(err <= 1e-8, "err={err}");
    }

    #[test]
    fn finite_diff_cubic_matches_analytic() {
        // f(x) = x³ at x=2: analytic 12, central diff agrees within 1e-6.
        let x = t1(&[2.0]);
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let cube = g.mul(sq, x)?;
                g.mean(cube)
            },
            &x,
            1e-5,
        )
        .unwrap();
        // Relative error against analytic 12.
        assert!(err <= 1e-6 / 12.0 + 1e-9, "err={err}");
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let x = t1(&[1.0]);
        assert!(finite_diff_check(|g, x| g.mean(x), &x, 0.0).is_err());
        assert!(finite_diff_check(|g, x| g.mean(x), &x, 0.5).is_err());
    }
}

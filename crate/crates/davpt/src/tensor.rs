//! Row-major `f64` tensors on a reverse-mode tape.
//!
//! The tape is an append-only arena: every operation pushes one node holding
//! its output values, and [`Tape::backward`] replays the nodes in reverse to
//! fill per-node gradients. Nodes form a DAG by construction (inputs always
//! precede outputs), so one reverse sweep visits each node exactly once.
//!
//! A tape is built fresh for every forward pass and owned by one thread.

use thiserror::Error;

/// Handle to a node on a [`Tape`]. Valid only for the tape that issued it.
pub type NodeId = usize;

/// Division guard for L2 normalization; rows with norm below this pass
/// through unchanged and are reported as degenerate.
pub const EPS_NORM: f64 = 1e-12;

/// Variance guard inside layer normalization.
pub const EPS_LAYER_NORM: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} holds {expect} elements, got {got}")]
    ShapeLen { shape: Vec<usize>, expect: usize, got: usize },
    #[error("{op}: expected a rank-{want} input, got shape {got:?}")]
    Rank { op: &'static str, want: usize, got: Vec<usize> },
    #[error("{op}: index {index} out of bounds for size {size}")]
    Index { op: &'static str, index: usize, size: usize },
    #[error("{op}: input must not be empty")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not on this tape")]
    BadNode(NodeId),
    #[error("tensor has no tape node; register it as a leaf first")]
    NotOnTape,
    #[error("{what} is not finite")]
    NonFinite { what: String },
    #[error("finite-difference step must lie in (0, 1e-2], got {0}")]
    FdStep(f64),
}

/// A dense row-major tensor. `grad` and `node_id` are populated by tape
/// round-trips; a tensor used purely as data keeps them empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub node_id: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeLen { shape, expect, got: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None, node_id: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None, node_id: None }
    }

    /// A trainable tensor.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// `a @ b^T` without materializing the transpose.
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Broadcast a row vector over every row of a matrix.
    AddBias { x: NodeId, bias: NodeId },
    /// `mul * x + add` elementwise with scalar constants.
    Affine { x: NodeId, mul: f64 },
    ConcatRows { parts: Vec<NodeId> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    SoftmaxRows { x: NodeId },
    L2NormalizeRows { x: NodeId, degenerate: Vec<bool> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu { x: NodeId },
    Ln { x: NodeId },
    SumAll { x: NodeId },
    Gather { x: NodeId, at: Vec<(usize, usize)> },
    Lse0Plus { x: NodeId },
    LogSumExp { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::MatmulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Affine { .. } => "affine",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Ln { .. } => "ln",
            Op::SumAll { .. } => "sum_all",
            Op::Gather { .. } => "gather",
            Op::Lse0Plus { .. } => "lse0_plus",
            Op::LogSumExp { .. } => "logsumexp",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Append-only reverse-mode tape. Build it, run ops, call [`Tape::backward`]
/// once, read gradients, drop it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a^T @ g` for `a: [m,k]`, `g: [m,n]`.
fn matmul_tn_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for l in 0..m {
        let a_row = &a[l * k..(l + 1) * k];
        let g_row = &g[l * n..(l + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu_raw(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// `log(1 + sum exp(x_i))`, shifted by `m = max(0, max x_i)` so arbitrarily
/// large inputs never overflow. Empty input gives 0.
pub fn lse0_plus(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(0.0f64, f64::max);
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + ((-m).exp() + sum).ln()
}

fn logsumexp_raw(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

fn softmax_row_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_raw(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { op, shape, values });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Push a computed node, rejecting non-finite results so overflow in a
    /// forward pass surfaces as an error instead of poisoning the tape.
    fn push_op(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId, TensorError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { what: format!("{} output", op.name()) });
        }
        Ok(self.push_raw(op, shape, values))
    }

    fn node(&self, id: NodeId) -> Result<&Node, TensorError> {
        self.nodes.get(id).ok_or(TensorError::BadNode(id))
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let n = self.node(id)?;
        match n.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank { op, want: 2, got: n.shape.clone() }),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    /// Value of a single-element node, rejecting non-finite results.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64, TensorError> {
        let n = self.node(id)?;
        if n.values.len() != 1 {
            return Err(TensorError::NonScalarLoss(n.shape.clone()));
        }
        let v = n.values[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite { what: format!("node {id} value") });
        }
        Ok(v)
    }

    /// Gradient of `id`, available after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Register a tensor as a leaf. Its values are copied onto the tape and
    /// its `node_id` is updated to the new handle.
    pub fn leaf(&mut self, t: &mut Tensor) -> NodeId {
        let id = self.push_raw(Op::Leaf, t.shape.clone(), t.data.clone());
        t.node_id = Some(id);
        id
    }

    /// A leaf that exists only on the tape (inputs, constants).
    pub fn leaf_const(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeLen { shape, expect, got: data.len() });
        }
        Ok(self.push_raw(Op::Leaf, shape, data))
    }

    /// Scalar constant node.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push_raw(Op::Leaf, vec![], vec![v])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let values = matmul_raw(&self.nodes[a].values, &self.nodes[b].values, m, k, n);
        self.push_op(Op::Matmul { a, b }, vec![m, n], values)
    }

    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let values = matmul_nt_raw(&self.nodes[a].values, &self.nodes[b].values, m, k, n);
        self.push_op(Op::MatmulNt { a, b }, vec![m, n], values)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.node(a)?.shape != self.node(b)?.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let values: Vec<f64> =
            self.nodes[a].values.iter().zip(&self.nodes[b].values).map(|(x, y)| x + y).collect();
        self.push_op(Op::Add { a, b }, self.nodes[a].shape.clone(), values)
    }

    /// `x + bias` with `x: [r,c]`, `bias: [c]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims2(x, "add_bias")?;
        let bn = self.node(bias)?;
        if bn.shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: bn.shape.clone(),
            });
        }
        let b = &self.nodes[bias].values;
        let mut values = self.nodes[x].values.clone();
        for row in values.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push_op(Op::AddBias { x, bias }, vec![r, c], values)
    }

    /// `mul * x + add` elementwise, with constant scalars.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId, TensorError> {
        let n = self.node(x)?;
        let values: Vec<f64> = n.values.iter().map(|&v| mul * v + add).collect();
        self.push_op(Op::Affine { x, mul }, n.shape.clone(), values)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        self.affine(x, c, 0.0)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_rows" });
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            rows += r;
        }
        let mut values = Vec::with_capacity(rows * c);
        for &p in parts {
            values.extend_from_slice(&self.nodes[p].values);
        }
        self.push_op(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, c], values)
    }

    /// Gather rows of `x` in the given order; duplicate indices are allowed.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims2(x, "select_rows")?;
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index { op: "select_rows", index: i, size: r });
            }
        }
        let src = &self.nodes[x].values;
        let mut values = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            values.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push_op(Op::SelectRows { x, rows: rows.to_vec() }, vec![rows.len(), c], values)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(TensorError::Index { op: "slice_cols", index: start + len, size: c });
        }
        let src = &self.nodes[x].values;
        let mut values = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            values.extend_from_slice(&row[start..start + len]);
        }
        self.push_op(Op::SliceCols { x, start }, vec![r, len], values)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_cols" });
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            cols += pc;
        }
        let mut values = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.nodes[p].shape[1];
                values.extend_from_slice(&self.nodes[p].values[i * pc..(i + 1) * pc]);
            }
        }
        self.push_op(Op::ConcatCols { parts: parts.to_vec() }, vec![r, cols], values)
    }

    /// Row-wise softmax with max-shift; each output row sums to 1.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        if c == 0 {
            return Err(TensorError::Empty { op: "softmax_rows" });
        }
        let src = &self.nodes[x].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            softmax_row_into(&src[i * c..(i + 1) * c], &mut values[i * c..(i + 1) * c]);
        }
        self.push_op(Op::SoftmaxRows { x }, vec![r, c], values)
    }

    /// Row-wise L2 normalization. Rows with norm below [`EPS_NORM`] pass
    /// through unchanged; their indices are returned alongside the node.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<(NodeId, Vec<usize>), TensorError> {
        let (r, c) = self.dims2(x, "l2_normalize_rows")?;
        let src = &self.nodes[x].values;
        let mut values = vec![0.0; r * c];
        let mut degenerate = vec![false; r];
        let mut flagged = Vec::new();
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let out = &mut values[i * c..(i + 1) * c];
            if norm < EPS_NORM {
                out.copy_from_slice(row);
                degenerate[i] = true;
                flagged.push(i);
            } else {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let id = self.push_op(Op::L2NormalizeRows { x, degenerate }, vec![r, c], values)?;
        Ok((id, flagged))
    }

    /// Row-wise layer normalization with learned gain and bias, both `[c]`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        for &p in &[gain, bias] {
            let n = self.node(p)?;
            if n.shape != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: n.shape.clone(),
                });
            }
        }
        let mut values = vec![0.0; r * c];
        {
            let src = &self.nodes[x].values;
            let g = &self.nodes[gain].values;
            let b = &self.nodes[bias].values;
            for i in 0..r {
                let row = &src[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + EPS_LAYER_NORM).sqrt();
                let out = &mut values[i * c..(i + 1) * c];
                for j in 0..c {
                    out[j] = g[j] * ((row[j] - mean) * inv) + b[j];
                }
            }
        }
        self.push_op(Op::LayerNorm { x, gain, bias }, vec![r, c], values)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.node(x)?;
        let values: Vec<f64> = n.values.iter().map(|&v| gelu_raw(v)).collect();
        self.push_op(Op::Gelu { x }, n.shape.clone(), values)
    }

    /// Natural log elementwise; inputs must be strictly positive.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.node(x)?;
        if n.values.iter().any(|&v| v <= 0.0) {
            return Err(TensorError::NonFinite { what: "ln of a non-positive value".into() });
        }
        let values: Vec<f64> = n.values.iter().map(|&v| v.ln()).collect();
        self.push_op(Op::Ln { x }, n.shape.clone(), values)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.node(x)?;
        let total: f64 = n.values.iter().sum();
        self.push_op(Op::SumAll { x }, vec![], vec![total])
    }

    /// Gather elements of a matrix at `(row, col)` positions into a vector.
    pub fn gather(&mut self, x: NodeId, at: &[(usize, usize)]) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims2(x, "gather")?;
        for &(i, j) in at {
            if i >= r {
                return Err(TensorError::Index { op: "gather", index: i, size: r });
            }
            if j >= c {
                return Err(TensorError::Index { op: "gather", index: j, size: c });
            }
        }
        let src = &self.nodes[x].values;
        let values: Vec<f64> = at.iter().map(|&(i, j)| src[i * c + j]).collect();
        self.push_op(Op::Gather { x, at: at.to_vec() }, vec![at.len()], values)
    }

    /// `log(1 + sum exp(x_i))` of a vector; empty input gives 0.
    pub fn lse0_plus(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.node(x)?;
        if n.shape.len() != 1 {
            return Err(TensorError::Rank { op: "lse0_plus", want: 1, got: n.shape.clone() });
        }
        let v = lse0_plus(&n.values);
        self.push_op(Op::Lse0Plus { x }, vec![], vec![v])
    }

    /// `log sum exp(x_i)` of a non-empty vector.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.node(x)?;
        if n.shape.len() != 1 {
            return Err(TensorError::Rank { op: "logsumexp", want: 1, got: n.shape.clone() });
        }
        if n.values.is_empty() {
            return Err(TensorError::Empty { op: "logsumexp" });
        }
        let v = logsumexp_raw(&n.values);
        self.push_op(Op::LogSumExp { x }, vec![], vec![v])
    }

    /// Mean softmax cross-entropy of `logits: [b, classes]` against labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= c {
                return Err(TensorError::Index { op: "cross_entropy", index: l, size: c });
            }
        }
        let src = &self.nodes[logits].values;
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            total += logsumexp_raw(row) - row[label];
        }
        let v = total / b as f64;
        self.push_op(Op::CrossEntropy { logits, labels: labels.to_vec() }, vec![], vec![v])
    }

    /// Reverse sweep from a scalar loss. Fills gradients for every node;
    /// read them with [`Tape::grad`] or copy into tensors with
    /// [`Tape::write_back`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let ln = self.node(loss)?;
        if ln.values.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        for (g, n) in self.grads.iter_mut().zip(&self.nodes) {
            *g = Some(vec![0.0; n.values.len()]);
        }
        self.grads[loss].as_mut().unwrap()[0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            let g = self.grads[id].take().unwrap();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    let da = matmul_nt_raw(&g, &self.nodes[b].values, m, n, k);
                    let db = matmul_tn_raw(&self.nodes[a].values, &g, m, k, n);
                    add_into(self.grads[a].as_mut().unwrap(), &da);
                    add_into(self.grads[b].as_mut().unwrap(), &db);
                }
                Op::MatmulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[0];
                    let da = matmul_raw(&g, &self.nodes[b].values, m, n, k);
                    let db = matmul_tn_raw(&g, &self.nodes[a].values, m, n, k);
                    add_into(self.grads[a].as_mut().unwrap(), &da);
                    add_into(self.grads[b].as_mut().unwrap(), &db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(self.grads[a].as_mut().unwrap(), &g);
                    add_into(self.grads[b].as_mut().unwrap(), &g);
                }
                Op::AddBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let c = self.nodes[bias].values.len();
                    add_into(self.grads[x].as_mut().unwrap(), &g);
                    let db = self.grads[bias].as_mut().unwrap();
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
                Op::Affine { x, mul } => {
                    let (x, mul) = (*x, *mul);
                    let dx = self.grads[x].as_mut().unwrap();
                    for (d, gv) in dx.iter_mut().zip(&g) {
                        *d += mul * gv;
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p].values.len();
                        add_into(self.grads[p].as_mut().unwrap(), &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let x = *x;
                    let rows = rows.clone();
                    let c = self.nodes[x].shape[1];
                    let dx = self.grads[x].as_mut().unwrap();
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        add_into(&mut dx[src_r * c..(src_r + 1) * c], &g[out_r * c..(out_r + 1) * c]);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let c = self.nodes[x].shape[1];
                    let len = self.nodes[id].shape[1];
                    let dx = self.grads[x].as_mut().unwrap();
                    for (i, row) in g.chunks(len).enumerate() {
                        add_into(&mut dx[i * c + start..i * c + start + len], row);
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let r = self.nodes[id].shape[0];
                    let cols = self.nodes[id].shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[p].shape[1];
                        let dp = self.grads[p].as_mut().unwrap();
                        for i in 0..r {
                            add_into(
                                &mut dp[i * pc..(i + 1) * pc],
                                &g[i * cols + offset..i * cols + offset + pc],
                            );
                        }
                        offset += pc;
                    }
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let c = self.nodes[id].shape[1];
                    let y = &self.nodes[id].values;
                    let dx = self.grads[x].as_mut().unwrap();
                    for i in 0..self.nodes[id].shape[0] {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dr = &mut dx[i * c..(i + 1) * c];
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::L2NormalizeRows { x, degenerate } => {
                    let x = *x;
                    let degenerate = degenerate.clone();
                    let c = self.nodes[id].shape[1];
                    let y = self.nodes[id].values.clone();
                    let src = &self.nodes[x].values;
                    let mut dx_add = vec![0.0; src.len()];
                    for i in 0..self.nodes[id].shape[0] {
                        let gr = &g[i * c..(i + 1) * c];
                        let dr = &mut dx_add[i * c..(i + 1) * c];
                        if degenerate[i] {
                            dr.copy_from_slice(gr);
                            continue;
                        }
                        let row = &src[i * c..(i + 1) * c];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = &y[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    add_into(self.grads[x].as_mut().unwrap(), &dx_add);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                    let src = self.nodes[x].values.clone();
                    let gv = self.nodes[gain].values.clone();
                    let mut dx_add = vec![0.0; r * c];
                    let mut dg_add = vec![0.0; c];
                    let mut db_add = vec![0.0; c];
                    for i in 0..r {
                        let row = &src[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + EPS_LAYER_NORM).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let h: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let mean_h = h.iter().sum::<f64>() / c as f64;
                        let mean_hx = h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let dr = &mut dx_add[i * c..(i + 1) * c];
                        for j in 0..c {
                            dr[j] = (h[j] - mean_h - xhat[j] * mean_hx) * inv;
                            dg_add[j] += gr[j] * xhat[j];
                            db_add[j] += gr[j];
                        }
                    }
                    add_into(self.grads[x].as_mut().unwrap(), &dx_add);
                    add_into(self.grads[gain].as_mut().unwrap(), &dg_add);
                    add_into(self.grads[bias].as_mut().unwrap(), &db_add);
                }
                Op::Gelu { x } => {
                    let x = *x;
                    let src = &self.nodes[x].values;
                    let dx_add: Vec<f64> = src.iter().zip(&g).map(|(&v, gv)| gelu_grad(v) * gv).collect();
                    add_into(self.grads[x].as_mut().unwrap(), &dx_add);
                }
                Op::Ln { x } => {
                    let x = *x;
                    let src = &self.nodes[x].values;
                    let dx_add: Vec<f64> = src.iter().zip(&g).map(|(&v, gv)| gv / v).collect();
                    add_into(self.grads[x].as_mut().unwrap(), &dx_add);
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let gs = g[0];
                    let dx = self.grads[x].as_mut().unwrap();
                    for d in dx.iter_mut() {
                        *d += gs;
                    }
                }
                Op::Gather { x, at } => {
                    let x = *x;
                    let at = at.clone();
                    let c = self.nodes[x].shape[1];
                    let dx = self.grads[x].as_mut().unwrap();
                    for (&(i, j), gv) in at.iter().zip(&g) {
                        dx[i * c + j] += gv;
                    }
                }
                Op::Lse0Plus { x } => {
                    let x = *x;
                    let gs = g[0];
                    let src = &self.nodes[x].values;
                    let m = src.iter().copied().fold(0.0f64, f64::max);
                    let denom: f64 = (-m).exp() + src.iter().map(|&v| (v - m).exp()).sum::<f64>();
                    let dx = self.grads[x].as_mut().unwrap();
                    for (d, &v) in dx.iter_mut().zip(src) {
                        *d += gs * (v - m).exp() / denom;
                    }
                }
                Op::LogSumExp { x } => {
                    let x = *x;
                    let gs = g[0];
                    let src = &self.nodes[x].values;
                    let mut w = vec![0.0; src.len()];
                    softmax_row_into(src, &mut w);
                    let dx = self.grads[x].as_mut().unwrap();
                    for (d, wv) in dx.iter_mut().zip(&w) {
                        *d += gs * wv;
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let c = self.nodes[logits].shape[1];
                    let b = labels.len();
                    let gs = g[0] / b as f64;
                    let src = self.nodes[logits].values.clone();
                    let dx = self.grads[logits].as_mut().unwrap();
                    let mut p = vec![0.0; c];
                    for (i, &label) in labels.iter().enumerate() {
                        softmax_row_into(&src[i * c..(i + 1) * c], &mut p);
                        let dr = &mut dx[i * c..(i + 1) * c];
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dr[j] += gs * (p[j] - onehot);
                        }
                    }
                }
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Copy the gradient for `t`'s registered node into `t.grad`.
    pub fn write_back(&self, t: &mut Tensor) -> Result<(), TensorError> {
        let id = t.node_id.ok_or(TensorError::NotOnTape)?;
        let g = self.grad(id).ok_or(TensorError::BadNode(id))?;
        t.grad = Some(g.to_vec());
        Ok(())
    }
}

/// Result of a finite-difference sweep: the worst relative error over every
/// checked parameter element.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub worst_rel_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Check the tape gradient of an arbitrary scalar function against central
/// finite differences.
///
/// `build` must construct the same computation whenever it sees the same
/// parameter values. Every element of every parameter is perturbed by
/// `+/-eps`; the relative error uses denominator
/// `max(|g_fd|, |g_ad|, 1e-8)`.
pub fn finite_diff_check<F>(
    params: &mut [Tensor],
    eps: f64,
    mut build: F,
) -> Result<FdReport, TensorError>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::FdStep(eps));
    }

    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(params.len());
    for p in params.iter_mut() {
        p.requires_grad = true;
        ids.push(tape.leaf(p));
    }
    let loss = build(&mut tape, &ids)?;
    tape.scalar_value(loss)?;
    tape.backward(loss)?;
    let ad: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();
    drop(tape);

    let eval = |params: &mut [Tensor], build: &mut F| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = {
            let mut v = Vec::with_capacity(params.len());
            for p in params.iter_mut() {
                v.push(tape.leaf(p));
            }
            v
        };
        let loss = build(&mut tape, &ids)?;
        tape.scalar_value(loss)
    };

    let mut report = FdReport { worst_rel_err: 0.0, worst_param: 0, worst_index: 0, checked: 0 };
    for pi in 0..params.len() {
        for e in 0..params[pi].data.len() {
            let orig = params[pi].data[e];
            params[pi].data[e] = orig + eps;
            let lp = eval(params, &mut build)?;
            params[pi].data[e] = orig - eps;
            let lm = eval(params, &mut build)?;
            params[pi].data[e] = orig;
            let g_fd = (lp - lm) / (2.0 * eps);
            let g_ad = ad[pi][e];
            let rel = (g_fd - g_ad).abs() / g_fd.abs().max(g_ad.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.worst_rel_err {
                report.worst_rel_err = rel;
                report.worst_param = pi;
                report.worst_index = e;
            }
        }
    }
    Ok(report)
}

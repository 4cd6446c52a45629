//! Dense f64 tensors and reverse-mode differentiation on an arena tape.
//!
//! A [`Tape`] owns every tensor produced during a forward pass; ops append
//! nodes and return [`Var`] handles, so the node list is in topological order
//! by construction and `backward` is a single reverse sweep. Gradients
//! accumulate until [`Tape::clear_grads`]; calling `backward` twice doubles
//! them, which lets multi-term losses share one summed backward pass.
//!
//! Every successful op leaves only finite values behind; a NaN or Inf
//! anywhere is reported as [`Error::Numeric`] at the op that produced it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;
/// Row norms below this are treated as this value when normalizing.
pub const NORM_EPS: f64 = 1e-12;

// ── tensor ──────────────────────────────────────────────────────────────────

/// Row-major dense tensor. Scalars have an empty shape and one element.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite value in tensor literal".into()));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Row count / column count for rank-2 tensors.
    fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Some((*m, *n)),
            _ => None,
        }
    }
}

// ── tape ────────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Adjacency lists used by [`Tape::neighbor_mean`]; entry `v` lists the input
/// rows averaged into output row `v`.
pub type Adjacency = Vec<Vec<u32>>;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    MatVec(Var, Var),
    MatTVec(Var, Var),
    AddRowBroadcast(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSumExpRows(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    Concat(Var, Var),
    StackRows(Vec<Var>),
    Gather(Var, Arc<Vec<usize>>),
    NeighborMean(Var, Arc<Adjacency>),
    RowwiseDot(Var, Var),
    Dot(Var, Var),
    NormalizeRows(Var),
    PickPerRow(Var, Arc<Vec<usize>>),
    BceEach(Var, Arc<Vec<f64>>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Arena of recorded operations. Single-writer: one forward pass builds one
/// tape, then `backward` consumes it in place.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Tape {
        Tape { nodes: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mount a tensor that should receive gradients.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        t.grad = None;
        self.nodes.push(Node { op: Op::Leaf, value: t });
        Var(self.nodes.len() - 1)
    }

    /// Mount a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.nodes.push(Node { op: Op::Leaf, value: t });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite result in {}", op_name(&op))));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            value: Tensor { shape, data, requires_grad, grad: None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    // ── elementwise and scalar ops ──

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), shape, data, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), shape, data, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), shape, data, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x * c).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), shape, data, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x.max(0.0)).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a);
        self.push(Op::Relu(a), shape, data, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x.tanh()).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a);
        self.push(Op::Tanh(a), shape, data, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data.iter().map(|x| sigmoid_f(*x)).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), shape, data, rg)
    }

    // ── matrix ops ──

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2().ok_or_else(|| shape_err("matmul lhs", va))?;
        let (k2, n) = vb.dims2().ok_or_else(|| shape_err("matmul rhs", vb))?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &va.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &vb.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), vec![m, n], out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2().ok_or_else(|| shape_err("transpose", va))?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), vec![n, m], out, rg)
    }

    /// `A · x` for matrix A `[m,n]` and vector x `[n]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (va, vx) = (self.value(a), self.value(x));
        let (m, n) = va.dims2().ok_or_else(|| shape_err("matvec lhs", va))?;
        if vx.shape != [n] {
            return Err(Error::Shape(format!(
                "matvec: matrix {:?} with vector {:?}",
                va.shape, vx.shape
            )));
        }
        let out = (0..m)
            .map(|i| dot_f(&va.data[i * n..(i + 1) * n], &vx.data))
            .collect();
        let rg = self.rg(a) || self.rg(x);
        self.push(Op::MatVec(a, x), vec![m], out, rg)
    }

    /// `Aᵀ · x` for matrix A `[m,n]` and vector x `[m]`.
    pub fn mat_t_vec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (va, vx) = (self.value(a), self.value(x));
        let (m, n) = va.dims2().ok_or_else(|| shape_err("mat_t_vec lhs", va))?;
        if vx.shape != [m] {
            return Err(Error::Shape(format!(
                "mat_t_vec: matrix {:?} with vector {:?}",
                va.shape, vx.shape
            )));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            let xv = vx.data[i];
            for (o, &av) in out.iter_mut().zip(&va.data[i * n..(i + 1) * n]) {
                *o += xv * av;
            }
        }
        let rg = self.rg(a) || self.rg(x);
        self.push(Op::MatTVec(a, x), vec![n], out, rg)
    }

    /// Matrix `[m,n]` plus a row vector `[n]` added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, n) = va.dims2().ok_or_else(|| shape_err("add_row_broadcast lhs", va))?;
        if vb.shape != [n] {
            return Err(Error::Shape(format!(
                "add_row_broadcast: matrix {:?} with row {:?}",
                va.shape, vb.shape
            )));
        }
        let mut out = va.data.clone();
        for i in 0..m {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(&vb.data) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::AddRowBroadcast(a, b), vec![m, n], out, rg)
    }

    // ── softmax family ──

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 1 || va.is_empty() {
            return Err(Error::InvalidArg(format!(
                "softmax wants a non-empty vector, got {:?}",
                va.shape
            )));
        }
        let out = softmax_f(&va.data);
        let shape = va.shape.clone();
        let rg = self.rg(a);
        self.push(Op::Softmax(a), shape, out, rg)
    }

    /// Row-wise log-sum-exp: `[m,n]` to `[m]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2().ok_or_else(|| shape_err("log_sum_exp_rows", va))?;
        if n == 0 {
            return Err(Error::InvalidArg("log_sum_exp_rows on empty rows".into()));
        }
        let out = (0..m)
            .map(|i| {
                let row = &va.data[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let rg = self.rg(a);
        self.push(Op::LogSumExpRows(a), vec![m], out, rg)
    }

    // ── reductions ──

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s: f64 = va.data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![], vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::InvalidArg("mean of empty tensor".into()));
        }
        let s: f64 = va.data.iter().sum::<f64>() / va.len() as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), vec![], vec![s], rg)
    }

    /// Column means: `[m,n]` to `[n]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2().ok_or_else(|| shape_err("mean_axis0", va))?;
        if m == 0 {
            return Err(Error::InvalidArg("mean_axis0 over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&va.data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(a);
        self.push(Op::MeanAxis0(a), vec![n], out, rg)
    }

    // ── structure ops ──

    /// Concatenate two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 1 || vb.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "concat wants vectors, got {:?} and {:?}",
                va.shape, vb.shape
            )));
        }
        let mut data = va.data.clone();
        data.extend_from_slice(&vb.data);
        let n = data.len();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Concat(a, b), vec![n], data, rg)
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::InvalidArg("stack_rows of nothing".into()));
        }
        let n = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * n);
        let mut rg = false;
        for &r in rows {
            let vr = self.value(r);
            if vr.shape.len() != 1 || vr.len() != n {
                return Err(Error::Shape(format!(
                    "stack_rows wants vectors of length {}, got {:?}",
                    n, vr.shape
                )));
            }
            data.extend_from_slice(&vr.data);
            rg |= self.rg(r);
        }
        self.push(Op::StackRows(rows.to_vec()), vec![rows.len(), n], data, rg)
    }

    /// Row lookup with repetition; the gradient scatter-adds back, so this is
    /// also the embedding lookup.
    pub fn gather(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2().ok_or_else(|| shape_err("gather", va))?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices.iter() {
            if i >= m {
                return Err(Error::InvalidArg(format!(
                    "gather index {} out of {} rows",
                    i, m
                )));
            }
            data.extend_from_slice(&va.data[i * n..(i + 1) * n]);
        }
        let k = indices.len();
        let rg = self.rg(a);
        self.push(Op::Gather(a, indices), vec![k, n], data, rg)
    }

    /// Output row `v` is the mean of the input rows listed in `adj[v]`;
    /// an empty list yields a zero row.
    pub fn neighbor_mean(&mut self, a: Var, adj: Arc<Adjacency>) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2().ok_or_else(|| shape_err("neighbor_mean", va))?;
        let rows = adj.len();
        let mut data = vec![0.0; rows * n];
        for (v, neigh) in adj.iter().enumerate() {
            if neigh.is_empty() {
                continue;
            }
            let orow = &mut data[v * n..(v + 1) * n];
            for &u in neigh {
                let u = u as usize;
                if u >= m {
                    return Err(Error::InvalidArg(format!(
                        "neighbor index {} out of {} rows",
                        u, m
                    )));
                }
                for (o, &x) in orow.iter_mut().zip(&va.data[u * n..(u + 1) * n]) {
                    *o += x;
                }
            }
            let inv = 1.0 / neigh.len() as f64;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(a);
        self.push(Op::NeighborMean(a, adj), vec![rows, n], data, rg)
    }

    // ── products and similarities ──

    /// Per-row dot product of two `[m,n]` matrices, yielding `[m]`.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("rowwise_dot", va, vb)?;
        let (m, n) = va.dims2().ok_or_else(|| shape_err("rowwise_dot", va))?;
        let out = (0..m)
            .map(|i| dot_f(&va.data[i * n..(i + 1) * n], &vb.data[i * n..(i + 1) * n]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::RowwiseDot(a, b), vec![m], out, rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("dot", va, vb)?;
        if va.shape.len() != 1 {
            return Err(Error::Shape(format!("dot wants vectors, got {:?}", va.shape)));
        }
        let s = dot_f(&va.data, &vb.data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Dot(a, b), vec![], vec![s], rg)
    }

    /// Scale each row to unit L2 norm; norms below [`NORM_EPS`] are clamped.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2().ok_or_else(|| shape_err("normalize_rows", va))?;
        let mut data = va.data.clone();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = dot_f(row, row).sqrt().max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let rg = self.rg(a);
        self.push(Op::NormalizeRows(a), vec![m, n], data, rg)
    }

    /// Cosine similarity of corresponding rows of two `[m,n]` matrices.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        self.rowwise_dot(na, nb)
    }

    /// `out[i] = a[i, idx[i]]`; used for diagonals and per-row class picks.
    pub fn pick_per_row(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2().ok_or_else(|| shape_err("pick_per_row", va))?;
        if idx.len() != m {
            return Err(Error::Shape(format!(
                "pick_per_row: {} indices for {} rows",
                idx.len(),
                m
            )));
        }
        let mut out = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::InvalidArg(format!(
                    "pick_per_row column {} out of {}",
                    j, n
                )));
            }
            out.push(va.data[i * n + j]);
        }
        let rg = self.rg(a);
        self.push(Op::PickPerRow(a, idx), vec![m], out, rg)
    }

    /// Per-element binary cross-entropy of predictions `[m]` against constant
    /// labels; predictions are clamped to `[PROB_EPS, 1-PROB_EPS]`.
    pub fn bce_each(&mut self, pred: Var, targets: Arc<Vec<f64>>) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape.len() != 1 || vp.len() != targets.len() {
            return Err(Error::Shape(format!(
                "bce: {} predictions vs {} labels",
                vp.len(),
                targets.len()
            )));
        }
        if !targets.iter().all(|t| *t == 0.0 || *t == 1.0) {
            return Err(Error::InvalidArg("bce labels must be 0 or 1".into()));
        }
        let out = vp
            .data
            .iter()
            .zip(targets.iter())
            .map(|(&p, &t)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .collect();
        let m = targets.len();
        let rg = self.rg(pred);
        self.push(Op::BceEach(pred, targets), vec![m], out, rg)
    }

    /// Mean binary cross-entropy over a batch.
    pub fn bce(&mut self, pred: Var, targets: Arc<Vec<f64>>) -> Result<Var> {
        let each = self.bce_each(pred, targets)?;
        self.mean(each)
    }

    // ── backward ──

    /// Reverse sweep from a scalar root. Adjoints are computed fresh each
    /// call and added into the persistent `grad` buffers, so repeated calls
    /// accumulate one full pass each.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0].value;
        if !root_node.is_scalar() {
            return Err(Error::InvalidArg(format!(
                "backward root must be scalar, got {:?}",
                root_node.shape
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::InvalidArg(
                "backward on a graph with no differentiable leaves".into(),
            ));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = Vec::new();
        adjoints.resize_with(root.0 + 1, || None);
        adjoints[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            // Reverse topological order: every consumer of node i has already
            // run, so its adjoint is final and can be moved out.
            let Some(g) = adjoints[i].take() else { continue };
            {
                let node = &self.nodes[i];
                if !matches!(node.op, Op::Leaf) {
                    step_backward(&node.op, &node.value, &g, &mut adjoints, &self.nodes);
                }
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {}",
                    op_name(&self.nodes[i].op)
                )));
            }
            let nv = &mut self.nodes[i].value;
            let buf = nv.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            axpy(1.0, &g, buf);
        }
        Ok(())
    }
}

/// Adjoint buffer of `nodes[v]`, allocated on first use; `None` when the
/// node opted out of gradients.
fn adj_mut<'a>(
    adjoints: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let nv = &nodes[v.0].value;
    if !nv.requires_grad {
        return None;
    }
    let len = nv.data.len();
    Some(adjoints[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Accumulate `g`-weighted gradients of one node into its parents' adjoints.
fn step_backward(
    op: &Op,
    value: &Tensor,
    g: &[f64],
    adjoints: &mut [Option<Vec<f64>>],
    nodes: &[Node],
) {
    let val_of = |v: Var| -> &[f64] { &nodes[v.0].value.data };

    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = adj_mut(adjoints, nodes, *b) {
                axpy(1.0, g, gb);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = adj_mut(adjoints, nodes, *b) {
                axpy(-1.0, g, gb);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val_of(*a), val_of(*b));
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for ((o, &gg), &bv) in ga.iter_mut().zip(g).zip(vb) {
                    *o += gg * bv;
                }
            }
            if let Some(gb) = adj_mut(adjoints, nodes, *b) {
                for ((o, &gg), &av) in gb.iter_mut().zip(g).zip(va) {
                    *o += gg * av;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                axpy(*c, g, ga);
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val_of(*a), val_of(*b));
            let (m, n) = value.dims2().expect("matmul output is rank 2");
            let k = va.len() / m;
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                // dA = g · Bᵀ
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let garow = &mut ga[i * k..(i + 1) * k];
                    for (p, o) in garow.iter_mut().enumerate() {
                        *o += dot_f(grow, &vb[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(gb) = adj_mut(adjoints, nodes, *b) {
                // dB = Aᵀ · g
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &va[i * k..(i + 1) * k];
                    for (p, &av) in arow.iter().enumerate() {
                        axpy(av, grow, &mut gb[p * n..(p + 1) * n]);
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (n, m) = value.dims2().expect("transpose output is rank 2");
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for j in 0..n {
                    for i in 0..m {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::MatVec(a, x) => {
            let (va, vx) = (val_of(*a), val_of(*x));
            let m = value.len();
            let n = vx.len();
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for i in 0..m {
                    axpy(g[i], vx, &mut ga[i * n..(i + 1) * n]);
                }
            }
            if let Some(gx) = adj_mut(adjoints, nodes, *x) {
                for i in 0..m {
                    axpy(g[i], &va[i * n..(i + 1) * n], gx);
                }
            }
        }
        Op::MatTVec(a, x) => {
            let (va, vx) = (val_of(*a), val_of(*x));
            let n = value.len();
            let m = vx.len();
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for i in 0..m {
                    axpy(vx[i], g, &mut ga[i * n..(i + 1) * n]);
                }
            }
            if let Some(gx) = adj_mut(adjoints, nodes, *x) {
                for i in 0..m {
                    gx[i] += dot_f(&va[i * n..(i + 1) * n], g);
                }
            }
        }
        Op::AddRowBroadcast(a, b) => {
            let n = nodes[b.0].value.data.len();
            let m = value.len() / n;
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = adj_mut(adjoints, nodes, *b) {
                for i in 0..m {
                    axpy(1.0, &g[i * n..(i + 1) * n], gb);
                }
            }
        }
        Op::Relu(a) => {
            let va = val_of(*a);
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for ((o, &gg), &x) in ga.iter_mut().zip(g).zip(va) {
                    if x > 0.0 {
                        *o += gg;
                    }
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for ((o, &gg), &y) in ga.iter_mut().zip(g).zip(&value.data) {
                    *o += gg * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for ((o, &gg), &y) in ga.iter_mut().zip(g).zip(&value.data) {
                    *o += gg * y * (1.0 - y);
                }
            }
        }
        Op::Softmax(a) => {
            let y = &value.data;
            let s = dot_f(g, y);
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for ((o, &gg), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += yv * (gg - s);
                }
            }
        }
        Op::LogSumExpRows(a) => {
            let va = val_of(*a);
            let m = value.len();
            let n = va.len() / m;
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for i in 0..m {
                    let lse = value.data[i];
                    let gi = g[i];
                    for (o, &x) in ga[i * n..(i + 1) * n].iter_mut().zip(&va[i * n..(i + 1) * n]) {
                        *o += gi * (x - lse).exp();
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                let c = g[0] / ga.len() as f64;
                for o in ga.iter_mut() {
                    *o += c;
                }
            }
        }
        Op::MeanAxis0(a) => {
            let n = value.len();
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                let m = ga.len() / n;
                let c = 1.0 / m as f64;
                for i in 0..m {
                    for (o, &gg) in ga[i * n..(i + 1) * n].iter_mut().zip(g) {
                        *o += c * gg;
                    }
                }
            }
        }
        Op::Concat(a, b) => {
            let na = nodes[a.0].value.data.len();
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                axpy(1.0, &g[..na], ga);
            }
            if let Some(gb) = adj_mut(adjoints, nodes, *b) {
                axpy(1.0, &g[na..], gb);
            }
        }
        Op::StackRows(rows) => {
            let n = value.shape[1];
            for (i, r) in rows.iter().enumerate() {
                if let Some(gr) = adj_mut(adjoints, nodes, *r) {
                    axpy(1.0, &g[i * n..(i + 1) * n], gr);
                }
            }
        }
        Op::Gather(a, idx) => {
            let n = value.shape[1];
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    axpy(1.0, &g[k * n..(k + 1) * n], &mut ga[i * n..(i + 1) * n]);
                }
            }
        }
        Op::NeighborMean(a, adj) => {
            let n = value.shape[1];
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for (v, neigh) in adj.iter().enumerate() {
                    if neigh.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / neigh.len() as f64;
                    let grow = &g[v * n..(v + 1) * n];
                    for &u in neigh {
                        let u = u as usize;
                        axpy(inv, grow, &mut ga[u * n..(u + 1) * n]);
                    }
                }
            }
        }
        Op::RowwiseDot(a, b) => {
            let (va, vb) = (val_of(*a), val_of(*b));
            let m = value.len();
            let n = va.len() / m;
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for i in 0..m {
                    axpy(g[i], &vb[i * n..(i + 1) * n], &mut ga[i * n..(i + 1) * n]);
                }
            }
            if let Some(gb) = adj_mut(adjoints, nodes, *b) {
                for i in 0..m {
                    axpy(g[i], &va[i * n..(i + 1) * n], &mut gb[i * n..(i + 1) * n]);
                }
            }
        }
        Op::Dot(a, b) => {
            let (va, vb) = (val_of(*a), val_of(*b));
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                axpy(g[0], vb, ga);
            }
            if let Some(gb) = adj_mut(adjoints, nodes, *b) {
                axpy(g[0], va, gb);
            }
        }
        Op::NormalizeRows(a) => {
            let va = val_of(*a);
            let (m, n) = value.dims2().expect("normalize_rows output is rank 2");
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                for i in 0..m {
                    let xrow = &va[i * n..(i + 1) * n];
                    let yrow = &value.data[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let raw = dot_f(xrow, xrow).sqrt();
                    let garow = &mut ga[i * n..(i + 1) * n];
                    if raw < NORM_EPS {
                        // Clamped branch: forward is x / NORM_EPS, a plain scale.
                        axpy(1.0 / NORM_EPS, grow, garow);
                    } else {
                        let gy = dot_f(grow, yrow);
                        for ((o, &gg), &yv) in garow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gg - gy * yv) / raw;
                        }
                    }
                }
            }
        }
        Op::PickPerRow(a, idx) => {
            if let Some(ga) = adj_mut(adjoints, nodes, *a) {
                let n = ga.len() / idx.len();
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * n + j] += g[i];
                }
            }
        }
        Op::BceEach(p, t) => {
            let vp = val_of(*p);
            if let Some(gp) = adj_mut(adjoints, nodes, *p) {
                for (((o, &gg), &pv), &tv) in gp.iter_mut().zip(g).zip(vp).zip(t.iter()) {
                    if pv > PROB_EPS && pv < 1.0 - PROB_EPS {
                        *o += gg * (pv - tv) / (pv * (1.0 - pv));
                    }
                }
            }
        }
    }
}

// ── gradient checking ───────────────────────────────────────────────────────

/// Compare analytic gradients of `build` (a tensors-to-scalar function) with
/// central finite differences at step `h`. Returns the maximum over all input
/// coordinates of `|analytic − numeric| / max(1e-8, |analytic|)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArg("grad_check step must be positive".into()));
    }
    let eval = |points: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        if !tape.value(root).is_scalar() {
            return Err(Error::InvalidArg("grad_check function must return a scalar".into()));
        }
        let y = tape.value(root).data[0];
        tape.backward(root)?;
        let grads = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect();
        Ok((y, grads))
    };

    let (_, analytic) = eval(inputs)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for (i, &center) in input.data.iter().enumerate() {
            probe[k].data[i] = center + h;
            let (up, _) = eval(&probe)?;
            probe[k].data[i] = center - h;
            let (down, _) = eval(&probe)?;
            probe[k].data[i] = center;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

// ── shared float helpers ────────────────────────────────────────────────────

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain softmax on a slice, max-shifted for stability.
pub fn softmax_f(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    out
}

fn dot_f(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += c * v;
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{}: shapes {:?} and {:?} differ",
            op, a.shape, b.shape
        )));
    }
    Ok(())
}

fn shape_err(op: &str, t: &Tensor) -> Error {
    Error::Shape(format!("{} wants a matrix, got {:?}", op, t.shape))
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::MatVec(..) => "matvec",
        Op::MatTVec(..) => "mat_t_vec",
        Op::AddRowBroadcast(..) => "add_row_broadcast",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softmax(..) => "softmax",
        Op::LogSumExpRows(..) => "log_sum_exp_rows",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MeanAxis0(..) => "mean_axis0",
        Op::Concat(..) => "concat",
        Op::StackRows(..) => "stack_rows",
        Op::Gather(..) => "gather",
        Op::NeighborMean(..) => "neighbor_mean",
        Op::RowwiseDot(..) => "rowwise_dot",
        Op::Dot(..) => "dot",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::PickPerRow(..) => "pick_per_row",
        Op::BceEach(..) => "bce",
    }
}

// ── random init helpers ─────────────────────────────────────────────────────

use rand::Rng;
use rand_distr::{Distribution, Normal};

impl Tensor {
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn rand_normal<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }
}

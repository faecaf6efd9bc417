//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation in execution order. Nodes are
//! addressed by the copyable [`Var`] handle. Calling [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into every node that
//! depends on a `requires_grad` leaf. A graph is single-use: build a fresh
//! one for every training step.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::tensor::{Result, Tensor, TensorError};

/// Additive logit applied to masked softmax positions.
pub const MASK_LOGIT: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Powf(Var, f64),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MeanPoolRows(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
    Cosine(Var, Var, f64, f64),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation with values and (after backward) gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
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

/// Numerically stable `log(sigmoid(x))`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.into_data(), requires_grad, Op::Leaf)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant_matrix size");
        self.push(rows, cols, data, false, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant_matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, `None` for nodes that carry none.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(Vec::as_slice)
    }

    /// Hash of every discrete decision taken while recording: op kinds,
    /// slice and gather indices, and the branch chosen by each element of
    /// `relu`, `abs`, `maximum` and `minimum`. Two recordings with equal
    /// signatures evaluate the same smooth function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let val = |v: &Var| &self.nodes[v.0].value;
        for n in &self.nodes {
            std::mem::discriminant(&n.op).hash(&mut h);
            (n.rows, n.cols).hash(&mut h);
            match &n.op {
                Op::Relu(a) => val(a).iter().for_each(|&x| (x > 0.0).hash(&mut h)),
                Op::Abs(a) => val(a).iter().for_each(|&x| (x >= 0.0).hash(&mut h)),
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    val(a).iter().zip(val(b)).for_each(|(x, y)| (x >= y).hash(&mut h))
                }
                Op::SliceRows(_, s) | Op::SliceCols(_, s) => s.hash(&mut h),
                Op::GatherRows(_, idx) => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[a.0];
        let (r, c) = (n.rows, n.cols);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let rg = n.requires_grad;
        self.push(r, c, value, rg, op)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(name, da, db));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(da.0, da.1, value, rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), dr) = (self.dims(a), self.dims(row));
        if dr != (1, n) {
            return Err(shape_err("add_row", (m, n), dr));
        }
        let rv = &self.nodes[row.0].value;
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % n])
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(m, n, value, rg, Op::AddRow(a, row)))
    }

    /// Multiplies row `i` of `a` by `col[i]` (`col` is `m x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let ((m, n), dc) = (self.dims(a), self.dims(col));
        if dc != (m, 1) {
            return Err(shape_err("mul_col", (m, n), dc));
        }
        let cv = &self.nodes[col.0].value;
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cv[i / n])
            .collect();
        let rg = self.rg(&[a, col]);
        Ok(self.push(m, n, value, rg, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(n, m, out, rg, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m * n != rows * cols {
            return Err(shape_err("reshape", (m, n), (rows, cols)));
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(rows, cols, value, rg, Op::Reshape(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let n = self.dims(first).1;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d.1 != n {
                return Err(shape_err("concat_rows", self.dims(first), d));
            }
            rows += d.0;
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, n, value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let m = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.0 != m {
                return Err(shape_err("concat_cols", self.dims(first), d));
            }
            cols += d.1;
        }
        let mut value = Vec::with_capacity(m * cols);
        for i in 0..m {
            for &p in parts {
                let w = self.nodes[p.0].cols;
                value.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(m, cols, value, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(shape_err("slice_rows", (m, n), (start, len)));
        }
        let value = self.nodes[a.0].value[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(len, n, value, rg, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", (m, n), (start, len)));
        }
        let av = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(m * len);
        for i in 0..m {
            value.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(m, len, value, rg, Op::SliceCols(a, start)))
    }

    /// Stacks rows `idx` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        if idx.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let tv = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            value.extend_from_slice(&tv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(idx.len(), n, value, rg, Op::GatherRows(table, idx.to_vec())))
    }

    /// Sum of every entry, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], rg, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&av[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push(1, n, out, rg, Op::SumRows(a))
    }

    fn softmax_forward(value: &[f64], m: usize, n: usize, mask: Option<&[bool]>, log: bool) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &value[i * n..(i + 1) * n];
            let masked = |j: usize| mask.is_some_and(|mk| mk[j]);
            if (0..n).all(masked) {
                // Fully masked rows are defined as all zeros.
                continue;
            }
            let logits: Vec<f64> = (0..n)
                .map(|j| if masked(j) { row[j] + MASK_LOGIT } else { row[j] })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&x| (x - mx).exp()).sum();
            let lz = z.ln();
            for j in 0..n {
                out[i * n + j] = if log {
                    logits[j] - mx - lz
                } else {
                    (logits[j] - mx).exp() / z
                };
            }
        }
        out
    }

    /// Row-wise softmax. `key_mask[j] == true` excludes column `j` by adding
    /// [`MASK_LOGIT`] before normalisation; a fully masked row yields zeros.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(mk) = key_mask {
            if mk.len() != n {
                return Err(shape_err("softmax_rows", (m, n), (1, mk.len())));
            }
        }
        let value = Self::softmax_forward(&self.nodes[a.0].value, m, n, key_mask, false);
        let rg = self.rg(&[a]);
        Ok(self.push(m, n, value, rg, Op::SoftmaxRows(a)))
    }

    /// Row-wise log-softmax (no masking).
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let value = Self::softmax_forward(&self.nodes[a.0].value, m, n, None, true);
        let rg = self.rg(&[a]);
        self.push(m, n, value, rg, Op::LogSoftmaxRows(a))
    }

    /// Mean over the rows whose `mask` entry is `false` (`true` = padded).
    pub fn mean_pool_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        let keep: Vec<usize> = match mask {
            Some(mk) => {
                if mk.len() != m {
                    return Err(shape_err("mean_pool_rows", (m, n), (mk.len(), 1)));
                }
                (0..m).filter(|&i| !mk[i]).collect()
            }
            None => (0..m).collect(),
        };
        if keep.is_empty() {
            return Err(TensorError::EmptyPool);
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; n];
        for &i in &keep {
            for (o, &x) in out.iter_mut().zip(&av[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let k = keep.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        let rg = self.rg(&[a]);
        Ok(self.push(1, n, out, rg, Op::MeanPoolRows(a, keep)))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let av = &self.nodes[a.0].value;
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nr == 0.0 || !nr.is_finite() {
                return Err(TensorError::ZeroNorm {
                    op: "l2_normalize_rows",
                });
            }
            for j in 0..n {
                out[i * n + j] = row[j] / nr;
            }
            norms.push(nr);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(m, n, out, rg, Op::L2NormalizeRows(a, norms)))
    }

    /// Cosine similarity of two equally shaped nodes, as `1 x 1`.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (du, dv) = (self.dims(u), self.dims(v));
        if du != dv {
            return Err(shape_err("cosine_similarity", du, dv));
        }
        let (uv, vv) = (&self.nodes[u.0].value, &self.nodes[v.0].value);
        let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            return Err(TensorError::ZeroNorm {
                op: "cosine_similarity",
            });
        }
        let dot: f64 = uv.iter().zip(vv).map(|(a, b)| a * b).sum();
        let s = (dot / (nu * nv)).clamp(-1.0, 1.0);
        let rg = self.rg(&[u, v]);
        Ok(self.push(1, 1, vec![s], rg, Op::Cosine(u, v, nu, nv)))
    }

    /// Populates gradients of `d loss / d node` for every node that depends
    /// on a trainable leaf. Errors if called twice on the same tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let d = self.dims(loss);
        if d != (1, 1) {
            return Err(TensorError::NotScalar(vec![d.0, d.1]));
        }
        self.backward_done = true;
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| if n.requires_grad { vec![0.0; n.value.len()] } else { Vec::new() })
            .collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|&x| x == 0.0) {
                grads[idx] = g;
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[idx];
        let (m, n) = (node.rows, node.cols);
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        // Accumulates `f(i)` into input `v` when it carries a gradient.
        macro_rules! acc {
            ($v:expr, |$i:ident| $e:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let gv = &mut grads[v.0];
                    for $i in 0..gv.len() {
                        gv[$i] += $e;
                    }
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = &mut grads[a.0];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let gb = &mut grads[b.0];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gy) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gy;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |i| g[i] * bv[i]);
                acc!(*b, |i| g[i] * av[i]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |i| g[i] / bv[i]);
                acc!(*b, |i| -g[i] * av[i] / (bv[i] * bv[i]));
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |i| if av[i] >= bv[i] { g[i] } else { 0.0 });
                acc!(*b, |i| if av[i] >= bv[i] { 0.0 } else { g[i] });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |i| if av[i] <= bv[i] { g[i] } else { 0.0 });
                acc!(*b, |i| if av[i] <= bv[i] { 0.0 } else { g[i] });
            }
            Op::AddRow(a, row) => {
                acc!(*a, |i| g[i]);
                acc!(*row, |j| (0..m).map(|i| g[i * n + j]).sum::<f64>());
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                acc!(*a, |i| g[i] * cv[i / n]);
                acc!(*col, |r| (0..n).map(|j| g[r * n + j] * av[r * n + j]).sum::<f64>());
            }
            Op::Scale(a, s) => acc!(*a, |i| g[i] * s),
            Op::AddScalar(a) => acc!(*a, |i| g[i]),
            Op::Relu(a) => {
                let av = val(*a);
                acc!(*a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => acc!(*a, |i| g[i] * y[i] * (1.0 - y[i])),
            Op::LogSigmoid(a) => {
                let av = val(*a);
                acc!(*a, |i| g[i] * sigmoid(-av[i]));
            }
            Op::Exp(a) => acc!(*a, |i| g[i] * y[i]),
            Op::Log(a) => {
                let av = val(*a);
                acc!(*a, |i| g[i] / av[i]);
            }
            Op::Sqrt(a) => acc!(*a, |i| g[i] * 0.5 / y[i]),
            Op::Abs(a) => {
                let av = val(*a);
                acc!(*a, |i| g[i] * av[i].signum() * if av[i] == 0.0 { 0.0 } else { 1.0 });
            }
            Op::Powf(a, p) => {
                let av = val(*a);
                acc!(*a, |i| if av[i] == 0.0 && *p >= 1.0 {
                    if *p == 1.0 { g[i] } else { 0.0 }
                } else {
                    g[i] * p * av[i].powf(p - 1.0)
                });
            }
            Op::Transpose(a) => {
                // y is n x m... node dims are (m, n) = transposed input dims.
                acc!(*a, |i| {
                    let (r, c) = (i / m, i % m);
                    g[c * n + r]
                });
            }
            Op::Reshape(a) => acc!(*a, |i| g[i]),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc!(*p, |i| g[off + i]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].cols;
                    acc!(*p, |i| g[(i / w) * n + off + i % w]);
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (lo, hi) = (start * n, (start + m) * n);
                acc!(*a, |i| if i >= lo && i < hi { g[i - lo] } else { 0.0 });
            }
            Op::SliceCols(a, start) => {
                let w = self.nodes[a.0].cols;
                acc!(*a, |i| {
                    let c = i % w;
                    if c >= *start && c < start + n {
                        g[(i / w) * n + c - start]
                    } else {
                        0.0
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                if self.nodes[table.0].requires_grad {
                    let gt = &mut grads[table.0];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            gt[src * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SumAll(a) => acc!(*a, |_i| g[0]),
            Op::SumRows(a) => acc!(*a, |i| g[i % n]),
            Op::SoftmaxRows(a) => {
                let dots: Vec<f64> = (0..m)
                    .map(|i| (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum())
                    .collect();
                acc!(*a, |i| y[i] * (g[i] - dots[i / n]));
            }
            Op::LogSoftmaxRows(a) => {
                let sums: Vec<f64> = (0..m).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                acc!(*a, |i| g[i] - y[i].exp() * sums[i / n]);
            }
            Op::MeanPoolRows(a, keep) => {
                if self.nodes[a.0].requires_grad {
                    let k = keep.len() as f64;
                    let ga = &mut grads[a.0];
                    for &r in keep {
                        for j in 0..n {
                            ga[r * n + j] += g[j] / k;
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let dots: Vec<f64> = (0..m)
                    .map(|i| (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum())
                    .collect();
                acc!(*a, |i| (g[i] - y[i] * dots[i / n]) / norms[i / n]);
            }
            Op::Cosine(u, v, nu, nv) => {
                let (uv, vv) = (val(*u), val(*v));
                let s = y[0];
                let (nu, nv) = (*nu, *nv);
                acc!(*u, |i| g[0] * (vv[i] / (nu * nv) - s * uv[i] / (nu * nu)));
                acc!(*v, |i| g[0] * (uv[i] / (nu * nv) - s * vv[i] / (nv * nv)));
            }
        }
    }
}

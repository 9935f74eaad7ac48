//! Reverse-mode differentiation over a dynamically recorded operation tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward sweep is a single reverse scan.
//! A tape is built per training step and dropped afterwards.

use super::{NumericsError, ParameterStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVec(Var, Var),
    AddColVec(Var, Var),
    MulConst(Var, Tensor),
    MulRows(Var, Vec<f64>),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LogSumExpRows(Var),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Reverse(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Single-threaded; independent tapes share nothing.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Adjoints produced by one backward sweep, indexed by node.
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros shaped like its value when nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()))
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op });
        }
        let requires_grad = match &kind {
            Op::Leaf => false,
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowVec(a, b)
            | Op::AddColVec(a, b)
            | Op::MatMul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::MulRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::SliceRows(a, _, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::LogSumExpRows(a)
            | Op::Gather(a, _)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::Reverse(a) => self.rg(*a),
        };
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push("constant", value, Op::Leaf)
    }

    /// Differentiable input not bound to a named parameter (e.g. a latent
    /// whose gradient is wanted directly).
    pub fn input(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        let v = self.push("input", value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Binds a named parameter from the store as a differentiable leaf.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, NumericsError> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.input(value)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", &[x.shape(), y.shape()]));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("sub", &[x.shape(), y.shape()]));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", &[x.shape(), y.shape()]));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let t = self.value(a).map(|v| v * factor);
        self.push("scale", t, Op::Scale(a, factor))
    }

    /// `a[r, c] + v[c]` for every row `r`.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(v));
        let (rows, cols) = x.rows_cols();
        if y.len() != cols {
            return Err(mismatch("add_row_vec", &[x.shape(), y.shape()]));
        }
        let mut data = x.data().to_vec();
        for r in 0..rows {
            for (o, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(y.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push("add_row_vec", t, Op::AddRowVec(a, v))
    }

    /// `a[r, c] + v[r]` for every column `c`.
    pub fn add_col_vec(&mut self, a: Var, v: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(v));
        let (rows, cols) = x.rows_cols();
        if y.len() != rows {
            return Err(mismatch("add_col_vec", &[x.shape(), y.shape()]));
        }
        let mut data = x.data().to_vec();
        for r in 0..rows {
            let b = y.data()[r];
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o += b;
            }
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push("add_col_vec", t, Op::AddColVec(a, v))
    }

    /// Elementwise product with a constant of the same shape (masks, dropout).
    pub fn mask(&mut self, a: Var, mask: Tensor) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if x.shape() != mask.shape() {
            return Err(mismatch("mask", &[x.shape(), mask.shape()]));
        }
        let data = x.data().iter().zip(mask.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mask", t, Op::MulConst(a, mask))
    }

    /// Scales row `r` by the constant `factors[r]`.
    pub fn mask_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (rows, cols) = x.rows_cols();
        if factors.len() != rows {
            return Err(mismatch("mask_rows", &[x.shape(), &[factors.len()]]));
        }
        let mut data = x.data().to_vec();
        for r in 0..rows {
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o *= factors[r];
            }
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push("mask_rows", t, Op::MulRows(a, factors))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(mismatch("matmul", &[x.shape(), y.shape()]));
        }
        let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let data = matmul_raw(x.data(), y.data(), n, k, m);
        let t = Tensor::new(vec![n, m], data)?;
        self.push("matmul", t, Op::MatMul(a, b))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidShape(vec![]));
        }
        let rows = self.value(parts[0]).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                let shapes: Vec<&[usize]> = parts.iter().map(|&q| self.value(q).shape()).collect();
                return Err(mismatch("concat_cols", &shapes));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidShape(vec![]));
        }
        let cols = self.value(parts[0]).rows_cols().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if c != cols {
                let shapes: Vec<&[usize]> = parts.iter().map(|&q| self.value(q).shape()).collect();
                return Err(mismatch("concat_rows", &shapes));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (rows, cols) = x.rows_cols();
        if start >= end || end > cols {
            return Err(mismatch("slice_cols", &[x.shape(), &[start, end]]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * cols + start..r * cols + end]);
        }
        let t = Tensor::new(vec![rows, w], data)?;
        self.push("slice_cols", t, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (rows, cols) = x.rows_cols();
        if start >= end || end > rows {
            return Err(mismatch("slice_rows", &[x.shape(), &[start, end]]));
        }
        let data = x.data()[start * cols..end * cols].to_vec();
        let t = Tensor::new(vec![end - start, cols], data)?;
        self.push("slice_rows", t, Op::SliceRows(a, start, end))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (rows, cols) = x.rows_cols();
        let t = Tensor::new(vec![cols, rows], transpose_raw(x.data(), rows, cols))?;
        self.push("transpose", t, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a).map(f64::tanh);
        self.push("tanh", t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push("sigmoid", t, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a).map(f64::exp);
        self.push("exp", t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a).map(f64::ln);
        self.push("log", t, Op::Log(a))
    }

    /// Row-wise log-sum-exp, `[rows, cols] -> [rows, 1]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (rows, cols) = x.rows_cols();
        let data = (0..rows)
            .map(|r| super::log_sum_exp(&x.data()[r * cols..(r + 1) * cols]))
            .collect();
        let t = Tensor::new(vec![rows, 1], data)?;
        self.push("log_sum_exp_rows", t, Op::LogSumExpRows(a))
    }

    /// Row-wise log-softmax composed from log-sum-exp.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let lse = self.log_sum_exp_rows(a)?;
        let neg = self.scale(lse, -1.0)?;
        self.add_col_vec(a, neg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ls = self.log_softmax_rows(a)?;
        self.exp(ls)
    }

    /// Picks flat (row-major) entries, `-> [indices.len(), 1]`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if indices.is_empty() {
            return Err(NumericsError::InvalidShape(vec![0]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(mismatch("gather", &[x.shape(), &[bad]]));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let t = Tensor::new(vec![indices.len(), 1], data)?;
        self.push("gather", t, Op::Gather(a, indices))
    }

    /// Row lookup (embedding table), `[V, E] -> [ids.len(), E]`.
    pub fn gather_rows(&mut self, a: Var, ids: Vec<usize>) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (rows, cols) = x.rows_cols();
        if ids.is_empty() {
            return Err(NumericsError::InvalidShape(vec![0]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(mismatch("gather_rows", &[x.shape(), &[bad]]));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in &ids {
            data.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![ids.len(), cols], data)?;
        self.push("gather_rows", t, Op::GatherRows(a, ids))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push("sum", t, Op::Sum(a))
    }

    /// Gradient reversal: identity forward, exact sign flip backward.
    pub fn reverse_gradient(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a).clone();
        self.push("reverse_gradient", t, Op::Reverse(a))
    }

    /// Reverse sweep from a scalar root with seed adjoint 1.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        self.sweep(root, true)
    }

    /// Reverse sweep treating every gradient-reversal node as identity: the
    /// true gradient of the recorded function.
    pub fn backward_unreversed(&self, root: Var) -> Result<Gradients, NumericsError> {
        self.sweep(root, false)
    }

    fn sweep(&self, root: Var, flip: bool) -> Result<Gradients, NumericsError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(mismatch("backward", &[rv.shape()]));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::filled(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.is_finite() {
                return Err(NumericsError::NonFinite { op: "backward" });
            }
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut adj, flip);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(contrib.reshaped(shape).expect("adjoint size matches value"));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>], flip: bool) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(z.data()).map(|(p, q)| p * q).collect();
                    self.accumulate(adj, *a, Tensor::vector(d));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
                    self.accumulate(adj, *b, Tensor::vector(d));
                }
            }
            Op::Scale(a, f) => self.accumulate(adj, *a, g.map(|v| v * f)),
            Op::AddRowVec(a, v) => {
                self.accumulate(adj, *a, g.clone());
                if self.rg(*v) {
                    let (rows, cols) = g.rows_cols();
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for (o, x) in d.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *o += x;
                        }
                    }
                    self.accumulate(adj, *v, Tensor::vector(d));
                }
            }
            Op::AddColVec(a, v) => {
                self.accumulate(adj, *a, g.clone());
                if self.rg(*v) {
                    let (rows, cols) = g.rows_cols();
                    let d = (0..rows)
                        .map(|r| g.data()[r * cols..(r + 1) * cols].iter().sum())
                        .collect();
                    self.accumulate(adj, *v, Tensor::vector(d));
                }
            }
            Op::MulConst(a, m) => {
                let d = g.data().iter().zip(m.data()).map(|(p, q)| p * q).collect();
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::MulRows(a, f) => {
                let (rows, cols) = g.rows_cols();
                let mut d = g.data().to_vec();
                for r in 0..rows {
                    for o in &mut d[r * cols..(r + 1) * cols] {
                        *o *= f[r];
                    }
                }
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::MatMul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let (n, k, m) = (x.shape()[0], x.shape()[1], z.shape()[1]);
                if self.rg(*a) {
                    let zt = transpose_raw(z.data(), k, m);
                    self.accumulate(adj, *a, Tensor::vector(matmul_raw(g.data(), &zt, n, m, k)));
                }
                if self.rg(*b) {
                    let xt = transpose_raw(x.data(), n, k);
                    self.accumulate(adj, *b, Tensor::vector(matmul_raw(&xt, g.data(), k, n, m)));
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).rows_cols().1;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(adj, p, Tensor::vector(d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        self.accumulate(adj, p, Tensor::vector(g.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (rows, cols) = self.value(*a).rows_cols();
                let w = end - start;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::SliceRows(a, start, end) => {
                let (rows, cols) = self.value(*a).rows_cols();
                let mut d = vec![0.0; rows * cols];
                d[start * cols..end * cols].copy_from_slice(g.data());
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::Transpose(a) => {
                let (rows, cols) = g.rows_cols();
                self.accumulate(adj, *a, Tensor::vector(transpose_raw(g.data(), rows, cols)));
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(y.data()).map(|(p, t)| p * (1.0 - t * t)).collect();
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(y.data()).map(|(p, s)| p * s * (1.0 - s)).collect();
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(y.data()).map(|(p, e)| p * e).collect();
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(p, v)| p / v).collect();
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let (rows, cols) = x.rows_cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (gr, lse) = (g.data()[r], y.data()[r]);
                    for c in 0..cols {
                        d[r * cols + c] = gr * (x.data()[r * cols + c] - lse).exp();
                    }
                }
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::Gather(a, idx) => {
                let mut d = vec![0.0; self.value(*a).len()];
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    d[i] += gv;
                }
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::GatherRows(a, ids) => {
                let (rows, cols) = self.value(*a).rows_cols();
                let mut d = vec![0.0; rows * cols];
                for (k, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g.data()[k * cols + c];
                    }
                }
                self.accumulate(adj, *a, Tensor::vector(d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(adj, *a, Tensor::vector(vec![g.data()[0]; n]));
            }
            Op::Reverse(a) if flip => self.accumulate(adj, *a, g.map(|v| -v)),
            Op::Reverse(a) => self.accumulate(adj, *a, g.clone()),
        }
    }
}

//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. Because a node can
//! only reference nodes that already exist, the node list is topologically
//! sorted by construction and the backward sweep is a single reverse pass.

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    NormalizeRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    TakePerRow { x: Var, cols: Vec<usize> },
    Sum(Var),
    Mean(Var),
    OffDiag(Var),
    CumsumRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], len: usize, v: Var) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return shape_err("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), ng))
    }

    /// Block-wise product. `a` stacks `batch` blocks of `m×k` rows, `b`
    /// stacks `batch` blocks of `k×n` (or `n×k` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, batch: usize, trans_b: bool) -> Result<Var> {
        let (ar, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        if batch == 0 || ar % batch != 0 || br % batch != 0 {
            return shape_err("bmm", format!("{ar} / {br} rows not divisible by {batch}"));
        }
        let m = ar / batch;
        let (kb, n) = if trans_b { (bc, br / batch) } else { (br / batch, bc) };
        if kb != k {
            return shape_err("bmm", format!("inner dims {k} vs {kb}"));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for blk in 0..batch {
            let ab = &av[blk * m * k..(blk + 1) * m * k];
            let bb = &bv[blk * k * n..(blk + 1) * k * n];
            let cb = &mut out[blk * m * n..(blk + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(vec![batch * m, n], out),
            Op::Bmm {
                a,
                b,
                batch,
                trans_b,
            },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect());
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(row).len() != n {
            return shape_err("add_row", format!("{m}x{n} + row of {}", self.value(row).len()));
        }
        let rv = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *d += r;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow(x, row), ng))
    }

    /// Multiplies every entry by a `1×1` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("mul_scalar", "scale node must hold one value");
        }
        let sv = self.scalar_value(s);
        let xv = self.value(x);
        let t = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v * sv).collect(),
        );
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulScalar(x, s), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddConst(x), |v| v + c)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Degenerate(format!("log of non-positive value {v}")));
        }
        Ok(self.map(x, Op::Log(x), f64::ln))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// Softmax over each row, max-subtracted.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::RowSoftmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::LogSoftmax(x), ng)
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).normalize_rows()?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::NormalizeRows(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(t, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).reshape(vec![rows, cols])?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let m = self.dims(first).0;
        if parts.iter().any(|p| self.dims(*p).0 != m) {
            return shape_err("concat_cols", "row counts differ");
        }
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return shape_err("slice_cols", format!("[{start}, {end}) of {n} cols"));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![m, w], data),
            Op::SliceCols { x, start },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let t = Tensor::stack_rows(&refs)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Output row `r` is input row `idx[r]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let m = self.dims(x).0;
        if let Some(bad) = idx.iter().find(|i| **i >= m) {
            return shape_err("gather_rows", format!("row {bad} of {m}"));
        }
        let t = self.value(x).select_rows(idx);
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// `out[i] = x[i, cols[i]]`, as an `m×1` column.
    pub fn take_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if cols.len() != m || cols.iter().any(|c| *c >= n) {
            return shape_err("take_per_row", format!("{} picks from {m}x{n}", cols.len()));
        }
        let xv = self.value(x);
        let data = cols.iter().enumerate().map(|(i, &c)| xv.get(i, c)).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![m, 1], data),
            Op::TakePerRow {
                x,
                cols: cols.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![1, 1], vec![s]), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![1, 1], vec![s]), Op::Mean(x), ng)
    }

    /// Drops the diagonal of a square `J×J` matrix, giving `J×(J−1)`.
    pub fn off_diagonal(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m != n || m < 2 {
            return shape_err("off_diagonal", format!("{m}x{n}"));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * (m - 1));
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    data.push(xv.get(i, j));
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![m, m - 1], data),
            Op::OffDiag(x),
            ng,
        ))
    }

    /// Running sum along each row.
    pub fn cumsum_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 1..n {
                data[i * n + j] += data[i * n + j - 1];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::CumsumRows(x), ng)
    }

    /// Cosine similarity of two vectors, as a `1×1` node.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let n = self.value(u).len();
        if self.value(v).len() != n {
            return shape_err("cosine", format!("{n} vs {}", self.value(v).len()));
        }
        let u = self.reshape(u, 1, n)?;
        let v = self.reshape(v, 1, n)?;
        let un = self.normalize_rows(u)?;
        let vn = self.normalize_rows(v)?;
        self.matmul_nt(un, vn)
    }

    /// Pairwise cosine similarity between the rows of `a` and of `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        self.matmul_nt(an, bn)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let n_nodes = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n_nodes).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let len = |v: Var| self.nodes[v.0].value.len();
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let y = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if ng(*a) {
                    let da = acc(grads, m * k, *a);
                    gemm_nt(g, val(*b).data(), da, m, n, k);
                }
                if ng(*b) {
                    let db = acc(grads, k * n, *b);
                    gemm_tn(val(*a).data(), g, db, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).rows();
                if ng(*a) {
                    let da = acc(grads, m * k, *a);
                    gemm_nn(g, val(*b).data(), da, m, n, k);
                }
                if ng(*b) {
                    let db = acc(grads, n * k, *b);
                    gemm_tn(g, val(*a).data(), db, m, n, k);
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                trans_b,
            } => {
                let batch = *batch;
                let (ar, k) = val(*a).dims2();
                let m = ar / batch;
                let n = node.value.cols();
                let av = val(*a).data();
                let bv = val(*b).data();
                if ng(*a) {
                    let da = acc(grads, ar * k, *a);
                    for blk in 0..batch {
                        let gb = &g[blk * m * n..(blk + 1) * m * n];
                        let bb = &bv[blk * k * n..(blk + 1) * k * n];
                        let dab = &mut da[blk * m * k..(blk + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gb, bb, dab, m, n, k);
                        } else {
                            gemm_nt(gb, bb, dab, m, n, k);
                        }
                    }
                }
                if ng(*b) {
                    let db = acc(grads, batch * k * n, *b);
                    for blk in 0..batch {
                        let gb = &g[blk * m * n..(blk + 1) * m * n];
                        let ab = &av[blk * m * k..(blk + 1) * m * k];
                        let dbb = &mut db[blk * k * n..(blk + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gb, ab, dbb, m, n, k);
                        } else {
                            gemm_tn(ab, gb, dbb, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if ng(v) {
                        let d = acc(grads, g.len(), v);
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if ng(v) {
                        let d = acc(grads, g.len(), v);
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let bv = val(*b).data();
                    let d = acc(grads, g.len(), *a);
                    for ((d, g), o) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * o;
                    }
                }
                if ng(*b) {
                    let av = val(*a).data();
                    let d = acc(grads, g.len(), *b);
                    for ((d, g), o) in d.iter_mut().zip(g).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if ng(*x) {
                    let d = acc(grads, g.len(), *x);
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if ng(*row) {
                    let n = len(*row);
                    let d = acc(grads, n, *row);
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s).data()[0];
                if ng(*x) {
                    let d = acc(grads, g.len(), *x);
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv);
                }
                if ng(*s) {
                    let dot: f64 = g.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                    acc(grads, 1, *s)[0] += dot;
                }
            }
            Op::Scale(x, c) => {
                let d = acc(grads, g.len(), *x);
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                let d = acc(grads, g.len(), *x);
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Tanh(x) => {
                let d = acc(grads, g.len(), *x);
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let d = acc(grads, g.len(), *x);
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Exp(x) => {
                let d = acc(grads, g.len(), *x);
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                let d = acc(grads, g.len(), *x);
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    *d += g / x;
                }
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                let d = acc(grads, g.len(), *x);
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    // subgradient 0 at the kink
                    if *x > 0.0 {
                        *d += g;
                    } else if *x < 0.0 {
                        *d -= g;
                    }
                }
            }
            Op::Square(x) => {
                let xv = val(*x).data();
                let d = acc(grads, g.len(), *x);
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    *d += 2.0 * g * x;
                }
            }
            Op::RowSoftmax(x) => {
                let n = node.value.cols();
                let d = acc(grads, g.len(), *x);
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (g - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = node.value.cols();
                let d = acc(grads, g.len(), *x);
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += g - y.exp() * gsum;
                    }
                }
            }
            Op::NormalizeRows(x) => {
                let n = node.value.cols();
                let xv = val(*x).data();
                let d = acc(grads, g.len(), *x);
                for (((dr, gr), yr), xr) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .zip(xv.chunks(n))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += (g - y * dot) / norm;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2();
                let d = acc(grads, g.len(), *x);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if ng(*p) {
                        let d = acc(grads, m * w, *p);
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).dims2();
                let w = node.value.cols();
                let d = acc(grads, m * n, *x);
                for i in 0..m {
                    for j in 0..w {
                        d[i * n + start + j] += g[i * w + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let l = len(*p);
                    if ng(*p) {
                        let d = acc(grads, l, *p);
                        d.iter_mut()
                            .zip(&g[offset..offset + l])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += l;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.cols();
                let d = acc(grads, len(*x), *x);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] += g[r * n + j];
                    }
                }
            }
            Op::TakePerRow { x, cols } => {
                let n = val(*x).cols();
                let d = acc(grads, len(*x), *x);
                for (i, &c) in cols.iter().enumerate() {
                    d[i * n + c] += g[i];
                }
            }
            Op::Sum(x) => {
                let d = acc(grads, len(*x), *x);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let l = len(*x);
                let d = acc(grads, l, *x);
                let share = g[0] / l as f64;
                d.iter_mut().for_each(|d| *d += share);
            }
            Op::OffDiag(x) => {
                let m = val(*x).rows();
                let d = acc(grads, m * m, *x);
                let mut k = 0;
                for i in 0..m {
                    for j in 0..m {
                        if i != j {
                            d[i * m + j] += g[k];
                            k += 1;
                        }
                    }
                }
            }
            Op::CumsumRows(x) => {
                let n = node.value.cols();
                let d = acc(grads, g.len(), *x);
                for (dr, gr) in d.chunks_mut(n).zip(g.chunks(n)) {
                    let mut running = 0.0;
                    for j in (0..n).rev() {
                        running += gr[j];
                        dr[j] += running;
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

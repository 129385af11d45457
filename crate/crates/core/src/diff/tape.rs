//! Reverse-mode differentiation over an explicit operation record.
//!
//! A [`Tape`] owns every intermediate value of one loss evaluation. Nodes are
//! appended in evaluation order, so a reverse sweep over indices visits each
//! node once, after all of its consumers.

use std::sync::Arc;

use crate::diff::{gemm, log_sigmoid, logsumexp, sigmoid, CsrMatrix, Matrix};
use crate::error::{Error, Result};

/// Probabilities entering a log are kept this far from 0 and 1.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    StopGrad(Var),
    LogSigmoid(Var),
    CrossEntropy {
        logits: Var,
        rows: Arc<Vec<usize>>,
        labels: Arc<Vec<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one loss evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was not reached from the root.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Param => true,
            Op::Constant | Op::StopGrad(_) => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::SpMM(_, a)
            | Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Square(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::SliceRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::LogSigmoid(a) => self.needs(*a),
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
            Op::ConcatCols(vs) => vs.iter().any(|v| self.needs(*v)),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).shape(), (1, 1));
        self.value(v).as_slice()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Direct inputs of the operation that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::SpMM(_, a)
            | Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Square(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::SliceRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::StopGrad(a)
            | Op::LogSigmoid(a) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }

    /// Learnable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Param)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let mut out = Matrix::zeros(x.rows(), y.cols());
        gemm(1.0, x, false, y, false, 0.0, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Sparse constant times a dense node.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let out = s.spmm(self.value(x))?;
        Ok(self.push(out, Op::SpMM(Arc::clone(s), x)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Adds a 1×c row vector to every row of an r×c matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(m), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut out = x.clone();
        let rv = r.as_slice().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(m, row)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: x.shape(),
                right: (start, end),
            });
        }
        let out = x.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(*first).shape(),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::contract("mean of an empty matrix"));
        }
        let s = x.sum() / x.len() as f64;
        Ok(self.push(Matrix::filled(1, 1, s), Op::Mean(a)))
    }

    /// Column means as a 1×c row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).col_means()?;
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// Forwards the value of `a`; no gradient flows back through it.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGrad(a))
    }

    /// Element-wise `ln(clamp(sigmoid(x), PROB_CLAMP, 1 - PROB_CLAMP))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(clamped_log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    /// Mean over `rows` of `-log softmax(logits[row])[label]`.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if rows.is_empty() {
            return Err(Error::contract("cross-entropy over an empty mask"));
        }
        if rows.len() != labels.len() {
            return Err(Error::contract("cross-entropy rows and labels differ in length"));
        }
        let mut total = 0.0;
        for (&r, &y) in rows.iter().zip(labels) {
            if r >= z.rows() || y >= z.cols() {
                return Err(Error::contract(format!(
                    "cross-entropy index (row {r}, label {y}) outside logits {:?}",
                    z.shape()
                )));
            }
            let row = z.row(r);
            total += logsumexp(row) - row[y];
        }
        let loss = total / rows.len() as f64;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                rows: Arc::new(rows.to_vec()),
                labels: Arc::new(labels.to_vec()),
            },
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if !self.needs(root) {
            return Ok(Gradients { grads, shapes });
        }
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            // Interior gradients are dropped as soon as they are consumed.
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Param | Op::Constant | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm(1.0, g, false, val(*b), true, 0.0, &mut ga);
                    accumulate(&mut grads[a.0], ga);
                }
                if self.needs(*b) {
                    let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm(1.0, val(*a), true, g, false, 0.0, &mut gb);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::SpMM(s, a) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], s.spmm_transposed(g)?);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.transpose());
                }
            }
            Op::Add(a, b) => {
                same_shape("add_backward", val(*a), g)?;
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
            }
            Op::AddRow(m, row) => {
                if self.needs(*m) {
                    accumulate(&mut grads[m.0], g.clone());
                }
                if self.needs(*row) {
                    let mut gr = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (acc, x) in gr.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads[row.0], Matrix::row_vector(&gr));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.hadamard(val(*b))?);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.hadamard(val(*a))?);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.scale(*c));
                }
            }
            Op::Square(a) => {
                if self.needs(*a) {
                    let ga = zip(g, val(*a), |gi, x| 2.0 * x * gi);
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.needs(*a) {
                    let ga = zip(g, val(*a), |gi, x| if x > 0.0 { gi } else { slope * gi });
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let ga = zip(g, out, |gi, t| gi * (1.0 - t * t));
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::SliceRows(a, start) => {
                if self.needs(*a) {
                    let src = val(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    if self.needs(*p) {
                        let mut gp = Matrix::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        accumulate(&mut grads[p.0], gp);
                    }
                    off += pc;
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads[a.0], Matrix::filled(r, c, g.as_slice()[0]));
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let (r, c) = val(*a).shape();
                    let v = g.as_slice()[0] / (r * c) as f64;
                    accumulate(&mut grads[a.0], Matrix::filled(r, c, v));
                }
            }
            Op::MeanRows(a) => {
                if self.needs(*a) {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.as_slice()) {
                            *o = x * inv;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::LogSigmoid(a) => {
                if self.needs(*a) {
                    let ga = zip(g, val(*a), |gi, x| gi * clamped_log_sigmoid_grad(x));
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::CrossEntropy { logits, rows, labels } => {
                if self.needs(*logits) {
                    let z = val(*logits);
                    let mut gz = Matrix::zeros(z.rows(), z.cols());
                    let w = g.as_slice()[0] / rows.len() as f64;
                    for (&r, &y) in rows.iter().zip(labels.iter()) {
                        let row = z.row(r);
                        let lse = logsumexp(row);
                        let dst = gz.row_mut(r);
                        for (d, &x) in dst.iter_mut().zip(row) {
                            *d += w * (x - lse).exp();
                        }
                        dst[y] -= w;
                    }
                    accumulate(&mut grads[logits.0], gz);
                }
            }
        }
        Ok(())
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_parts(a.rows(), a.cols(), data)
}

/// `ln p` with `p = sigmoid(x)` clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn clamped_log_sigmoid(x: f64) -> f64 {
    let p = sigmoid(x);
    if p < PROB_CLAMP {
        PROB_CLAMP.ln()
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP).ln()
    } else {
        log_sigmoid(x)
    }
}

fn clamped_log_sigmoid_grad(x: f64) -> f64 {
    let p = sigmoid(x);
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        1.0 - p
    }
}

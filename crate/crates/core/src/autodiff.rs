//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`Tape`] records every operation as it is evaluated. [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar (`1 × 1`)
//! node with respect to every named parameter. [`Tape::replay`] re-evaluates
//! the record from its leaves through the same code path, so it reproduces
//! every value bit for bit.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;

/// Handle to a node of a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Param(String),
    Const,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a + 1·row`, row is `1 × c`.
    AddRow(Var, Var),
    /// `a + col·1ᵀ`, col is `n × 1`.
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Exp(Var),
    Powf(Var, f64),
    RowSqNorm(Var),
    RowSum(Var),
    ColSum(Var),
    MeanRows(Var),
    Sum(Var),
    RowNormalize(Var, f64),
    RowSoftmax(Var, bool),
    Standardize(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    MaskLower(Var),
    CumsumRows(Var),
    CrossEntropy(Var, Vec<usize>),
    Mse(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Param(_) | Const => vec![],
            MatMul(a, b)
            | MatMulNt(a, b)
            | MatMulTn(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddRow(a, b)
            | AddCol(a, b)
            | MulRow(a, b)
            | MulCol(a, b)
            | Mse(a, b) => vec![*a, *b],
            Scale(a, _)
            | Relu(a)
            | Exp(a)
            | Powf(a, _)
            | RowSqNorm(a)
            | RowSum(a)
            | ColSum(a)
            | MeanRows(a)
            | Sum(a)
            | RowNormalize(a, _)
            | RowSoftmax(a, _)
            | Standardize(a, _)
            | SelectRows(a, _)
            | MaskLower(a)
            | CumsumRows(a)
            | CrossEntropy(a, _) => vec![*a],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// The record of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.by_name.get(name)
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>, what: &str) -> Result<Matrix> {
    Matrix::new(rows, cols, data).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite(String::from(what)),
        other => other,
    })
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// The `1 × 1` value of `v` as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(name.into()),
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Const });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }
    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulTn(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }
    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    /// Adds an `n × 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::AddCol(a, col))
    }
    /// Multiplies column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }
    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::MulCol(a, col))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    /// Elementwise `a^p`; entries must be positive.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.push(Op::Powf(a, p))
    }
    /// `n × 1` squared row norms.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSqNorm(a))
    }
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSum(a))
    }
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::ColSum(a))
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    /// Row `z ↦ z / max(‖z‖, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::RowNormalize(a, eps))
    }
    /// Row softmax; with `causal` the entries above the diagonal are
    /// excluded and set to zero.
    pub fn row_softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        self.push(Op::RowSoftmax(a, causal))
    }
    /// Row `z ↦ (z − mean) / sqrt(var + eps)`.
    pub fn standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::Standardize(a, eps))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    /// Gathers rows (indices may repeat).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.push(Op::SelectRows(a, indices.to_vec()))
    }
    /// Zeroes the entries above the diagonal.
    pub fn mask_lower(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MaskLower(a))
    }
    /// Prefix sums down the rows.
    pub fn cumsum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::CumsumRows(a))
    }
    /// Mean softmax cross-entropy of the rows of `logits` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, labels.to_vec()))
    }
    /// Mean squared difference over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.push(Op::Mse(pred, target))
    }

    /// Signs of every ReLU input and the branch taken by every row
    /// normalization, in tape order. Two evaluations with equal patterns lie
    /// on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.nodes[a.0].value.as_slice().iter().map(|&v| v > 0.0)),
                Op::RowNormalize(a, eps) => {
                    let m = &self.nodes[a.0].value;
                    out.extend((0..m.rows()).map(|i| crate::linalg::norm2(m.row(i)) > *eps));
                }
                _ => {}
            }
        }
        out
    }

    /// Re-evaluates every non-leaf node from the recorded leaves and returns
    /// the recomputed value of `out`.
    pub fn replay(&self, out: Var) -> Result<Matrix> {
        self.check(out)?;
        let mut fresh: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Param(_) | Op::Const => node.value.clone(),
                ref op => eval(op, &fresh)?,
            };
            fresh.push(Node {
                value,
                op: node.op.clone(),
            });
        }
        Ok(fresh.swap_remove(out.0).value)
    }

    fn check(&self, out: Var) -> Result<()> {
        if out.0 >= self.nodes.len() {
            return Err(Error::TapeIntegrity(format!(
                "node {} on a tape of {}",
                out.0,
                self.nodes.len()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= i) {
                return Err(Error::TapeIntegrity(format!("node {i} reads node {}", bad.0)));
            }
        }
        Ok(())
    }

    /// Gradient of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::TapeIntegrity(format!(
                "loss node has shape {:?}, expected 1x1",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut by_name = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(name) = &node.op {
                let m = mat(node.value.rows(), node.value.cols(), g, name)?;
                match by_name.get_mut(name) {
                    None => {
                        by_name.insert(name.clone(), m);
                    }
                    Some(prev) => *prev = Matrix::add(prev, &m)?,
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { by_name })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let (rows, cols) = node.value.shape();
        let gm = || Matrix::new(rows, cols, g.to_vec());
        use Op::*;
        match &node.op {
            Param(_) | Const => {}
            MatMul(a, b) => {
                let gm = gm()?;
                acc(grads, *a, gm.matmul_nt(val(b))?.as_slice());
                acc(grads, *b, val(a).matmul_tn(&gm)?.as_slice());
            }
            MatMulNt(a, b) => {
                let gm = gm()?;
                acc(grads, *a, gm.matmul(val(b))?.as_slice());
                acc(grads, *b, gm.matmul_tn(val(a))?.as_slice());
            }
            MatMulTn(a, b) => {
                let gm = gm()?;
                acc(grads, *a, val(b).matmul_nt(&gm)?.as_slice());
                acc(grads, *b, val(a).matmul(&gm)?.as_slice());
            }
            Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Sub(a, b) => {
                acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(grads, *b, &neg);
            }
            Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(val(b).as_slice()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(val(a).as_slice()).map(|(x, y)| x * y).collect();
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                acc(grads, *a, &ga);
            }
            AddRow(a, r) => {
                acc(grads, *a, g);
                let mut gr = vec![0.0; cols];
                for row in g.chunks(cols) {
                    gr.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                acc(grads, *r, &gr);
            }
            AddCol(a, c) => {
                acc(grads, *a, g);
                let gc: Vec<f64> = g.chunks(cols).map(|row| row.iter().sum()).collect();
                acc(grads, *c, &gc);
            }
            MulRow(a, r) => {
                let rv = val(r).as_slice();
                let av = val(a).as_slice();
                let mut ga = vec![0.0; g.len()];
                let mut gr = vec![0.0; cols];
                for idx in 0..g.len() {
                    let j = idx % cols;
                    ga[idx] = g[idx] * rv[j];
                    gr[j] += g[idx] * av[idx];
                }
                acc(grads, *a, &ga);
                acc(grads, *r, &gr);
            }
            MulCol(a, c) => {
                let cv = val(c).as_slice();
                let av = val(a).as_slice();
                let mut ga = vec![0.0; g.len()];
                let mut gc = vec![0.0; rows];
                for idx in 0..g.len() {
                    let r = idx / cols;
                    ga[idx] = g[idx] * cv[r];
                    gc[r] += g[idx] * av[idx];
                }
                acc(grads, *a, &ga);
                acc(grads, *c, &gc);
            }
            Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(a).as_slice())
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect();
                acc(grads, *a, &ga);
            }
            Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(node.value.as_slice()).map(|(x, y)| x * y).collect();
                acc(grads, *a, &ga);
            }
            Powf(a, p) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(a).as_slice())
                    .map(|(x, &y)| x * p * math::powf(y, p - 1.0))
                    .collect();
                acc(grads, *a, &ga);
            }
            RowSqNorm(a) => {
                let av = val(a);
                let c = av.cols();
                let ga: Vec<f64> = av
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| 2.0 * v * g[idx / c])
                    .collect();
                acc(grads, *a, &ga);
            }
            RowSum(a) => {
                let c = val(a).cols();
                let ga: Vec<f64> = (0..val(a).as_slice().len()).map(|idx| g[idx / c]).collect();
                acc(grads, *a, &ga);
            }
            ColSum(a) => {
                let n = val(a).as_slice().len();
                let ga: Vec<f64> = (0..n).map(|idx| g[idx % cols]).collect();
                acc(grads, *a, &ga);
            }
            MeanRows(a) => {
                let r = val(a).rows() as f64;
                let n = val(a).as_slice().len();
                let ga: Vec<f64> = (0..n).map(|idx| g[idx % cols] / r).collect();
                acc(grads, *a, &ga);
            }
            Sum(a) => {
                let ga = vec![g[0]; val(a).as_slice().len()];
                acc(grads, *a, &ga);
            }
            RowNormalize(a, eps) => {
                let z = val(a);
                let y = node.value.as_slice();
                let mut ga = vec![0.0; g.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let norm = crate::linalg::norm2(z.row(r));
                    if norm > *eps {
                        let yg: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                        for idx in span {
                            ga[idx] = (g[idx] - y[idx] * yg) / norm;
                        }
                    } else {
                        for idx in span {
                            ga[idx] = g[idx] / eps;
                        }
                    }
                }
                acc(grads, *a, &ga);
            }
            RowSoftmax(a, _) => {
                let y = node.value.as_slice();
                let mut ga = vec![0.0; g.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let yg: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                    for idx in span {
                        ga[idx] = y[idx] * (g[idx] - yg);
                    }
                }
                acc(grads, *a, &ga);
            }
            Standardize(a, eps) => {
                let z = val(a);
                let y = node.value.as_slice();
                let mut ga = vec![0.0; g.len()];
                let n = cols as f64;
                for r in 0..rows {
                    let (_, var) = row_moments(z.row(r));
                    let inv = 1.0 / math::sqrt(var + eps);
                    let span = r * cols..(r + 1) * cols;
                    let gmean = g[span.clone()].iter().sum::<f64>() / n;
                    let gy = y[span.clone()]
                        .iter()
                        .zip(&g[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n;
                    for idx in span {
                        ga[idx] = inv * (g[idx] - gmean - y[idx] * gy);
                    }
                }
                acc(grads, *a, &ga);
            }
            ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = val(p).cols();
                    let mut gp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                    }
                    acc(grads, *p, &gp);
                    offset += pc;
                }
            }
            ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(p).as_slice().len();
                    acc(grads, *p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            SelectRows(a, idx) => {
                let mut ga = vec![0.0; val(a).as_slice().len()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[src * cols + c] += g[r * cols + c];
                    }
                }
                acc(grads, *a, &ga);
            }
            MaskLower(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| if idx % cols <= idx / cols { *v } else { 0.0 })
                    .collect();
                acc(grads, *a, &ga);
            }
            CumsumRows(a) => {
                let mut ga = vec![0.0; g.len()];
                let mut running = vec![0.0; cols];
                for r in (0..rows).rev() {
                    for c in 0..cols {
                        running[c] += g[r * cols + c];
                        ga[r * cols + c] = running[c];
                    }
                }
                acc(grads, *a, &ga);
            }
            CrossEntropy(a, labels) => {
                let z = val(a);
                let (b, c) = z.shape();
                let mut ga = vec![0.0; b * c];
                for r in 0..b {
                    let row = z.row(r);
                    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let zsum: f64 = row.iter().map(|&v| math::exp(v - mx)).sum();
                    for k in 0..c {
                        let p = math::exp(row[k] - mx) / zsum;
                        let t = if k == labels[r] { 1.0 } else { 0.0 };
                        ga[r * c + k] = g[0] * (p - t) / b as f64;
                    }
                }
                acc(grads, *a, &ga);
            }
            Mse(p, t) => {
                let pv = val(p).as_slice();
                let tv = val(t).as_slice();
                let n = pv.len() as f64;
                let gp: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| g[0] * 2.0 * (a - b) / n).collect();
                let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
                acc(grads, *p, &gp);
                acc(grads, *t, &gt);
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Matrix> {
    let get = |v: &Var| -> Result<&Matrix> {
        nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::TapeIntegrity(format!("operand {} is not on the tape", v.0)))
    };
    use Op::*;
    match op {
        Param(_) | Const => Err(Error::TapeIntegrity("leaves are not evaluated".into())),
        MatMul(a, b) => get(a)?.matmul(get(b)?),
        MatMulNt(a, b) => get(a)?.matmul_nt(get(b)?),
        MatMulTn(a, b) => get(a)?.matmul_tn(get(b)?),
        Add(a, b) => get(a)?.add(get(b)?),
        Sub(a, b) => get(a)?.sub(get(b)?),
        Mul(a, b) => get(a)?.hadamard(get(b)?),
        Scale(a, c) => get(a)?.scale(*c),
        AddRow(a, r) | MulRow(a, r) => {
            let (a, r) = (get(a)?, get(r)?);
            if r.shape() != (1, a.cols()) {
                return Err(Error::shape(
                    "row broadcast",
                    format!("{:?} with row {:?}", a.shape(), r.shape()),
                ));
            }
            let add = matches!(op, AddRow(..));
            let rv = r.as_slice();
            let data = a
                .as_slice()
                .iter()
                .enumerate()
                .map(|(idx, &v)| {
                    if add {
                        v + rv[idx % a.cols()]
                    } else {
                        v * rv[idx % a.cols()]
                    }
                })
                .collect();
            mat(a.rows(), a.cols(), data, "row broadcast")
        }
        AddCol(a, c) | MulCol(a, c) => {
            let (a, c) = (get(a)?, get(c)?);
            if c.shape() != (a.rows(), 1) {
                return Err(Error::shape(
                    "column broadcast",
                    format!("{:?} with column {:?}", a.shape(), c.shape()),
                ));
            }
            let add = matches!(op, AddCol(..));
            let cv = c.as_slice();
            let data = a
                .as_slice()
                .iter()
                .enumerate()
                .map(|(idx, &v)| {
                    if add {
                        v + cv[idx / a.cols()]
                    } else {
                        v * cv[idx / a.cols()]
                    }
                })
                .collect();
            mat(a.rows(), a.cols(), data, "column broadcast")
        }
        Relu(a) => get(a)?.map(|v| if v > 0.0 { v } else { 0.0 }),
        Exp(a) => get(a)?.map(math::exp),
        Powf(a, p) => {
            let a = get(a)?;
            if a.as_slice().iter().any(|&v| v <= 0.0) {
                return Err(Error::NonFinite("powf of a nonpositive entry".into()));
            }
            a.map(|v| math::powf(v, *p))
        }
        RowSqNorm(a) => {
            let a = get(a)?;
            let data = (0..a.rows()).map(|i| a.row(i).iter().map(|v| v * v).sum()).collect();
            mat(a.rows(), 1, data, "row_sq_norm")
        }
        RowSum(a) => {
            let a = get(a)?;
            let data = (0..a.rows()).map(|i| a.row(i).iter().sum()).collect();
            mat(a.rows(), 1, data, "row_sum")
        }
        ColSum(a) => {
            let a = get(a)?;
            mat(1, a.cols(), a.col_sums(), "col_sum")
        }
        MeanRows(a) => {
            let a = get(a)?;
            let n = a.rows() as f64;
            mat(
                1,
                a.cols(),
                a.col_sums().into_iter().map(|v| v / n).collect(),
                "mean_rows",
            )
        }
        Sum(a) => mat(1, 1, vec![get(a)?.sum()], "sum"),
        RowNormalize(a, eps) => {
            let a = get(a)?;
            let mut data = Vec::with_capacity(a.as_slice().len());
            for i in 0..a.rows() {
                let norm = crate::linalg::norm2(a.row(i)).max(*eps);
                data.extend(a.row(i).iter().map(|v| v / norm));
            }
            mat(a.rows(), a.cols(), data, "row_normalize")
        }
        RowSoftmax(a, causal) => {
            let a = get(a)?;
            let (n, c) = a.shape();
            let mut data = vec![0.0; n * c];
            for i in 0..n {
                let limit = if *causal { (i + 1).min(c) } else { c };
                let row = &a.row(i)[..limit];
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let z: f64 = row.iter().map(|&v| math::exp(v - mx)).sum();
                for (j, &v) in row.iter().enumerate() {
                    data[i * c + j] = math::exp(v - mx) / z;
                }
            }
            mat(n, c, data, "row_softmax")
        }
        Standardize(a, eps) => {
            let a = get(a)?;
            let mut data = Vec::with_capacity(a.as_slice().len());
            for i in 0..a.rows() {
                let (mean, var) = row_moments(a.row(i));
                let inv = 1.0 / math::sqrt(var + eps);
                data.extend(a.row(i).iter().map(|v| (v - mean) * inv));
            }
            mat(a.rows(), a.cols(), data, "standardize")
        }
        ConcatCols(parts) => {
            let ms = parts.iter().map(get).collect::<Result<Vec<_>>>()?;
            Matrix::hstack(&ms)
        }
        ConcatRows(parts) => {
            let ms = parts.iter().map(get).collect::<Result<Vec<_>>>()?;
            let cols = ms.first().map_or(0, |m| m.cols());
            if ms.iter().any(|m| m.cols() != cols) {
                return Err(Error::shape("concat_rows", "parts disagree on the column count"));
            }
            let rows = ms.iter().map(|m| m.rows()).sum();
            let data = ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
            mat(rows, cols, data, "concat_rows")
        }
        SelectRows(a, idx) => get(a)?.select_rows(idx),
        MaskLower(a) => {
            let a = get(a)?;
            let c = a.cols();
            let data = a
                .as_slice()
                .iter()
                .enumerate()
                .map(|(idx, &v)| if idx % c <= idx / c { v } else { 0.0 })
                .collect();
            mat(a.rows(), c, data, "mask_lower")
        }
        CumsumRows(a) => {
            let a = get(a)?;
            let c = a.cols();
            let mut data = a.as_slice().to_vec();
            for idx in c..data.len() {
                data[idx] += data[idx - c];
            }
            mat(a.rows(), c, data, "cumsum_rows")
        }
        CrossEntropy(a, labels) => {
            let z = get(a)?;
            if labels.len() != z.rows() || labels.iter().any(|&l| l >= z.cols()) {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{} labels for logits {:?}", labels.len(), z.shape()),
                ));
            }
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = z.row(r);
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = mx + math::ln(row.iter().map(|&v| math::exp(v - mx)).sum::<f64>());
                total += lse - row[label];
            }
            mat(1, 1, vec![total / z.rows() as f64], "cross_entropy")
        }
        Mse(p, t) => {
            let (p, t) = (get(p)?, get(t)?);
            same_shape("mse", p, t)?;
            let n = p.as_slice().len() as f64;
            let s: f64 = p
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            mat(1, 1, vec![s / n], "mse")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn half_squared_norm() {
        let mut g = rng::seeded(1);
        let w = rng::normal_matrix(&mut g, 3, 4);
        let mut t = Tape::new();
        let v = t.param("w", w.clone());
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        let gr = t.backward(l).unwrap();
        assert_eq!(gr.get("w").unwrap(), &w);
    }

    #[test]
    fn bilinear_trace() {
        let mut g = rng::seeded(2);
        let we = rng::normal_matrix(&mut g, 5, 2);
        let wr = rng::normal_matrix(&mut g, 5, 2);
        let mut t = Tape::new();
        let a = t.param("w_e", we.clone());
        let b = t.param("w_r", wr.clone());
        let m = t.matmul_tn(a, b).unwrap();
        let eye = t.constant(Matrix::identity(2));
        let d = t.mul(m, eye).unwrap();
        let tr = t.sum(d).unwrap();
        let gr = t.backward(tr).unwrap();
        assert_eq!(gr.get("w_e").unwrap(), &wr);
        assert_eq!(gr.get("w_r").unwrap(), &we);
        assert!(!gr.by_name.contains_key("eye"));
    }

    #[test]
    fn integrity_errors() {
        let mut t = Tape::new();
        let a = t.param("a", Matrix::filled(2, 2, 1.0));
        assert!(matches!(t.backward(a), Err(Error::TapeIntegrity(_))));
        let mut other = Tape::new();
        for _ in 0..5 {
            other.constant(Matrix::filled(1, 1, 0.0));
        }
        let foreign = Var(4);
        assert!(matches!(t.backward(foreign), Err(Error::TapeIntegrity(_))));
        assert!(matches!(t.replay(foreign), Err(Error::TapeIntegrity(_))));
    }

    #[test]
    fn repeated_parameter_names_accumulate() {
        let mut t = Tape::new();
        let a = t.param("w", Matrix::filled(1, 1, 3.0));
        let b = t.param("w", Matrix::filled(1, 1, 3.0));
        let p = t.mul(a, b).unwrap();
        let gr = t.backward(p).unwrap();
        assert_eq!(gr.get("w").unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn nonfinite_values_are_named() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::filled(1, 2, 800.0));
        match t.exp(a) {
            Err(Error::NonFinite(what)) => assert!(what.contains("map") || what.contains("exp"), "{what}"),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_and_cross_entropy_values() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::from_rows(&[&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]]).unwrap());
        let s = t.row_softmax(z, true).unwrap();
        let v = t.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert!((v.row(1)[0] - 1.0 / (1.0 + math::exp(1.0))).abs() < 1e-15);
        let zero = t.constant(Matrix::zeros(4, 3));
        let ce = t.cross_entropy(zero, &[0, 1, 2, 0]).unwrap();
        assert!((t.scalar(ce) - math::ln(3.0)).abs() < 1e-15);
    }

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let mut t = Tape::new();
        let v = t.param("x", x.clone());
        let out = build(&mut t, v);
        let g = t.backward(out).unwrap();
        let g = g.get("x").unwrap();
        let h = 1e-5;
        for idx in 0..x.as_slice().len() {
            let eval_at = |delta: f64| {
                let mut xp = x.clone();
                xp.as_mut_slice()[idx] += delta;
                let mut t = Tape::new();
                let v = t.param("x", xp);
                let out = build(&mut t, v);
                t.scalar(out)
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let an = g.as_slice()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                "coordinate {idx}: {an} vs {fd}"
            );
        }
    }

    // Contract with a fixed random weighting so every output entry matters.
    fn weigh(t: &mut Tape, v: Var, seed: u64) -> Var {
        let (r, c) = t.value(v).shape();
        let w = rng::normal_matrix(&mut rng::seeded(seed), r, c);
        let w = t.constant(w);
        let p = t.mul(v, w).unwrap();
        t.sum(p).unwrap()
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut g = rng::seeded(3);
        let x = rng::normal_matrix(&mut g, 4, 3);
        let other = rng::normal_matrix(&mut g, 3, 5);
        let wide = rng::normal_matrix(&mut g, 6, 3);
        let row = rng::normal_matrix(&mut g, 1, 3);
        let col = rng::normal_matrix(&mut g, 4, 1);

        type Build = fn(&mut Tape, Var, &[Matrix]) -> Var;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |t, v, m| {
                let b = t.constant(m[0].clone());
                t.matmul(v, b).unwrap()
            }),
            ("matmul_nt", |t, v, m| {
                let b = t.constant(m[1].clone());
                t.matmul_nt(v, b).unwrap()
            }),
            ("matmul_tn", |t, v, _| t.matmul_tn(v, v).unwrap()),
            ("mul_self", |t, v, _| t.mul(v, v).unwrap()),
            ("sub", |t, v, _| {
                let s = t.scale(v, 3.0).unwrap();
                t.sub(v, s).unwrap()
            }),
            ("add_row", |t, v, m| {
                let r = t.constant(m[2].clone());
                t.add_row(v, r).unwrap()
            }),
            ("mul_row", |t, v, m| {
                let r = t.constant(m[2].clone());
                t.mul_row(v, r).unwrap()
            }),
            ("mul_col", |t, v, m| {
                let c = t.constant(m[3].clone());
                t.mul_col(v, c).unwrap()
            }),
            ("add_col", |t, v, _| {
                let c = t.row_sq_norm(v).unwrap();
                t.add_col(v, c).unwrap()
            }),
            ("exp", |t, v, _| t.exp(v).unwrap()),
            ("powf", |t, v, _| {
                let e = t.exp(v).unwrap();
                t.powf(e, -0.5).unwrap()
            }),
            ("row_sum", |t, v, _| t.row_sum(v).unwrap()),
            ("col_sum", |t, v, _| t.col_sum(v).unwrap()),
            ("mean_rows", |t, v, _| t.mean_rows(v).unwrap()),
            ("row_normalize", |t, v, _| t.row_normalize(v, 1e-12).unwrap()),
            ("row_softmax", |t, v, _| t.row_softmax(v, false).unwrap()),
            ("row_softmax_causal", |t, v, _| {
                let s = t.matmul_nt(v, v).unwrap();
                t.row_softmax(s, true).unwrap()
            }),
            ("standardize", |t, v, _| t.standardize(v, 1e-6).unwrap()),
            ("concat_cols", |t, v, _| {
                let e = t.exp(v).unwrap();
                t.concat_cols(&[v, e, v]).unwrap()
            }),
            ("concat_rows", |t, v, _| {
                let e = t.exp(v).unwrap();
                t.concat_rows(&[e, v]).unwrap()
            }),
            ("select_rows", |t, v, _| t.select_rows(v, &[3, 0, 3, 1]).unwrap()),
            ("mask_lower", |t, v, _| {
                let s = t.matmul_nt(v, v).unwrap();
                t.mask_lower(s).unwrap()
            }),
            ("cumsum_rows", |t, v, _| {
                let e = t.mul(v, v).unwrap();
                t.cumsum_rows(e).unwrap()
            }),
            ("cross_entropy", |t, v, _| t.cross_entropy(v, &[2, 0, 1, 1]).unwrap()),
            ("mse", |t, v, m| {
                let c = t.constant(m[4].clone());
                t.mse(v, c).unwrap()
            }),
        ];
        let extras = [other, wide, row, col, rng::normal_matrix(&mut g, 4, 3)];
        for (name, f) in cases {
            let build = |t: &mut Tape, v: Var| {
                let out = f(t, v, &extras);
                if t.value(out).shape() == (1, 1) {
                    out
                } else {
                    weigh(t, out, 99)
                }
            };
            std::println!("checking {name}");
            fd_check(build, x.clone());
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = rng::seeded(4);
        let mut t = Tape::new();
        let x = t.param("x", rng::normal_matrix(&mut g, 5, 4));
        let w = t.param("w", rng::normal_matrix(&mut g, 3, 4));
        let q = t.matmul_nt(x, w).unwrap();
        let n = t.row_normalize(q, 1e-12).unwrap();
        let s = t.matmul_nt(n, n).unwrap();
        let a = t.row_softmax(s, true).unwrap();
        let o = t.matmul(a, q).unwrap();
        let r = t.relu(o).unwrap();
        let l = t.cross_entropy(r, &[0, 1, 2, 0, 1]).unwrap();
        let again = t.replay(l).unwrap();
        assert_eq!(again.as_slice()[0].to_bits(), t.scalar(l).to_bits());
        assert!(!t.branch_pattern().is_empty());
    }
}

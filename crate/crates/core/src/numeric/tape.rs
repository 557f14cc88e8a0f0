//! Tape-based reverse mode over a fixed set of batched matrix ops.
//!
//! Every op appends one node holding its output value. [`Tape::backward`]
//! walks the nodes once, from the loss back to the first node, and returns the
//! gradients of every parameter that was reached. Embedding gathers produce
//! row-sparse gradients.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::matrix::{gemm_nt, gemm_tn};
use super::{sigmoid, Matrix, ParamId, ParamStore};
use crate::{Error, Result};

/// Probability clamp applied before every log in the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy of one prediction, on the clamped probability.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
}

fn bce_grad(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    (p - y) / (p * (1.0 - p))
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => libm::tanh(x),
            Activation::Relu => x.max(0.0),
        }
    }

    // Derivative expressed through the output value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Act(Activation, Var),
    Softmax(Var),
    Gather { tables: Vec<ParamId>, indices: Vec<usize> },
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    BlockScale(Var, Var),
    FieldSum(Var),
    SumCols(Var),
    BceMean(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Gradient of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBuf {
    Dense(Matrix),
    /// Row index → gradient row, for gathered embedding tables.
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: Vec<(ParamId, GradBuf)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &GradBuf)> {
        self.entries.iter().map(|(id, g)| (*id, g))
    }

    pub fn push_dense(&mut self, id: ParamId, grad: Matrix) {
        self.entries.push((id, GradBuf::Dense(grad)));
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.iter().any(|(i, _)| *i == id)
    }
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.value(id),
            _ => &self.nodes[v.0].value,
        }
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), Matrix::default())
    }

    fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
        Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Adds a `1×c` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Self::shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Self::shape_err("mul", av, bv));
        }
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| x * y).collect();
        let out = Matrix::new(av.rows(), av.cols(), data)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale), out)
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        self.push(Op::Act(act, x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::Softmax(x), out)
    }

    /// Row `b` of the output is the concatenation, over tables `n`, of row
    /// `indices[b * tables.len() + n]` of table `n`. All tables share a width.
    pub fn gather(&mut self, tables: &[ParamId], indices: &[usize]) -> Result<Var> {
        let fields = tables.len();
        if fields == 0 || !indices.len().is_multiple_of(fields) {
            return Err(Error::InvalidInput(alloc::format!(
                "gather: {} indices for {} tables",
                indices.len(),
                fields
            )));
        }
        let width = self.store.value(tables[0]).cols();
        let batch = indices.len() / fields;
        let mut out = Matrix::zeros(batch, fields * width);
        for (n, &t) in tables.iter().enumerate() {
            let table = self.store.value(t);
            if table.cols() != width {
                return Err(Self::shape_err("gather", self.store.value(tables[0]), table));
            }
            for b in 0..batch {
                let idx = indices[b * fields + n];
                if idx >= table.rows() {
                    return Err(Error::Schema(alloc::format!(
                        "field {n}: index {idx} out of range for vocabulary of size {}",
                        table.rows()
                    )));
                }
                out.row_mut(b)[n * width..(n + 1) * width].copy_from_slice(table.row(idx));
            }
        }
        Ok(self.push(
            Op::Gather {
                tables: tables.to_vec(),
                indices: indices.to_vec(),
            },
            out,
        ))
    }

    /// Column-wise concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Self::shape_err("concat_cols", self.value(parts[0]), pv));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: xv.shape(),
                right: (start, len),
            });
        }
        let mut out = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(x, start), out))
    }

    /// For `scales` of shape `B×G` and `x` of shape `B×(G·w)`, multiplies the
    /// `g`-th block of `w` columns of row `b` by `scales[b, g]`.
    pub fn block_scale(&mut self, scales: Var, x: Var) -> Result<Var> {
        let (sv, xv) = (self.value(scales), self.value(x));
        if sv.rows() != xv.rows() || sv.cols() == 0 || xv.cols() % sv.cols() != 0 {
            return Err(Self::shape_err("block_scale", sv, xv));
        }
        let width = xv.cols() / sv.cols();
        let mut out = xv.clone();
        for b in 0..out.rows() {
            let srow = sv.row(b);
            for (chunk, &s) in out.row_mut(b).chunks_mut(width).zip(srow) {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(self.push(Op::BlockScale(scales, x), out))
    }

    /// Sums the `fields` column blocks of `x`: `B×(fields·w)` → `B×w`.
    pub fn field_sum(&mut self, x: Var, fields: usize) -> Result<Var> {
        let xv = self.value(x);
        if fields == 0 || !xv.cols().is_multiple_of(fields) {
            return Err(Error::Shape {
                op: "field_sum",
                left: xv.shape(),
                right: (fields, 1),
            });
        }
        let width = xv.cols() / fields;
        let mut out = Matrix::zeros(xv.rows(), width);
        for b in 0..xv.rows() {
            let orow = out.row_mut(b);
            for chunk in xv.row(b).chunks(width) {
                for (o, v) in orow.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        }
        Ok(self.push(Op::FieldSum(x), out))
    }

    /// Row sums: `B×c` → `B×1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let out = Matrix::new(xv.rows(), 1, data).expect("row sums");
        self.push(Op::SumCols(x), out)
    }

    /// Sum of every entry as a `1×1` node.
    pub fn total(&mut self, x: Var) -> Result<Var> {
        let col = self.sum_cols(x);
        let rows = self.value(col).rows();
        let ones = self.constant(Matrix::filled(1, rows, 1.0));
        self.matmul(ones, col)
    }

    /// Mean clamped BCE of a `B×1` probability column against `labels`.
    pub fn bce_mean(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(probs);
        if pv.cols() != 1 || pv.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "bce_mean",
                left: pv.shape(),
                right: (labels.len(), 1),
            });
        }
        let total: f64 = pv.as_slice().iter().zip(labels).map(|(&p, &y)| bce_loss(p, y)).sum();
        let out = Matrix::row_vector(&[total / labels.len() as f64]);
        Ok(self.push(Op::BceMean(probs, labels.to_vec()), out))
    }

    /// Reverse pass from a `1×1` node. Each recorded op is visited once, in
    /// reverse order of recording.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: lv.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::row_vector(&[1.0]));
        let mut dense: BTreeMap<ParamId, Matrix> = BTreeMap::new();
        let mut sparse: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match dense.get_mut(id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        dense.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm_nt(&g, bv, &mut da);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm_tn(av, &g, &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, bv, |d, y| d * y);
                    let db = zip_map(&g, av, |d, x| d * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Affine(x, scale) => {
                    let s = *scale;
                    accumulate(&mut grads, *x, g.map(|d| s * d));
                }
                Op::Act(act, x) => {
                    let dx = zip_map(&g, &node.value, |d, y| d * act.derivative_from_output(y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { tables, indices } => {
                    let fields = tables.len();
                    let width = g.cols() / fields;
                    for (n, t) in tables.iter().enumerate() {
                        let rows = sparse.entry(*t).or_default();
                        for b in 0..g.rows() {
                            let src = &g.row(b)[n * width..(n + 1) * width];
                            let dst = rows.entry(indices[b * fields + n]).or_insert_with(|| vec![0.0; width]);
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut dp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BlockScale(scales, x) => {
                    let (sv, xv) = (self.value(*scales), self.value(*x));
                    let width = xv.cols() / sv.cols();
                    let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for b in 0..xv.rows() {
                        let (grow, xrow, srow) = (g.row(b), xv.row(b), sv.row(b));
                        let dsrow = ds.row_mut(b);
                        for (gi, dsv) in dsrow.iter_mut().enumerate() {
                            let span = gi * width..(gi + 1) * width;
                            *dsv = grow[span.clone()].iter().zip(&xrow[span]).map(|(d, x)| d * x).sum();
                        }
                        let dxrow = dx.row_mut(b);
                        for (j, (d, gv)) in dxrow.iter_mut().zip(grow).enumerate() {
                            *d = gv * srow[j / width];
                        }
                    }
                    accumulate(&mut grads, *scales, ds);
                    accumulate(&mut grads, *x, dx);
                }
                Op::FieldSum(x) => {
                    let xv = self.value(*x);
                    let width = g.cols();
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for b in 0..xv.rows() {
                        let grow = g.row(b);
                        for chunk in dx.row_mut(b).chunks_mut(width) {
                            chunk.copy_from_slice(grow);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumCols(x) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for b in 0..xv.rows() {
                        let d = g.get(b, 0);
                        dx.row_mut(b).iter_mut().for_each(|v| *v = d);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BceMean(p, labels) => {
                    let pv = self.value(*p);
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let data = pv
                        .as_slice()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| scale * bce_grad(p, y))
                        .collect();
                    accumulate(&mut grads, *p, Matrix::new(pv.rows(), 1, data)?);
                }
            }
        }

        let mut out = Gradients::default();
        for (id, m) in dense {
            out.entries.push((id, GradBuf::Dense(m)));
        }
        for (id, rows) in sparse {
            out.entries.push((id, GradBuf::Rows(rows)));
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

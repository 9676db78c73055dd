//! Reverse-mode differentiation over a per-pass operation record.
//!
//! A [`Tape`] owns every value produced during one forward pass. [`Var`] is a
//! cheap handle into it. Calling [`Tape::backward`] on a scalar walks the
//! record once in reverse and returns the gradient of every leaf created with
//! [`Tape::var`]. Leaves created with [`Tape::constant`] (and everything that
//! only depends on constants) are skipped entirely.
//!
//! Broadcasting is limited to adding a row vector across the batch axis
//! ([`Var::add`]) and repeating a per-row value across columns
//! ([`Var::broadcast_cols`]).

use std::cell::RefCell;
use std::collections::HashMap;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{numeric_err, shape_err, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Ln(usize),
    Exp(usize),
    Square(usize),
    Abs(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    NormRows(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Clamp(usize, f64, f64),
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    // Stores the flat index of the selected entry for each row.
    MaxExcluding(usize, Vec<usize>),
    BroadcastCols(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
    shapes: HashMap<usize, Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.by_id.get(&v.id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes.get(&v.id).cloned().unwrap_or_else(|| v.shape())),
        }
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a differentiable leaf.
    pub fn var(&self, value: Tensor) -> Result<Var<'_>> {
        value.ensure_finite("leaf tensor")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        value.ensure_finite("constant tensor")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(shape_err!("loss was recorded on a different tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }

        let mut out = Gradients::default();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out.shapes.insert(id, node.value.shape().to_vec());
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| nodes[i].value.data();
            let shape = |i: usize| nodes[i].value.shape();
            let needs = |i: usize| nodes[i].requires_grad;
            let y = node.value.data();

            match &node.op {
                Op::Leaf => {
                    out.by_id
                        .insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (shape(*a)[0], shape(*a)[1]);
                    let m = shape(*b)[1];
                    if needs(*a) {
                        let bt = transpose_raw(val(*b), k, m);
                        accumulate(&mut grads, *a, matmul_raw(&g, &bt, n, m, k));
                    }
                    if needs(*b) {
                        let at = transpose_raw(val(*a), n, k);
                        accumulate(&mut grads, *b, matmul_raw(&at, &g, k, n, m));
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if needs(*b) {
                        let c = nodes[*b].value.numel();
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, zip_map(&g, val(*b), |g, b| g * b));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, zip_map(&g, val(*a), |g, a| g * a));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if needs(*a) {
                        accumulate(&mut grads, *a, zip_map(&g, bv, |g, b| g / b));
                    }
                    if needs(*b) {
                        // d(a/b)/db = -(a/b)/b = -y/b
                        let gb = g
                            .iter()
                            .zip(y)
                            .zip(bv)
                            .map(|((g, y), b)| -g * y / b)
                            .collect();
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = zip_map(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => accumulate(&mut grads, *a, zip_map(&g, val(*a), |g, x| g / x)),
                Op::Exp(a) => accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * y)),
                Op::Square(a) => {
                    accumulate(&mut grads, *a, zip_map(&g, val(*a), |g, x| 2.0 * g * x))
                }
                Op::Abs(a) => {
                    let ga = zip_map(&g, val(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = zip_map(&g, y, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::SumRows(a) => {
                    let (_, c) = nodes[*a].value.rows_cols();
                    let ga = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormRows(a) => {
                    let (_, c) = nodes[*a].value.rows_cols();
                    let mut ga = Vec::with_capacity(nodes[*a].value.numel());
                    for (i, row) in val(*a).chunks(c).enumerate() {
                        let norm = y[i];
                        for &x in row {
                            ga.push(if norm > 0.0 { g[i] * x / norm } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let (_, c) = node.value.rows_cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        ga.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let (_, c) = node.value.rows_cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        ga.extend(gr.iter().zip(yr).map(|(g, ly)| g - ly.exp() * total));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip_map(&g, val(*a), |g, x| {
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, ids) => {
                    let (_, c) = nodes[*a].value.rows_cols();
                    let mut ga = vec![0.0; nodes[*a].value.numel()];
                    for (r, &src) in ids.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[r * c + j];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, cols) => {
                    let (_, c) = nodes[*a].value.rows_cols();
                    let mut ga = vec![0.0; nodes[*a].value.numel()];
                    for (i, &col) in cols.iter().enumerate() {
                        ga[i * c + col] += g[i];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaxExcluding(a, flat) => {
                    let mut ga = vec![0.0; nodes[*a].value.numel()];
                    for (i, &pos) in flat.iter().enumerate() {
                        ga[pos] += g[i];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BroadcastCols(a) => {
                    let (_, c) = node.value.rows_cols();
                    let ga = g.chunks(c).map(|r| r.iter().sum()).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// The value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(shape_err!("operands recorded on different tapes"))
        }
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        Ok(self.tape.push(value, op, self.requires_grad()))
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    fn elementwise(
        &self,
        other: Var<'t>,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.binary(other, op, |a, b| {
            if a.shape() != b.shape() {
                return Err(shape_err!("{} of {:?} and {:?}", name, a.shape(), b.shape()));
            }
            Tensor::new(a.shape().to_vec(), zip_map(a.data(), b.data(), f))
        })
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    /// Elementwise sum. A vector of length `c` added to an `[n, c]` matrix is
    /// broadcast over the batch axis.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return self.elementwise(other, Op::Add(self.id, other.id), "add", |a, b| a + b);
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            return self.binary(other, Op::AddRow(self.id, other.id), |a, b| {
                let c = b.numel();
                let data = a
                    .data()
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
                    .collect();
                Tensor::new(a.shape().to_vec(), data)
            });
        }
        Err(shape_err!("add of {:?} and {:?}", sa, sb))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// Elementwise quotient; a zero divisor is a numeric error.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.elementwise(other, Op::Div(self.id, other.id), "div", |a, b| a / b)?;
        out.check_finite("div")
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map_infallible(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        self.map_infallible(Op::Offset(self.id), |v| v + c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        self.map_infallible(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn square(&self) -> Var<'t> {
        self.map_infallible(Op::Square(self.id), |v| v * v)
    }

    pub fn abs(&self) -> Var<'t> {
        self.map_infallible(Op::Abs(self.id), f64::abs)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.map_infallible(Op::Exp(self.id), f64::exp)
            .check_finite("exp")
    }

    /// Natural log; non-positive entries are a numeric error.
    pub fn ln(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v <= 0.0) {
            return Err(numeric_err!("ln of non-positive value {}", bad));
        }
        Ok(self.map_infallible(Op::Ln(self.id), f64::ln))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v < 0.0) {
            return Err(numeric_err!("sqrt of negative value {}", bad));
        }
        Ok(self.map_infallible(Op::Sqrt(self.id), f64::sqrt))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient flows only where the input
    /// already lies inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.map_infallible(Op::Clamp(self.id, lo, hi), move |v| v.clamp(lo, hi))
    }

    fn map_infallible(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |t| Ok(t.map(f)))
            .expect("elementwise map cannot change shape")
    }

    fn check_finite(self, what: &str) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.ensure_finite(what)?;
        Ok(self)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        self.map_reduce(Op::Sum(self.id), |d| d.iter().sum())
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&self) -> Var<'t> {
        self.map_reduce(Op::Mean(self.id), |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    fn map_reduce(&self, op: Op, f: impl Fn(&[f64]) -> f64) -> Var<'t> {
        self.unary(op, |t| Ok(Tensor::scalar(f(t.data()))))
            .expect("reduction to scalar cannot fail")
    }

    /// `[n, c] -> [n]`, summing each row.
    pub fn sum_rows(&self) -> Var<'t> {
        self.per_row(Op::SumRows(self.id), |r| r.iter().sum())
    }

    /// `[n, c] -> [n]`, the Euclidean norm of each row. The gradient at a zero
    /// row is taken as zero.
    pub fn norm_rows(&self) -> Var<'t> {
        self.per_row(Op::NormRows(self.id), |r| {
            r.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
    }

    /// Euclidean norm over all entries, as a scalar.
    pub fn l2_norm(&self) -> Var<'t> {
        let flat = self
            .reshape(vec![1, self.value().numel()])
            .expect("flattening preserves element count");
        flat.norm_rows()
            .reshape(vec![])
            .expect("one row yields one value")
    }

    fn per_row(&self, op: Op, f: impl Fn(&[f64]) -> f64) -> Var<'t> {
        self.unary(op, |t| {
            let (n, c) = t.rows_cols();
            let data: Vec<f64> = t.data().chunks(c).map(&f).collect();
            Tensor::new(vec![n], data)
        })
        .expect("row reduction keeps the row count")
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), |t| Ok(super::softmax_rows(t)))
            .expect("softmax preserves shape")
    }

    /// Log-softmax over the last axis, computed with the log-sum-exp shift.
    pub fn log_softmax(&self) -> Var<'t> {
        self.unary(Op::LogSoftmax(self.id), |t| {
            let (_, c) = t.rows_cols();
            let mut data = Vec::with_capacity(t.numel());
            for row in t.data().chunks(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                data.extend(row.iter().map(|v| v - lse));
            }
            Tensor::new(t.shape().to_vec(), data)
        })
        .expect("log-softmax preserves shape")
    }

    /// Selects rows (with repetition allowed) into a new `[ids.len(), c]` matrix.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(shape_err!("gather_rows needs a matrix, got {:?}", self.shape()));
        }
        let ids = ids.to_vec();
        let op = Op::GatherRows(self.id, ids.clone());
        self.unary(op, |t| t.select_rows(&ids))
    }

    /// `[n, c] -> [n]`, taking column `cols[i]` from row `i`.
    pub fn pick(&self, cols: &[usize]) -> Result<Var<'t>> {
        let cols = cols.to_vec();
        let op = Op::Pick(self.id, cols.clone());
        self.unary(op, |t| {
            let (n, c) = t.rows_cols();
            if t.ndim() != 2 || cols.len() != n {
                return Err(shape_err!("pick of {} columns from {:?}", cols.len(), t.shape()));
            }
            let data = cols
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    if j < c {
                        Ok(t.data()[i * c + j])
                    } else {
                        Err(shape_err!("column {} out of range for {} columns", j, c))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::vector(data)
        })
    }

    /// `[n, c] -> [n]`, the largest entry of row `i` outside column
    /// `excluded[i]`. Ties resolve to the lowest column.
    pub fn max_excluding(&self, excluded: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let (n, c) = t.rows_cols();
        if t.ndim() != 2 || excluded.len() != n || c < 2 {
            return Err(shape_err!(
                "max_excluding of {} labels over {:?}",
                excluded.len(),
                t.shape()
            ));
        }
        let mut flat = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for (i, row) in t.data().chunks(c).enumerate() {
            if excluded[i] >= c {
                return Err(shape_err!("column {} out of range for {} columns", excluded[i], c));
            }
            let (best, v) = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != excluded[i])
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, (j, &v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                });
            flat.push(i * c + best);
            data.push(v);
        }
        let value = Tensor::vector(data)?;
        Ok(self
            .tape
            .push(value, Op::MaxExcluding(self.id, flat), self.requires_grad()))
    }

    /// `[n] -> [n, cols]`, repeating each entry across a row.
    pub fn broadcast_cols(&self, cols: usize) -> Result<Var<'t>> {
        self.unary(Op::BroadcastCols(self.id), |t| {
            if t.ndim() != 1 {
                return Err(shape_err!("broadcast_cols needs a vector, got {:?}", t.shape()));
            }
            let data = t
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, cols))
                .collect();
            Tensor::matrix(t.numel(), cols, data)
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |t| t.clone().reshape(shape))
    }

    /// Divides each row by its Euclidean norm (floored at `floor`).
    pub fn normalize_rows(&self, floor: f64) -> Result<Var<'t>> {
        let cols = self.value().cols();
        let norms = self.norm_rows().clamp(floor, f64::MAX);
        self.div(norms.broadcast_cols(cols)?)
    }
}

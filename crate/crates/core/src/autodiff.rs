//! Reverse-mode differentiation over an append-only tape of matrix values.
//!
//! Every node stores its forward value. Leaves are either parameters (they
//! receive gradients) or constants (they do not, and nothing downstream of
//! only constants is differentiated). Operations that are easier to write by
//! hand than to compose, such as one Euler step of an SDE or the matching
//! field, plug in through [`CustomOp`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive with a hand-written vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Cotangents for each input given the output cotangent `grad`.
    /// Entries where `needs[i]` is false may be `None`.
    fn vjp(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>>;
}

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    ConcatCols(Var, Var),
    Transpose(Var),
    Inverse(Var),
    Custom(Box<dyn CustomOp + 'a>, Vec<Var>),
}

struct Node<'a> {
    value: Matrix,
    op: Op<'a>,
    requires_grad: bool,
}

/// Append-only computation record.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    elements: usize,
    element_limit: Option<usize>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    // log(e^y − 1), stable for large y
    y + libm::log(-libm::expm1(-y))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            elements: 0,
            element_limit: None,
        }
    }

    /// A tape that reports [`Error::ResourceExhausted`] from
    /// [`Tape::check_budget`] once it stores more than `limit` values.
    pub fn with_element_limit(limit: usize) -> Self {
        Self {
            element_limit: Some(limit),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `f64` values stored across all nodes.
    pub fn elements(&self) -> usize {
        self.elements
    }

    pub fn check_budget(&self) -> Result<()> {
        match self.element_limit {
            Some(limit) if self.elements > limit => Err(Error::ResourceExhausted {
                requested: self.elements,
                limit,
            }),
            _ => Ok(()),
        }
    }

    fn push(&mut self, value: Matrix, op: Op<'a>, requires_grad: bool) -> Var {
        self.elements += value.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x·w + row`, one node for a dense layer.
    pub fn affine(&mut self, x: Var, w: Var, row: Var) -> Var {
        let value = affine_value(self.value(x), self.value(w), self.value(row));
        let rg = self.rg(x) || self.rg(w) || self.rg(row);
        self.push(value, Op::Affine(x, w, row), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row`, broadcasting a `1×c` row over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = add_row_value(self.value(a), self.value(row));
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `col ⊙ a`, broadcasting an `n×1` column over the columns of `a`.
    pub fn mul_col(&mut self, col: Var, a: Var) -> Var {
        let c = self.value(col);
        let x = self.value(a);
        assert_eq!(c.shape(), (x.rows(), 1), "mul_col shape mismatch");
        let mut value = x.clone();
        for i in 0..x.rows() {
            let ci = c.as_slice()[i];
            for v in value.row_mut(i) {
                *v *= ci;
            }
        }
        let rg = self.rg(col) || self.rg(a);
        self.push(value, Op::MulCol(col, a), rg)
    }

    /// `a · s` for a `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).scale(sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(relu);
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Sum of all entries, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).as_slice().iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Per-row sums, as `n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
        let value = Matrix::column(&sums);
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = concat_cols_value(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Matrix inverse. Fails on a singular input.
    pub fn inverse(&mut self, a: Var) -> Option<Var> {
        let value = self.value(a).inverse()?;
        let rg = self.rg(a);
        Some(self.push(value, Op::Inverse(a), rg))
    }

    /// Record a custom primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp + 'a>, inputs: Vec<Var>, value: Matrix) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom(op, inputs), rg)
    }

    /// Gradients of the `1×1` node `root` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `op(a)·op(b)` to the gradient of `v`, in place when it exists.
    fn accumulate_gemm(&self, grads: &mut [Option<Matrix>], v: Var, a: &Matrix, ta: bool, b: &Matrix, tb: bool) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(acc) => gemm(1.0, a, ta, b, tb, 1.0, acc),
            None => {
                let (r, c) = self.nodes[v.0].value.shape();
                let mut out = Matrix::zeros(r, c);
                gemm(1.0, a, ta, b, tb, 0.0, &mut out);
                *slot = Some(out);
            }
        }
    }

    fn propagate(&self, node: &Node<'a>, mut g: Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                self.accumulate_gemm(grads, *a, &g, false, val(*b), true);
                self.accumulate_gemm(grads, *b, val(*a), true, &g, false);
            }
            Op::Affine(x, w, row) => {
                self.accumulate_gemm(grads, *x, &g, false, val(*w), true);
                self.accumulate_gemm(grads, *w, val(*x), true, &g, false);
                if self.rg(*row) {
                    self.accumulate(grads, *row, column_sums(&g));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) && self.rg(*b) {
                    self.accumulate(grads, *b, g.clone());
                    self.accumulate(grads, *a, g);
                } else if self.rg(*a) {
                    self.accumulate(grads, *a, g);
                } else {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                g.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
                self.accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*row) {
                    self.accumulate(grads, *row, column_sums(&g));
                }
                self.accumulate(grads, *a, g);
            }
            Op::MulCol(col, a) => {
                let c = val(*col).as_slice();
                let x = val(*a);
                if self.rg(*col) {
                    let gc: Vec<f64> = (0..x.rows())
                        .map(|i| g.row(i).iter().zip(x.row(i)).map(|(p, q)| p * q).sum())
                        .collect();
                    self.accumulate(grads, *col, Matrix::column(&gc));
                }
                if self.rg(*a) {
                    for (i, ci) in c.iter().enumerate() {
                        for v in g.row_mut(i) {
                            *v *= ci;
                        }
                    }
                    self.accumulate(grads, *a, g);
                }
            }
            Op::MulScalar(a, s) => {
                if self.rg(*s) {
                    let d: f64 = g.as_slice().iter().zip(val(*a).as_slice()).map(|(p, q)| p * q).sum();
                    self.accumulate(grads, *s, Matrix::scalar(d));
                }
                if self.rg(*a) {
                    let c = val(*s).item();
                    g.as_mut_slice().iter_mut().for_each(|v| *v *= c);
                    self.accumulate(grads, *a, g);
                }
            }
            Op::Scale(a, c) => {
                g.as_mut_slice().iter_mut().for_each(|v| *v *= c);
                self.accumulate(grads, *a, g);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Relu(a) => {
                for (gi, x) in g.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    if !(*x > 0.0) {
                        *gi = 0.0;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                for (gi, y) in g.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                    *gi *= 1.0 - y * y;
                }
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => {
                for (gi, y) in g.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                    *gi *= y;
                }
                self.accumulate(grads, *a, g);
            }
            Op::Softplus(a) => {
                for (gi, x) in g.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *gi *= sigmoid(*x);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Square(a) => {
                for (gi, x) in g.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *gi *= 2.0 * x;
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                let gs = g.as_slice();
                self.accumulate(grads, *a, Matrix::from_fn(r, c, |i, _| gs[i]));
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                if self.rg(*a) {
                    self.accumulate(grads, *a, Matrix::from_fn(g.rows(), ca, |i, j| g[(i, j)]));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, Matrix::from_fn(g.rows(), cb, |i, j| g[(i, ca + j)]));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Inverse(a) => {
                // d(A⁻¹) = −A⁻¹ dA A⁻¹  ⇒  Ā = −A⁻ᵀ G A⁻ᵀ
                let y = &node.value;
                let mut tmp = Matrix::zeros(y.cols(), g.cols());
                gemm(1.0, y, true, &g, false, 0.0, &mut tmp);
                let mut ga = Matrix::zeros(tmp.rows(), y.rows());
                gemm(-1.0, &tmp, false, y, true, 0.0, &mut ga);
                self.accumulate(grads, *a, ga);
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Matrix> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let out = op.vjp(&vals, &node.value, &g, &needs);
                debug_assert_eq!(out.len(), inputs.len(), "{} returned wrong arity", op.name());
                for ((v, gi), need) in inputs.iter().zip(out).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        debug_assert_eq!(gi.shape(), val(*v).shape(), "{} cotangent shape", op.name());
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub(crate) fn add_row_value(a: &Matrix, row: &Matrix) -> Matrix {
    assert_eq!(row.shape(), (1, a.cols()), "add_row shape mismatch");
    let mut value = a.clone();
    let r = row.as_slice();
    for i in 0..a.rows() {
        for (v, b) in value.row_mut(i).iter_mut().zip(r) {
            *v += b;
        }
    }
    value
}

pub(crate) fn affine_value(x: &Matrix, w: &Matrix, row: &Matrix) -> Matrix {
    assert_eq!(row.shape(), (1, w.cols()), "affine bias shape mismatch");
    let mut out = Matrix::zeros(x.rows(), w.cols());
    let r = row.as_slice();
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(r);
    }
    gemm(1.0, x, false, w, false, 1.0, &mut out);
    out
}

pub(crate) fn concat_cols_value(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "concat_cols row mismatch");
    let (ca, cb) = (a.cols(), b.cols());
    let mut out = Matrix::zeros(a.rows(), ca + cb);
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        row[..ca].copy_from_slice(a.row(i));
        row[ca..].copy_from_slice(b.row(i));
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Matrix::row_vector(&out)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `None` when `v` did not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the right shape.
    pub fn get_or_zeros(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Matrix> {
        vars.iter().map(|&v| self.get_or_zeros(v)).collect()
    }
}

//! Controls `u(x, t)`: learned, closed form, or a fixed base plus a learned
//! residual.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::linalg::Matrix;
use crate::nn::ControlNet;

/// A fixed, parameter-free control.
pub trait ControlField: Send + Sync {
    fn dim(&self) -> usize;

    fn control(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// `Σ_a cot_a ∂u_a/∂x_b` for each `b`. The default uses central
    /// differences; override when the Jacobian is known.
    fn control_vjp(&self, x: &[f64], t: f64, cot: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let h = 1e-6;
        let mut xp = x.to_vec();
        let mut up = vec![0.0; d];
        let mut um = vec![0.0; d];
        for b in 0..d {
            xp[b] = x[b] + h;
            self.control(&xp, t, &mut up);
            xp[b] = x[b] - h;
            self.control(&xp, t, &mut um);
            xp[b] = x[b];
            out[b] = (0..d).map(|a| cot[a] * (up[a] - um[a]) / (2.0 * h)).sum();
        }
    }

    /// Evaluate on rows of `x`, row `i` at time `t[i]`.
    fn control_batch(&self, x: &Matrix, t: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.dim());
        for i in 0..x.rows() {
            self.control(x.row(i), t[i], out.row_mut(i));
        }
        out
    }
}

/// The control a loss is evaluated at, or that drives a rollout.
#[derive(Clone)]
pub enum ControlPolicy {
    Zero {
        dim: usize,
    },
    Neural(ControlNet),
    ClosedForm(Arc<dyn ControlField>),
    /// `u = base + residual`; only the residual is trainable.
    Composite {
        base: Arc<dyn ControlField>,
        residual: ControlNet,
    },
}

impl core::fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ControlPolicy::Zero { dim } => write!(f, "Zero({dim})"),
            ControlPolicy::Neural(n) => write!(f, "Neural(d={}, width={})", n.dim(), n.width()),
            ControlPolicy::ClosedForm(c) => write!(f, "ClosedForm(d={})", c.dim()),
            ControlPolicy::Composite { residual, .. } => {
                write!(f, "Composite(d={}, width={})", residual.dim(), residual.width())
            }
        }
    }
}

impl ControlPolicy {
    pub fn dim(&self) -> usize {
        match self {
            ControlPolicy::Zero { dim } => *dim,
            ControlPolicy::Neural(n) => n.dim(),
            ControlPolicy::ClosedForm(c) => c.dim(),
            ControlPolicy::Composite { residual, .. } => residual.dim(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ControlPolicy::Zero { .. })
    }

    pub fn network(&self) -> Option<&ControlNet> {
        match self {
            ControlPolicy::Neural(n) | ControlPolicy::Composite { residual: n, .. } => Some(n),
            _ => None,
        }
    }

    pub fn network_mut(&mut self) -> Option<&mut ControlNet> {
        match self {
            ControlPolicy::Neural(n) | ControlPolicy::Composite { residual: n, .. } => Some(n),
            _ => None,
        }
    }

    /// Trainable parameters; empty for parameter-free controls.
    pub fn params(&self) -> &[Matrix] {
        self.network().map(|n| n.params()).unwrap_or(&[])
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        match self.network_mut() {
            Some(n) => n.params_mut(),
            None => &mut [],
        }
    }

    /// Row `i` of `x` at time `t[i]`.
    pub fn eval(&self, x: &Matrix, t: &[f64]) -> Matrix {
        debug_assert_eq!(x.rows(), t.len());
        match self {
            ControlPolicy::Zero { dim } => Matrix::zeros(x.rows(), *dim),
            ControlPolicy::Neural(n) => n.forward(x, t),
            ControlPolicy::ClosedForm(c) => c.control_batch(x, t),
            ControlPolicy::Composite { base, residual } => base.control_batch(x, t).add(&residual.forward(x, t)),
        }
    }

    /// All rows at the same time.
    pub fn eval_at(&self, x: &Matrix, t: f64) -> Matrix {
        self.eval(x, &vec![t; x.rows()])
    }

    pub fn eval_one(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.eval(&Matrix::row_vector(x), &[t]).into_vec()
    }

    /// Put the parameters on `tape`.
    pub fn register(&self, tape: &mut Tape<'_>, trainable: bool) -> Vec<Var> {
        match self.network() {
            Some(n) => n.mlp().register(tape, trainable),
            None => Vec::new(),
        }
    }

    /// Tape evaluation; differentiable in `x` and in the registered parameters.
    pub fn forward_tape<'a>(&'a self, tape: &mut Tape<'a>, vars: &[Var], x: Var, t: &[f64]) -> Var {
        match self {
            ControlPolicy::Zero { dim } => {
                let rows = tape.value(x).rows();
                tape.constant(Matrix::zeros(rows, *dim))
            }
            ControlPolicy::Neural(n) => n.forward_tape(tape, vars, x, t),
            ControlPolicy::ClosedForm(c) => field_on_tape(tape, &**c, x, t),
            ControlPolicy::Composite { base, residual } => {
                let b = field_on_tape(tape, &**base, x, t);
                let r = residual.forward_tape(tape, vars, x, t);
                tape.add(b, r)
            }
        }
    }
}

struct FieldOp<'a> {
    field: &'a dyn ControlField,
    times: Vec<f64>,
}

impl CustomOp for FieldOp<'_> {
    fn name(&self) -> &'static str {
        "control_field"
    }

    fn vjp(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let mut gx = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.field
                .control_vjp(x.row(i), self.times[i], grad.row(i), gx.row_mut(i));
        }
        vec![Some(gx)]
    }
}

fn field_on_tape<'a>(tape: &mut Tape<'a>, field: &'a dyn ControlField, x: Var, t: &[f64]) -> Var {
    let value = field.control_batch(tape.value(x), t);
    let op = FieldOp {
        field,
        times: t.to_vec(),
    };
    tape.custom(Box::new(op), vec![x], value)
}

//! Reparameterization matrices `M_t(s)` with `M_t(t) = Id`.
//!
//! The learned family is
//!
//! ```text
//! M(t, s) = e^{−γ(s−t)} Id + (1 − e^{−γ(s−t)}) M̃(t, s)
//! ```
//!
//! with `γ = softplus(raw)` and `M̃` a tanh network from `(t, s)` to `d²`
//! entries, read row-major. `∂ₛM` is carried alongside by forward tangent
//! propagation through the network, expressed with ordinary tape ops so it
//! is itself differentiable in the parameters.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{softplus, softplus_inverse, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, purpose, SeedStream};

/// Gated network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamNet {
    dim: usize,
    width: usize,
    /// `[W₁, b₁, W₂, b₂, W₃, b₃, raw_γ]`.
    params: Vec<Matrix>,
}

impl ReparamNet {
    pub const DEFAULT_WIDTH: usize = 64;

    /// `M̃` starts as the constant identity, so `M ≡ Id` and `∂ₛM ≡ 0`
    /// initially; `γ` starts at 1.
    pub fn new(dim: usize, width: usize, seeds: &SeedStream) -> Self {
        let mut r = seeds.substream(purpose::INIT_PARAMS, 1);
        let mut he = |fan_in: usize, fan_out: usize| {
            let sd = libm::sqrt(2.0 / fan_in as f64);
            Matrix::from_fn(fan_in, fan_out, |_, _| sd * rng::standard_normal(&mut r))
        };
        let w1 = he(2, width);
        let w2 = he(width, width);
        let params = vec![
            w1,
            Matrix::zeros(1, width),
            w2,
            Matrix::zeros(1, width),
            Matrix::zeros(width, dim * dim),
            Matrix::row_vector(Matrix::identity(dim).as_slice()),
            Matrix::scalar(softplus_inverse(1.0)),
        ];
        Self { dim, width, params }
    }

    pub fn from_params(dim: usize, width: usize, params: Vec<Matrix>) -> Result<Self> {
        let shapes = [
            (2, width),
            (1, width),
            (width, width),
            (1, width),
            (width, dim * dim),
            (1, dim * dim),
            (1, 1),
        ];
        if params.len() != shapes.len() || params.iter().zip(shapes).any(|(p, s)| p.shape() != s) {
            return Err(Error::CorruptModel);
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::CorruptModel);
        }
        Ok(Self { dim, width, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gamma(&self) -> f64 {
        softplus(self.params[6].item())
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn register(&self, tape: &mut Tape<'_>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// `(M, ∂ₛM)` for each `(t, s)` pair, one flattened `d×d` matrix per row.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, vars: &[Var], pairs: &[(f64, f64)]) -> (Var, Var) {
        let p = pairs.len();
        let dd = self.dim * self.dim;
        let input = tape.constant(Matrix::from_fn(
            p,
            2,
            |i, j| if j == 0 { pairs[i].0 } else { pairs[i].1 },
        ));
        let ds = tape.constant(Matrix::from_fn(p, 2, |_, j| j as f64));

        let (h1, dh1) = tanh_layer_tangent(tape, input, ds, vars[0], vars[1]);
        let (h2, dh2) = tanh_layer_tangent(tape, h1, dh1, vars[2], vars[3]);
        let xw = tape.matmul(h2, vars[4]);
        let mt = tape.add_row(xw, vars[5]);
        let dmt = tape.matmul(dh2, vars[4]);

        let gamma = tape.softplus(vars[6]);
        let delta = tape.constant(Matrix::column(&pairs.iter().map(|(t, s)| s - t).collect::<Vec<_>>()));
        let gd = tape.mul_scalar(delta, gamma);
        let neg = tape.scale(gd, -1.0);
        let e = tape.exp(neg);
        let ne = tape.scale(e, -1.0);
        let one_minus_e = tape.add_scalar(ne, 1.0);

        let id = Matrix::row_vector(Matrix::identity(self.dim).as_slice());
        let id_row = tape.constant(id.clone());
        let neg_id_row = tape.constant(id.scale(-1.0));
        let diff = tape.add_row(mt, neg_id_row);
        let gated = tape.mul_col(one_minus_e, diff);
        let m = tape.add_row(gated, id_row);

        let ge = tape.mul_scalar(e, gamma);
        let a = tape.mul_col(ge, diff);
        let b = tape.mul_col(one_minus_e, dmt);
        let mdot = tape.add(a, b);
        debug_assert_eq!(tape.value(m).shape(), (p, dd));
        (m, mdot)
    }
}

// h = tanh(xW + b), ḣ = (1 − h²) ⊙ (ẋW)
fn tanh_layer_tangent(tape: &mut Tape<'_>, x: Var, dx: Var, w: Var, b: Var) -> (Var, Var) {
    let xw = tape.matmul(x, w);
    let z = tape.add_row(xw, b);
    let h = tape.tanh(z);
    let dz = tape.matmul(dx, w);
    let h2 = tape.square(h);
    let nh2 = tape.scale(h2, -1.0);
    let q = tape.add_scalar(nh2, 1.0);
    let dh = tape.mul(q, dz);
    (h, dh)
}

/// The matrix family used by the matching loss.
#[derive(Clone, Debug, PartialEq)]
pub enum ReparamMatrices {
    Identity { dim: usize },
    Gated(ReparamNet),
}

impl ReparamMatrices {
    pub fn dim(&self) -> usize {
        match self {
            ReparamMatrices::Identity { dim } => *dim,
            ReparamMatrices::Gated(n) => n.dim(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ReparamMatrices::Identity { .. })
    }

    pub fn params(&self) -> &[Matrix] {
        match self {
            ReparamMatrices::Identity { .. } => &[],
            ReparamMatrices::Gated(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        match self {
            ReparamMatrices::Identity { .. } => &mut [],
            ReparamMatrices::Gated(n) => n.params_mut(),
        }
    }

    /// `(M_t(s), ∂ₛM_t(s))`.
    pub fn forward(&self, t: f64, s: f64) -> Result<(Matrix, Matrix)> {
        if s < t {
            return Err(contract("reparameterization matrices need s >= t"));
        }
        let d = self.dim();
        match self {
            ReparamMatrices::Identity { .. } => Ok((Matrix::identity(d), Matrix::zeros(d, d))),
            ReparamMatrices::Gated(_) => {
                let (m, md) = self.values(&[(t, s)]);
                Ok((m.reshape(d, d), md.reshape(d, d)))
            }
        }
    }

    /// `M` and `∂ₛM` for each `(t, s)` pair, one flattened matrix per row,
    /// without recording gradients.
    pub fn values(&self, pairs: &[(f64, f64)]) -> (Matrix, Matrix) {
        match self {
            ReparamMatrices::Identity { dim } => {
                let id = Matrix::identity(*dim);
                let m = Matrix::from_fn(pairs.len(), dim * dim, |_, e| id.as_slice()[e]);
                (m, Matrix::zeros(pairs.len(), dim * dim))
            }
            ReparamMatrices::Gated(net) => {
                let mut tape = Tape::new();
                let vars = net.register(&mut tape, false);
                let (m, md) = net.forward_tape(&mut tape, &vars, pairs);
                (tape.value(m).clone(), tape.value(md).clone())
            }
        }
    }
}

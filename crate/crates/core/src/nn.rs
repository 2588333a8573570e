//! Multilayer perceptrons evaluated either directly or on a [`Tape`].
//!
//! Both paths run the same kernels in the same order, so a forward pass on
//! the tape is bitwise equal to the direct one.

use alloc::vec::Vec;

use crate::autodiff::{affine_value, concat_cols_value, relu, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, purpose, SeedStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Tanh => libm::tanh(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Fully connected network. Hidden layers with equal input and output width
/// get an identity skip connection when `residual` is set. The last layer is
/// affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    residual: bool,
    /// `[W₀, b₀, W₁, b₁, …]`, `Wₗ` of shape `in × out`, `bₗ` of shape `1 × out`.
    params: Vec<Matrix>,
}

impl Mlp {
    /// He-initialized hidden layers and a zero final layer.
    pub fn new(sizes: &[usize], activation: Activation, residual: bool, seeds: &SeedStream, tag: u64) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut r = seeds.substream(purpose::INIT_PARAMS, tag);
        let layers = sizes.len() - 1;
        let mut params = Vec::with_capacity(2 * layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let w = if l + 1 == layers {
                Matrix::zeros(fan_in, fan_out)
            } else {
                let sd = libm::sqrt(2.0 / fan_in as f64);
                Matrix::from_fn(fan_in, fan_out, |_, _| sd * rng::standard_normal(&mut r))
            };
            params.push(w);
            params.push(Matrix::zeros(1, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            activation,
            residual,
            params,
        }
    }

    /// Rebuild from stored parameters, checking shapes and finiteness.
    pub fn from_params(sizes: &[usize], activation: Activation, residual: bool, params: Vec<Matrix>) -> Result<Self> {
        if sizes.len() < 2 || params.len() != 2 * (sizes.len() - 1) {
            return Err(Error::CorruptModel);
        }
        for l in 0..sizes.len() - 1 {
            if params[2 * l].shape() != (sizes[l], sizes[l + 1]) || params[2 * l + 1].shape() != (1, sizes[l + 1]) {
                return Err(Error::CorruptModel);
            }
        }
        let mlp = Self {
            sizes: sizes.to_vec(),
            activation,
            residual,
            params,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Matrix {
        &self.params[2 * layer + 1]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::CorruptModel)
        }
    }

    fn skip(&self, layer: usize) -> bool {
        self.residual && layer > 0 && self.sizes[layer] == self.sizes[layer + 1]
    }

    /// Direct evaluation on a batch of input rows.
    pub fn forward(&self, input: &Matrix) -> Matrix {
        let layers = self.num_layers();
        let mut h = input.clone();
        for l in 0..layers {
            let mut z = affine_value(&h, self.weight(l), self.bias(l));
            if l + 1 == layers {
                return z;
            }
            for v in z.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
            if self.skip(l) {
                z.add_assign(&h);
            }
            h = z;
        }
        h
    }

    /// Put the parameters on `tape`, as parameters or as constants.
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

    pub fn forward_tape(&self, tape: &mut Tape<'_>, vars: &[Var], input: Var) -> Var {
        let layers = self.num_layers();
        let mut h = input;
        for l in 0..layers {
            let z = tape.affine(h, vars[2 * l], vars[2 * l + 1]);
            if l + 1 == layers {
                return z;
            }
            let a = match self.activation {
                Activation::Relu => tape.relu(z),
                Activation::Tanh => tape.tanh(z),
            };
            h = if self.skip(l) { tape.add(h, a) } else { a };
        }
        h
    }
}

/// Control network `(x, t) ↦ u ∈ ℝᵈ`: three residual hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlNet {
    mlp: Mlp,
}

impl ControlNet {
    pub const DEFAULT_WIDTH: usize = 128;

    pub fn new(dim: usize, width: usize, seeds: &SeedStream) -> Self {
        Self {
            mlp: Mlp::new(&[dim + 1, width, width, width, dim], Activation::Relu, true, seeds, 0),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.input_dim() != mlp.output_dim() + 1 {
            return Err(Error::CorruptModel);
        }
        Ok(Self { mlp })
    }

    pub fn dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn width(&self) -> usize {
        self.mlp.sizes()[1]
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &[Matrix] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        self.mlp.params_mut()
    }

    /// Rows of `x` paired with times `t`, one per row.
    pub fn forward(&self, x: &Matrix, t: &[f64]) -> Matrix {
        let input = concat_cols_value(x, &Matrix::column(t));
        self.mlp.forward(&input)
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var, t: &[f64]) -> Var {
        let tc = tape.constant(Matrix::column(t));
        let input = tape.concat_cols(x, tc);
        self.mlp.forward_tape(tape, vars, input)
    }

    pub fn forward_one(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward(&Matrix::row_vector(x), &[t]).into_vec()
    }
}

//! Control problems: drift, costs, diffusion, and the benchmark registry.
//!
//! A problem is the controlled SDE
//!
//! ```text
//! dX = (b(X,t) + σ(t) u(X,t)) dt + √λ σ(t) dB,   X_0 ~ p_0
//! ```
//!
//! with running cost `½|u|² + f(X,t)` and terminal cost `g(X_T)`. All
//! derivatives are supplied analytically.
//!
//! Jacobians follow the convention `J[i][j] = ∂b_j/∂x_i`, so a linear drift
//! `b(x) = A x` has Jacobian `Aᵀ`.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, purpose, SeedStream};

/// Everything about a problem that is a function of state and time.
pub trait Dynamics: Send + Sync {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// `J[i][j] = ∂b_j/∂x_i`.
    fn drift_jacobian(&self, x: &[f64], t: f64) -> Matrix;

    /// `J · v` with the Jacobian above, i.e. `Σ_j ∂b_j/∂x_i v_j`. This is
    /// the vector-Jacobian product of the drift.
    fn drift_jacobian_mul(&self, x: &[f64], t: f64, v: &[f64], out: &mut [f64]) {
        self.drift_jacobian(x, t).mul_vec(v, out);
    }

    fn state_cost(&self, x: &[f64], t: f64) -> f64;
    fn state_cost_grad(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// `false` lets callers skip `f` entirely when it is identically zero.
    fn has_state_cost(&self) -> bool {
        true
    }

    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn terminal_cost_grad(&self, x: &[f64], out: &mut [f64]);

    fn diffusion(&self, t: f64) -> Matrix;
    fn diffusion_inv(&self, t: f64) -> Matrix;

    /// Concrete structure, for building closed-form solutions.
    fn kind(&self) -> ModelKind<'_> {
        ModelKind::Other
    }
}

/// Known model families.
#[derive(Clone, Copy, Debug)]
pub enum ModelKind<'a> {
    LinearQuadratic(&'a LinearQuadratic),
    DoubleWell(&'a DoubleWell),
    Mixture(&'a GaussianMixtureTarget),
    Other,
}

/// Law of the initial state.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// `x₀ = scale · N(0, I)`.
    ScaledGaussian {
        scale: f64,
    },
}

impl InitialLaw {
    pub fn is_point(&self) -> bool {
        matches!(self, InitialLaw::Point(_))
    }
}

/// A fully specified control problem. Immutable; cheap to clone.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    horizon: f64,
    noise_level: f64,
    initial_law: InitialLaw,
    model: Arc<dyn Dynamics>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("horizon", &self.horizon)
            .field("noise_level", &self.noise_level)
            .field("initial_law", &self.initial_law)
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(
        name: impl Into<String>,
        model: Arc<dyn Dynamics>,
        horizon: f64,
        noise_level: f64,
        initial_law: InitialLaw,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(alloc::format!("horizon must be positive, got {horizon}")));
        }
        if !(noise_level > 0.0 && noise_level.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "noise level must be positive, got {noise_level}"
            )));
        }
        if model.dim() == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if let InitialLaw::Point(x) = &initial_law {
            if x.len() != model.dim() {
                return Err(Error::Config(alloc::format!(
                    "initial point has length {}, expected {}",
                    x.len(),
                    model.dim()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            horizon,
            noise_level,
            initial_law,
            model,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn noise_level(&self) -> f64 {
        self.noise_level
    }

    pub fn initial_law(&self) -> &InitialLaw {
        &self.initial_law
    }

    pub fn model(&self) -> &dyn Dynamics {
        &*self.model
    }

    pub fn model_arc(&self) -> Arc<dyn Dynamics> {
        self.model.clone()
    }

    pub fn with_initial_law(&self, law: InitialLaw) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.model.clone(),
            self.horizon,
            self.noise_level,
            law,
        )
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.model.clone(),
            horizon,
            self.noise_level,
            self.initial_law.clone(),
        )
    }

    pub fn with_noise_level(&self, noise_level: f64) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.model.clone(),
            self.horizon,
            noise_level,
            self.initial_law.clone(),
        )
    }

    /// Draw an initial state for trajectory `index` from its own substream.
    pub fn sample_initial(&self, seeds: &SeedStream, index: u64, out: &mut [f64]) {
        match &self.initial_law {
            InitialLaw::Point(x) => out.copy_from_slice(x),
            InitialLaw::ScaledGaussian { scale } => {
                let mut r = seeds.substream(purpose::INITIAL_STATE, index);
                for v in out.iter_mut() {
                    *v = scale * rng::standard_normal(&mut r);
                }
            }
        }
    }

    #[inline]
    pub fn drift(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.model.drift(x, t, out)
    }

    #[inline]
    pub fn state_cost(&self, x: &[f64], t: f64) -> f64 {
        self.model.state_cost(x, t)
    }

    #[inline]
    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.model.terminal_cost(x)
    }
}

/// `b(x) = A x`, `f(x) = xᵀ P x`, `g(x) = xᵀ Q x + ⟨γ, x⟩`, constant `σ`.
///
/// Covers both Ornstein–Uhlenbeck families of the benchmark and most of the
/// closed-form test problems.
#[derive(Clone, Debug)]
pub struct LinearQuadratic {
    pub a: Matrix,
    pub p: Matrix,
    pub q: Matrix,
    pub gamma: Vec<f64>,
    pub sigma: Matrix,
    a_t: Matrix,
    p_sym: Matrix,
    q_sym: Matrix,
    sigma_inv: Matrix,
    has_p: bool,
}

impl LinearQuadratic {
    pub fn new(a: Matrix, p: Matrix, q: Matrix, gamma: Vec<f64>, sigma: Matrix) -> Result<Self> {
        let d = a.rows();
        for (name, m) in [("A", &a), ("P", &p), ("Q", &q), ("sigma", &sigma)] {
            if m.shape() != (d, d) {
                return Err(Error::Config(alloc::format!("{name} must be {d}x{d}")));
            }
        }
        if gamma.len() != d {
            return Err(Error::Config(alloc::format!("gamma must have length {d}")));
        }
        let sigma_inv = sigma
            .inverse()
            .ok_or_else(|| Error::Config("diffusion matrix is singular".into()))?;
        let p_sym = p.add(&p.transpose());
        let q_sym = q.add(&q.transpose());
        let has_p = p.max_abs() > 0.0;
        Ok(Self {
            a_t: a.transpose(),
            a,
            p,
            q,
            gamma,
            sigma,
            p_sym,
            q_sym,
            sigma_inv,
            has_p,
        })
    }

    /// Quadratic OU with identity-scaled coefficients.
    pub fn isotropic(d: usize, a: f64, p: f64, q: f64) -> Self {
        Self::new(
            Matrix::scaled_identity(d, a),
            Matrix::scaled_identity(d, p),
            Matrix::scaled_identity(d, q),
            vec![0.0; d],
            Matrix::identity(d),
        )
        .expect("isotropic coefficients are valid")
    }
}

fn quad_form(m: &Matrix, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let row = m.row(i);
        let mut r = 0.0;
        for (a, xj) in row.iter().zip(x) {
            r += a * xj;
        }
        acc += x[i] * r;
    }
    acc
}

impl Dynamics for LinearQuadratic {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        self.a.mul_vec(x, out);
    }

    fn drift_jacobian(&self, _x: &[f64], _t: f64) -> Matrix {
        self.a_t.clone()
    }

    fn drift_jacobian_mul(&self, _x: &[f64], _t: f64, v: &[f64], out: &mut [f64]) {
        self.a_t.mul_vec(v, out);
    }

    fn state_cost(&self, x: &[f64], _t: f64) -> f64 {
        if self.has_p {
            quad_form(&self.p, x)
        } else {
            0.0
        }
    }

    fn state_cost_grad(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        if self.has_p {
            self.p_sym.mul_vec(x, out);
        } else {
            out.fill(0.0);
        }
    }

    fn has_state_cost(&self) -> bool {
        self.has_p
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.gamma.iter().zip(x).map(|(g, xi)| g * xi).sum();
        quad_form(&self.q, x) + lin
    }

    fn terminal_cost_grad(&self, x: &[f64], out: &mut [f64]) {
        self.q_sym.mul_vec(x, out);
        for (o, g) in out.iter_mut().zip(&self.gamma) {
            *o += g;
        }
    }

    fn diffusion(&self, _t: f64) -> Matrix {
        self.sigma.clone()
    }

    fn diffusion_inv(&self, _t: f64) -> Matrix {
        self.sigma_inv.clone()
    }

    fn kind(&self) -> ModelKind<'_> {
        ModelKind::LinearQuadratic(self)
    }
}

/// Gradient of `Ψ(x) = Σ κ_i (x_i² − 1)²`, componentwise `4 κ_i x_i (x_i² − 1)`.
pub fn double_well_potential_grad(x: &[f64], kappa: &[f64], out: &mut [f64]) {
    for ((o, xi), k) in out.iter_mut().zip(x).zip(kappa) {
        *o = 4.0 * k * xi * (xi * xi - 1.0);
    }
}

/// Decoupled double well: `b = −∇Ψ`, `g(x) = Σ ν_i (x_i² − 1)²`, `f = 0`, `σ = I`.
#[derive(Clone, Debug)]
pub struct DoubleWell {
    pub kappa: Vec<f64>,
    pub nu: Vec<f64>,
}

impl DoubleWell {
    /// `κ_i = 5, ν_i = 3` for the first three coordinates, `1, 1` after that.
    pub fn benchmark(d: usize) -> Self {
        let kappa = (0..d).map(|i| if i < 3 { 5.0 } else { 1.0 }).collect();
        let nu = (0..d).map(|i| if i < 3 { 3.0 } else { 1.0 }).collect();
        Self { kappa, nu }
    }
}

impl Dynamics for DoubleWell {
    fn dim(&self) -> usize {
        self.kappa.len()
    }

    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        double_well_potential_grad(x, &self.kappa, out);
        for o in out.iter_mut() {
            *o = -*o;
        }
    }

    fn drift_jacobian(&self, x: &[f64], _t: f64) -> Matrix {
        let diag: Vec<f64> = x
            .iter()
            .zip(&self.kappa)
            .map(|(xi, k)| -4.0 * k * (3.0 * xi * xi - 1.0))
            .collect();
        Matrix::diag(&diag)
    }

    fn drift_jacobian_mul(&self, x: &[f64], _t: f64, v: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = -4.0 * self.kappa[i] * (3.0 * x[i] * x[i] - 1.0) * v[i];
        }
    }

    fn state_cost(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }

    fn state_cost_grad(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn has_state_cost(&self) -> bool {
        false
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.nu)
            .map(|(xi, n)| {
                let s = xi * xi - 1.0;
                n * s * s
            })
            .sum()
    }

    fn terminal_cost_grad(&self, x: &[f64], out: &mut [f64]) {
        double_well_potential_grad(x, &self.nu, out);
    }

    fn diffusion(&self, _t: f64) -> Matrix {
        Matrix::identity(self.dim())
    }

    fn diffusion_inv(&self, _t: f64) -> Matrix {
        Matrix::identity(self.dim())
    }

    fn kind(&self) -> ModelKind<'_> {
        ModelKind::DoubleWell(self)
    }
}

/// Sampling problem: `b = 0`, `f = 0`, `σ = I` and
/// `g(x) = −|x|²/2 − (d/2) log 2π − log μ(x)` for a normalized equal-weight
/// Gaussian mixture `μ` with identity covariances.
#[derive(Clone, Debug)]
pub struct GaussianMixtureTarget {
    pub means: Vec<Vec<f64>>,
    dim: usize,
}

impl GaussianMixtureTarget {
    /// Two components at `±e₁`.
    pub fn symmetric(dim: usize) -> Self {
        let mut plus = vec![0.0; dim];
        plus[0] = 1.0;
        let minus = plus.iter().map(|v| -v).collect();
        Self {
            means: vec![plus, minus],
            dim,
        }
    }

    /// `log μ(x)`, evaluated with log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self.means.iter().map(|m| -0.5 * sq_dist(x, m)).collect();
        let n = self.means.len() as f64;
        log_sum_exp(&logs) - libm::log(n) - 0.5 * self.dim as f64 * libm::log(2.0 * core::f64::consts::PI)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(values.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

impl Dynamics for GaussianMixtureTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn drift_jacobian(&self, _x: &[f64], _t: f64) -> Matrix {
        Matrix::zeros(self.dim, self.dim)
    }

    fn drift_jacobian_mul(&self, _x: &[f64], _t: f64, _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn state_cost(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }

    fn state_cost_grad(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn has_state_cost(&self) -> bool {
        false
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * sq - 0.5 * self.dim as f64 * libm::log(2.0 * core::f64::consts::PI) - self.log_density(x)
    }

    fn terminal_cost_grad(&self, x: &[f64], out: &mut [f64]) {
        // ∇g = −x − ∇log μ = −x − Σ_k w_k (m_k − x) = −Σ_k w_k m_k
        let logs: Vec<f64> = self.means.iter().map(|m| -0.5 * sq_dist(x, m)).collect();
        let lse = log_sum_exp(&logs);
        out.fill(0.0);
        for (m, l) in self.means.iter().zip(&logs) {
            let w = libm::exp(l - lse);
            for (o, mi) in out.iter_mut().zip(m) {
                *o -= w * mi;
            }
        }
    }

    fn diffusion(&self, _t: f64) -> Matrix {
        Matrix::identity(self.dim)
    }

    fn diffusion_inv(&self, _t: f64) -> Matrix {
        Matrix::identity(self.dim)
    }

    fn kind(&self) -> ModelKind<'_> {
        ModelKind::Mixture(self)
    }
}

/// The benchmark settings, addressed by stable string keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setting {
    QuadraticOuEasy,
    QuadraticOuHard,
    LinearOu,
    DoubleWell,
    PisMixture,
}

impl Setting {
    pub const ALL: [Setting; 5] = [
        Setting::QuadraticOuEasy,
        Setting::QuadraticOuHard,
        Setting::LinearOu,
        Setting::DoubleWell,
        Setting::PisMixture,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Setting::QuadraticOuEasy => "quadratic_ou_easy",
            Setting::QuadraticOuHard => "quadratic_ou_hard",
            Setting::LinearOu => "linear_ou",
            Setting::DoubleWell => "double_well",
            Setting::PisMixture => "pis_mixture_d2",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Setting::ALL.iter().copied().find(|s| s.key() == key).ok_or_else(|| {
            let valid: Vec<&str> = Setting::ALL.iter().map(|s| s.key()).collect();
            Error::Config(alloc::format!(
                "unknown setting `{key}`; valid settings are: {}",
                valid.join(", ")
            ))
        })
    }

    pub fn default_dim(self) -> usize {
        match self {
            Setting::QuadraticOuEasy | Setting::QuadraticOuHard => 20,
            Setting::LinearOu | Setting::DoubleWell => 10,
            Setting::PisMixture => 2,
        }
    }

    /// Notes on randomness used to build the problem, for run metadata.
    pub fn construction_notes(self) -> &'static str {
        match self {
            Setting::LinearOu => "xi_ij ~ N(0, 1/d) i.i.d., drawn once from the problem seed",
            Setting::QuadraticOuEasy | Setting::QuadraticOuHard => "x0 ~ 0.5 N(0, I)",
            _ => "deterministic",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Training defaults that accompany a registered setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparameters {
    pub steps: usize,
    pub batch: usize,
    pub iterations: usize,
    pub lr_control: f64,
    pub lr_matrices: f64,
    pub warm_start: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 128,
            iterations: 40_000,
            lr_control: 1e-4,
            lr_matrices: 1e-2,
            warm_start: false,
        }
    }
}

/// Build a registered setting. `seed` only matters for settings with random
/// coefficients.
pub fn make_setting(name: &str, seed: u64) -> Result<(ProblemSpec, Hyperparameters)> {
    make_setting_with_dim(name, seed, None)
}

/// As [`make_setting`], optionally rescaled to a different dimension for
/// desk-sized runs. Coefficient patterns are kept.
pub fn make_setting_with_dim(name: &str, seed: u64, dim: Option<usize>) -> Result<(ProblemSpec, Hyperparameters)> {
    let setting = Setting::from_key(name)?;
    let d = dim.unwrap_or_else(|| setting.default_dim());
    if d == 0 {
        return Err(Error::Config("dimension override must be positive".into()));
    }
    let key = setting.key().to_string();
    let gaussian_init = InitialLaw::ScaledGaussian { scale: 0.5 };
    let base = Hyperparameters::default();
    let built = match setting {
        Setting::QuadraticOuEasy => (
            ProblemSpec::new(
                key,
                Arc::new(LinearQuadratic::isotropic(d, 0.2, 0.2, 0.1)),
                1.0,
                1.0,
                gaussian_init,
            )?,
            Hyperparameters { steps: 50, ..base },
        ),
        Setting::QuadraticOuHard => (
            ProblemSpec::new(
                key,
                Arc::new(LinearQuadratic::isotropic(d, 1.0, 1.0, 0.5)),
                1.0,
                1.0,
                gaussian_init,
            )?,
            Hyperparameters {
                steps: 150,
                batch: 64,
                warm_start: true,
                ..base
            },
        ),
        Setting::LinearOu => {
            let xi = linear_ou_perturbation(d, seed);
            let id = Matrix::identity(d);
            let model = LinearQuadratic::new(
                xi.sub(&id),
                Matrix::zeros(d, d),
                Matrix::zeros(d, d),
                vec![1.0; d],
                id.add(&xi),
            )?;
            (
                ProblemSpec::new(key, Arc::new(model), 1.0, 1.0, gaussian_init)?,
                Hyperparameters { steps: 100, ..base },
            )
        }
        Setting::DoubleWell => (
            ProblemSpec::new(
                key,
                Arc::new(DoubleWell::benchmark(d)),
                1.0,
                1.0,
                InitialLaw::Point(vec![0.0; d]),
            )?,
            Hyperparameters { steps: 200, ..base },
        ),
        Setting::PisMixture => (
            ProblemSpec::new(
                key,
                Arc::new(GaussianMixtureTarget::symmetric(d)),
                1.0,
                1.0,
                InitialLaw::Point(vec![0.0; d]),
            )?,
            Hyperparameters { steps: 100, ..base },
        ),
    };
    Ok(built)
}

/// The random matrix `ξ` of the linear OU setting: i.i.d. `N(0, 1/d)` entries.
pub fn linear_ou_perturbation(d: usize, seed: u64) -> Matrix {
    let mut r = SeedStream::new(seed).substream(purpose::PROBLEM, 0);
    let sd = 1.0 / libm::sqrt(d as f64);
    Matrix::from_fn(d, d, |_, _| sd * rng::standard_normal(&mut r))
}

/// Uniform draw helper used by a few randomized checks.
pub fn random_point<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng::standard_normal(rng)).collect()
}

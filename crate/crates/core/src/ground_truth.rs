//! Optimal controls and value functions known in closed form or to grid
//! accuracy, and a Monte Carlo oracle based on the path-integral
//! representation.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{expm, Matrix};
use crate::policy::{ControlField, ControlPolicy};
use crate::problem::{DoubleWell, LinearQuadratic, ModelKind, ProblemSpec};
use crate::rng::SeedStream;
use crate::sim::{rollout_window, sample_increments, work_functional};

/// Norm beyond which the Riccati solution is considered to have blown up.
pub const RICCATI_BLOWUP: f64 = 1e8;

/// Backward solution of `Ḟ + AᵀF + FA − 2FσσᵀF + P = 0`, `F(T) = Q`, on a
/// uniform grid, together with `I(t) = ∫_t^T tr(σσᵀF(s)) ds` so that
/// `V(x, t) = xᵀF(t)x + λ I(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub horizon: f64,
    /// `F(t_k)`, `k = 0..=steps`.
    pub f: Vec<Matrix>,
    pub trace_integral: Vec<f64>,
}

fn riccati_rhs(a: &Matrix, p: &Matrix, s: &Matrix, f: &Matrix) -> Matrix {
    // dF/dτ with τ = T − t
    let atf = a.transpose().matmul(f);
    let fa = f.matmul(a);
    let fsf = f.matmul(s).matmul(f);
    atf.add(&fa).sub(&fsf.scale(2.0)).add(p)
}

/// Classical RK4 in reversed time with symmetrization after every step.
pub fn riccati_solve(
    a: &Matrix,
    p: &Matrix,
    q: &Matrix,
    sigma: &Matrix,
    horizon: f64,
    steps: usize,
) -> Result<RiccatiSolution> {
    if steps < 100 {
        return Err(Error::Config("riccati_solve needs at least 100 steps".into()));
    }
    let s = sigma.matmul(&sigma.transpose());
    let h = horizon / steps as f64;
    let mut f = vec![Matrix::zeros(q.rows(), q.cols()); steps + 1];
    let mut trace = vec![0.0; steps + 1];
    f[steps] = q.clone();
    let tr = |m: &Matrix| s.matmul(m).trace();
    for n in (0..steps).rev() {
        let f0 = &f[n + 1];
        let k1 = riccati_rhs(a, p, &s, f0);
        let f1 = f0.add(&k1.scale(h / 2.0));
        let k2 = riccati_rhs(a, p, &s, &f1);
        let f2 = f0.add(&k2.scale(h / 2.0));
        let k3 = riccati_rhs(a, p, &s, &f2);
        let f3 = f0.add(&k3.scale(h));
        let k4 = riccati_rhs(a, p, &s, &f3);
        let incr = k1.add(&k2.scale(2.0)).add(&k3.scale(2.0)).add(&k4).scale(h / 6.0);
        let mut next = f0.add(&incr);
        next.symmetrize();
        trace[n] = trace[n + 1] + h / 6.0 * (tr(f0) + 2.0 * tr(&f1) + 2.0 * tr(&f2) + tr(&f3));
        if !(next.max_abs() <= RICCATI_BLOWUP) {
            return Err(Error::HorizonTooLong { time: n as f64 * h });
        }
        f[n] = next;
    }
    Ok(RiccatiSolution {
        horizon,
        f,
        trace_integral: trace,
    })
}

impl RiccatiSolution {
    pub fn steps(&self) -> usize {
        self.f.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.steps();
        let pos = (t / self.dt()).clamp(0.0, n as f64);
        let j = (libm::floor(pos) as usize).min(n - 1);
        (j, pos - j as f64)
    }

    /// `F(t)`, linearly interpolated.
    pub fn at(&self, t: f64) -> Matrix {
        let (j, w) = self.locate(t);
        if w == 0.0 {
            return self.f[j].clone();
        }
        if w == 1.0 {
            return self.f[j + 1].clone();
        }
        self.f[j].scale(1.0 - w).add(&self.f[j + 1].scale(w))
    }

    pub fn trace_integral_at(&self, t: f64) -> f64 {
        let (j, w) = self.locate(t);
        (1.0 - w) * self.trace_integral[j] + w * self.trace_integral[j + 1]
    }

    /// Largest entry of `dF/dt + AᵀF + FA − 2FσσᵀF + P` at interior
    /// midpoints, with value and derivative from fourth-order stencils.
    pub fn max_residual(&self, a: &Matrix, p: &Matrix, sigma: &Matrix) -> f64 {
        let s = sigma.matmul(&sigma.transpose());
        let h = self.dt();
        let f = &self.f;
        let mut worst: f64 = 0.0;
        for k in 1..self.steps().saturating_sub(1) {
            let mid = f[k]
                .add(&f[k + 1])
                .scale(9.0)
                .sub(&f[k - 1])
                .sub(&f[k + 2])
                .scale(1.0 / 16.0);
            let deriv = f[k + 1]
                .sub(&f[k])
                .scale(27.0)
                .add(&f[k - 1])
                .sub(&f[k + 2])
                .scale(1.0 / (24.0 * h));
            // dF/dt = −(AᵀF + FA − 2FσσᵀF + P)
            let res = deriv.add(&riccati_rhs(a, p, &s, &mid));
            worst = worst.max(res.max_abs());
        }
        worst
    }
}

/// A value function, possibly only up to a time-dependent constant.
pub trait ValueFunction: Send + Sync {
    fn value(&self, x: &[f64], t: f64) -> f64;
}

/// `u*(x, t) = −2σᵀF(t)x` and `V = xᵀFx + λ I(t)`.
#[derive(Clone, Debug)]
pub struct LqrControl {
    pub riccati: Arc<RiccatiSolution>,
    pub sigma: Matrix,
    pub noise_level: f64,
}

impl LqrControl {
    pub fn new(model: &LinearQuadratic, horizon: f64, noise_level: f64, steps: usize) -> Result<Self> {
        if model.gamma.iter().any(|&g| g != 0.0) {
            return Err(Error::Config(
                "LQR ground truth needs a purely quadratic terminal cost".into(),
            ));
        }
        let ric = riccati_solve(&model.a, &model.p, &model.q, &model.sigma, horizon, steps)?;
        Ok(Self {
            riccati: Arc::new(ric),
            sigma: model.sigma.clone(),
            noise_level,
        })
    }

    /// `−2σᵀF(t)`.
    pub fn gain(&self, t: f64) -> Matrix {
        self.sigma.transpose().matmul(&self.riccati.at(t)).scale(-2.0)
    }
}

impl ControlField for LqrControl {
    fn dim(&self) -> usize {
        self.sigma.rows()
    }

    fn control(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.gain(t).mul_vec(x, out);
    }

    fn control_vjp(&self, _x: &[f64], t: f64, cot: &[f64], out: &mut [f64]) {
        self.gain(t).tr_mul_vec(cot, out);
    }

    fn control_batch(&self, x: &Matrix, t: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.dim());
        let mut cached: Option<(f64, Matrix)> = None;
        for i in 0..x.rows() {
            if cached.as_ref().map_or(true, |(ct, _)| *ct != t[i]) {
                cached = Some((t[i], self.gain(t[i])));
            }
            cached.as_ref().unwrap().1.mul_vec(x.row(i), out.row_mut(i));
        }
        out
    }
}

impl ValueFunction for LqrControl {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        let f = self.riccati.at(t);
        let mut fx = vec![0.0; x.len()];
        f.mul_vec(x, &mut fx);
        let quad: f64 = x.iter().zip(&fx).map(|(a, b)| a * b).sum();
        quad + self.noise_level * self.riccati.trace_integral_at(t)
    }
}

/// `u*(t) = −σᵀ e^{Aᵀ(T−t)} γ` for linear drift, no running cost and
/// linear terminal cost `⟨γ, x⟩`.
#[derive(Clone, Debug)]
pub struct LinearOuControl {
    pub a: Matrix,
    pub sigma: Matrix,
    pub gamma: Vec<f64>,
    pub horizon: f64,
}

impl LinearOuControl {
    pub fn new(model: &LinearQuadratic, horizon: f64) -> Result<Self> {
        if model.p.max_abs() != 0.0 || model.q.max_abs() != 0.0 {
            return Err(Error::Config("linear OU ground truth needs P = Q = 0".into()));
        }
        Ok(Self {
            a: model.a.clone(),
            sigma: model.sigma.clone(),
            gamma: model.gamma.clone(),
            horizon,
        })
    }

    pub fn control_at(&self, t: f64) -> Vec<f64> {
        let e = expm(&self.a.transpose().scale(self.horizon - t));
        let mut eg = vec![0.0; self.gamma.len()];
        e.mul_vec(&self.gamma, &mut eg);
        let mut u = vec![0.0; eg.len()];
        self.sigma.tr_mul_vec(&eg, &mut u);
        u.iter_mut().for_each(|v| *v = -*v);
        u
    }
}

impl ControlField for LinearOuControl {
    fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn control(&self, _x: &[f64], t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.control_at(t));
    }

    fn control_vjp(&self, _x: &[f64], _t: f64, _cot: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn control_batch(&self, x: &Matrix, t: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.dim());
        let mut cached: Option<(f64, Vec<f64>)> = None;
        for i in 0..x.rows() {
            if cached.as_ref().map_or(true, |(ct, _)| *ct != t[i]) {
                cached = Some((t[i], self.control_at(t[i])));
            }
            out.row_mut(i).copy_from_slice(&cached.as_ref().unwrap().1);
        }
        out
    }
}

impl ValueFunction for LinearOuControl {
    /// `⟨γ, e^{A(T−t)} x⟩`, omitting the additive function of `t`.
    fn value(&self, x: &[f64], t: f64) -> f64 {
        let e = expm(&self.a.scale(self.horizon - t));
        let mut ex = vec![0.0; x.len()];
        e.mul_vec(x, &mut ex);
        self.gamma.iter().zip(&ex).map(|(g, v)| g * v).sum()
    }
}

/// Hopf–Cole solution of one decoupled double-well coordinate on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Hjb1d {
    pub half_width: f64,
    pub nx: usize,
    pub nt: usize,
    pub horizon: f64,
    /// `u*` at node `(time j, space i)`, stored at `j * nx + i`.
    pub control: Vec<f64>,
    /// `φ(·, T)`, for checking the terminal condition.
    pub phi_terminal: Vec<f64>,
    /// `φ(·, 0)`.
    pub phi_initial: Vec<f64>,
}

/// Grid and time-stepping choices for [`double_well_solve_1d`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HjbGridOptions {
    pub half_width: f64,
    pub nx: usize,
    pub nt: usize,
    /// `θ` of the time stepping; ½ is Crank–Nicolson.
    pub theta: f64,
    /// Fully implicit half-steps replacing the first Crank–Nicolson steps.
    pub startup_steps: usize,
}

impl Default for HjbGridOptions {
    fn default() -> Self {
        Self {
            half_width: 4.0,
            nx: 2001,
            nt: 2001,
            theta: 0.5,
            startup_steps: 4,
        }
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    scratch[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let denom = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Solve `∂ₜφ + b ∂ₓφ + (λ/2) ∂ₓ²φ = 0`, `φ(·, T) = exp(−g/λ)`, for
/// `b = −4κx(x² − 1)`, `g = ν(x² − 1)²` on `[−L, L]` with zero-flux ends,
/// then `u* = λ ∂ₓ log φ`.
///
/// Advection uses central differences except where the cell Péclet number
/// `|b| Δx / λ` exceeds one, where it switches to the upwind side.
pub fn double_well_solve_1d(
    kappa: f64,
    nu: f64,
    noise_level: f64,
    horizon: f64,
    opts: HjbGridOptions,
) -> Result<Hjb1d> {
    let HjbGridOptions {
        half_width,
        nx,
        nt,
        theta,
        startup_steps,
    } = opts;
    if half_width < 3.0 || nx < 500 || nt < 2 {
        return Err(Error::Config(
            "double-well grid needs L >= 3, N_x >= 500, N_t >= 2".into(),
        ));
    }
    let lambda = noise_level;
    let dx = 2.0 * half_width / (nx - 1) as f64;
    let xs: Vec<f64> = (0..nx).map(|i| -half_width + i as f64 * dx).collect();

    // generator L as a tridiagonal (lo, mid, up)
    let diff = 0.5 * lambda / (dx * dx);
    let mut lo = vec![0.0; nx];
    let mut mid = vec![0.0; nx];
    let mut up = vec![0.0; nx];
    for i in 0..nx {
        let x = xs[i];
        let b = -4.0 * kappa * x * (x * x - 1.0);
        if i == 0 {
            up[i] = 2.0 * diff;
            mid[i] = -2.0 * diff;
            continue;
        }
        if i == nx - 1 {
            lo[i] = 2.0 * diff;
            mid[i] = -2.0 * diff;
            continue;
        }
        let (adv_lo, adv_mid, adv_up) = if b.abs() * dx <= lambda {
            (-b / (2.0 * dx), 0.0, b / (2.0 * dx))
        } else if b > 0.0 {
            (0.0, -b / dx, b / dx)
        } else {
            (-b / dx, b / dx, 0.0)
        };
        lo[i] = diff + adv_lo;
        mid[i] = -2.0 * diff + adv_mid;
        up[i] = diff + adv_up;
    }

    let terminal: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let s = x * x - 1.0;
            libm::exp(-nu * s * s / lambda)
        })
        .collect();
    let dtau = horizon / (nt - 1) as f64;
    let mut control = vec![0.0; nt * nx];
    let mut phi = terminal.clone();
    write_control(&phi, lambda, dx, &mut control[(nt - 1) * nx..]);

    let mut rhs = vec![0.0; nx];
    let mut scratch = vec![0.0; nx];
    let mut a_lo = vec![0.0; nx];
    let mut a_mid = vec![0.0; nx];
    let mut a_up = vec![0.0; nx];
    let mut step = |phi: &mut Vec<f64>, h: f64, th: f64| {
        for i in 0..nx {
            let mut explicit = phi[i] * (1.0 + (1.0 - th) * h * mid[i]);
            if i > 0 {
                explicit += (1.0 - th) * h * lo[i] * phi[i - 1];
            }
            if i + 1 < nx {
                explicit += (1.0 - th) * h * up[i] * phi[i + 1];
            }
            rhs[i] = explicit;
            a_lo[i] = -th * h * lo[i];
            a_mid[i] = 1.0 - th * h * mid[i];
            a_up[i] = -th * h * up[i];
        }
        thomas(&a_lo, &a_mid, &a_up, &mut rhs, &mut scratch);
        phi.copy_from_slice(&rhs);
    };

    for n in 1..nt {
        if n <= startup_steps / 2 {
            step(&mut phi, dtau / 2.0, 1.0);
            step(&mut phi, dtau / 2.0, 1.0);
        } else {
            step(&mut phi, dtau, theta);
        }
        if let Some(node) = phi.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Resolution { node, step: n });
        }
        let j = nt - 1 - n;
        write_control(&phi, lambda, dx, &mut control[j * nx..(j + 1) * nx]);
    }
    Ok(Hjb1d {
        half_width,
        nx,
        nt,
        horizon,
        control,
        phi_terminal: terminal,
        phi_initial: phi,
    })
}

fn write_control(phi: &[f64], lambda: f64, dx: f64, out: &mut [f64]) {
    let n = phi.len();
    let logs: Vec<f64> = phi.iter().map(|&p| libm::log(p)).collect();
    for i in 0..n {
        out[i] = if i == 0 {
            lambda * (logs[1] - logs[0]) / dx
        } else if i == n - 1 {
            lambda * (logs[n - 1] - logs[n - 2]) / dx
        } else {
            lambda * (logs[i + 1] - logs[i - 1]) / (2.0 * dx)
        };
    }
}

impl Hjb1d {
    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.nt - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx()
    }

    pub fn control_at_node(&self, j: usize, i: usize) -> f64 {
        self.control[j * self.nx + i]
    }

    fn cell(&self, x: f64, t: f64) -> (usize, f64, usize, f64) {
        let px = ((x + self.half_width) / self.dx()).clamp(0.0, (self.nx - 1) as f64);
        let i = (libm::floor(px) as usize).min(self.nx - 2);
        let pt = (t / self.dt()).clamp(0.0, (self.nt - 1) as f64);
        let j = (libm::floor(pt) as usize).min(self.nt - 2);
        (i, px - i as f64, j, pt - j as f64)
    }

    /// Bilinear interpolation in `(x, t)`; `x` is clamped to the grid.
    pub fn control(&self, x: f64, t: f64) -> f64 {
        let (i, wx, j, wt) = self.cell(x, t);
        let u = |jj: usize, ii: usize| self.control[jj * self.nx + ii];
        let lo = (1.0 - wx) * u(j, i) + wx * u(j, i + 1);
        let hi = (1.0 - wx) * u(j + 1, i) + wx * u(j + 1, i + 1);
        (1.0 - wt) * lo + wt * hi
    }

    /// `∂ₓ` of the interpolant.
    pub fn control_slope(&self, x: f64, t: f64) -> f64 {
        if x.abs() > self.half_width {
            return 0.0;
        }
        let (i, _, j, wt) = self.cell(x, t);
        let u = |jj: usize, ii: usize| self.control[jj * self.nx + ii];
        ((1.0 - wt) * (u(j, i + 1) - u(j, i)) + wt * (u(j + 1, i + 1) - u(j + 1, i))) / self.dx()
    }
}

/// Coordinatewise double-well control assembled from 1D solutions.
#[derive(Clone, Debug)]
pub struct DoubleWellControl {
    pub coords: Vec<Arc<Hjb1d>>,
}

impl DoubleWellControl {
    /// Solves once per distinct `(κ, ν)` pair.
    pub fn new(model: &DoubleWell, horizon: f64, noise_level: f64, opts: HjbGridOptions) -> Result<Self> {
        let mut solved: Vec<((f64, f64), Arc<Hjb1d>)> = Vec::new();
        let mut coords = Vec::with_capacity(model.kappa.len());
        for (&k, &n) in model.kappa.iter().zip(&model.nu) {
            let sol = match solved.iter().find(|(key, _)| *key == (k, n)) {
                Some((_, s)) => s.clone(),
                None => {
                    let s = Arc::new(double_well_solve_1d(k, n, noise_level, horizon, opts)?);
                    solved.push(((k, n), s.clone()));
                    s
                }
            };
            coords.push(sol);
        }
        Ok(Self { coords })
    }
}

impl ControlField for DoubleWellControl {
    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn control(&self, x: &[f64], t: f64, out: &mut [f64]) {
        for ((o, xi), c) in out.iter_mut().zip(x).zip(&self.coords) {
            *o = c.control(*xi, t);
        }
    }

    fn control_vjp(&self, x: &[f64], t: f64, cot: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = cot[i] * self.coords[i].control_slope(x[i], t);
        }
    }
}

/// Ground truth for a problem: the optimal control and, where available,
/// the value function up to a function of time.
#[derive(Clone)]
pub struct GroundTruth {
    pub control: Arc<dyn ControlField>,
    pub value: Option<Arc<dyn ValueFunction>>,
}

impl GroundTruth {
    pub fn policy(&self) -> ControlPolicy {
        ControlPolicy::ClosedForm(self.control.clone())
    }

    /// Build the ground truth for a registered problem family.
    pub fn for_problem(spec: &ProblemSpec) -> Result<Self> {
        Self::for_problem_with(spec, 10_000, HjbGridOptions::default())
    }

    pub fn for_problem_with(spec: &ProblemSpec, riccati_steps: usize, grid: HjbGridOptions) -> Result<Self> {
        match spec.model().kind() {
            ModelKind::LinearQuadratic(lq) => {
                if lq.gamma.iter().all(|&g| g == 0.0) {
                    let c = Arc::new(LqrControl::new(lq, spec.horizon(), spec.noise_level(), riccati_steps)?);
                    Ok(Self {
                        control: c.clone(),
                        value: Some(c),
                    })
                } else {
                    let c = Arc::new(LinearOuControl::new(lq, spec.horizon())?);
                    Ok(Self {
                        control: c.clone(),
                        value: Some(c),
                    })
                }
            }
            ModelKind::DoubleWell(dw) => {
                if spec.model().diffusion(0.0) != Matrix::identity(spec.dim()) {
                    return Err(Error::Config("double-well ground truth assumes unit diffusion".into()));
                }
                let c = Arc::new(DoubleWellControl::new(dw, spec.horizon(), spec.noise_level(), grid)?);
                Ok(Self {
                    control: c,
                    value: None,
                })
            }
            _ => Err(Error::UnsupportedSetting(spec.name().into())),
        }
    }
}

/// Monte Carlo estimates of `V(x, t)` and `u*(x, t)` with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleEstimate {
    pub value: f64,
    pub value_se: f64,
    pub control: Vec<f64>,
    pub control_se: Vec<f64>,
}

/// `V̂ = −λ log mean(e^{−W/λ})` and `û* = λσᵀ(t) Ê[∇ e^{−W/λ}] / Ê[e^{−W/λ}]`
/// from `m` uncontrolled paths started at `(x, t)` with `steps` Euler steps.
/// The gradient uses the path-wise estimator with `M = Id`.
pub fn value_mc_oracle(
    spec: &ProblemSpec,
    x: &[f64],
    t: f64,
    m: usize,
    steps: usize,
    seeds: &SeedStream,
) -> Result<OracleEstimate> {
    let lambda = spec.noise_level();
    let d = spec.dim();
    let x0 = Matrix::from_fn(m, d, |_, j| x[j]);
    let inc = sample_increments(m, steps, d, spec.horizon() - t, seeds);
    let traj = rollout_window(spec, &ControlPolicy::Zero { dim: d }, &x0, t, &inc)?;
    let w = work_functional(spec, &traj, 0);
    let weights: Vec<f64> = w.iter().map(|w| libm::exp(-w / lambda)).collect();
    let grads = crate::losses::pathwise_samples(spec, &traj, &crate::reparam::ReparamMatrices::Identity { dim: d })?;
    let mf = m as f64;
    let mean_w = weights.iter().sum::<f64>() / mf;
    if !(mean_w > 0.0) || !mean_w.is_finite() {
        return Err(Error::DegenerateOracle);
    }
    let var_w = weights.iter().map(|v| (v - mean_w) * (v - mean_w)).sum::<f64>() / (mf - 1.0);
    let value = -lambda * libm::log(mean_w);
    let value_se = lambda * libm::sqrt(var_w / mf) / mean_w;

    // ratio estimator per coordinate, then map through λσᵀ
    let sigma_t = spec.model().diffusion(t).transpose();
    let mut ratio = vec![0.0; d];
    let mut ratio_var = vec![0.0; d];
    for j in 0..d {
        let a: Vec<f64> = (0..m).map(|i| grads[(i, j)] * weights[i]).collect();
        let mean_a = a.iter().sum::<f64>() / mf;
        let r = mean_a / mean_w;
        let v = a.iter().zip(&weights).map(|(ai, wi)| {
            let e = ai - r * wi;
            e * e
        });
        ratio[j] = r;
        ratio_var[j] = v.sum::<f64>() / (mf - 1.0) / (mean_w * mean_w) / mf;
    }
    let mut control = vec![0.0; d];
    sigma_t.mul_vec(&ratio, &mut control);
    control.iter_mut().for_each(|c| *c *= lambda);
    // coordinates of the ratio are treated as independent for the band
    let control_se: Vec<f64> = (0..d)
        .map(|a| {
            let s: f64 = (0..d).map(|b| sigma_t[(a, b)] * sigma_t[(a, b)] * ratio_var[b]).sum();
            lambda * libm::sqrt(s)
        })
        .collect();
    Ok(OracleEstimate {
        value,
        value_se,
        control,
        control_se,
    })
}

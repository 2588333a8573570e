//! Gaussian warm start: controls whose marginals are `N(μ(t), t Γ(t)Γ(t)ᵀ)`
//! for piecewise-linear `μ` and `Γ`, trained on the control objective.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::adam::Adam;
use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{ema_update, EMA_BETA};
use crate::policy::ControlField;
use crate::problem::{InitialLaw, ProblemSpec};
use crate::rng::{self, purpose, SeedStream};
use crate::sim::{state_cost_on_tape, terminal_cost_on_tape, time_grid};

/// Times below this are clamped in the `1/(2t)` factor.
pub const T_EPS: f64 = 1e-4;

/// Largest condition number accepted for a spline knot.
pub const MAX_CONDITION: f64 = 1e6;

/// Knots of `μ` and `Γ` on a uniform grid of `B + 1` points. `μ⁽⁰⁾` is the
/// initial mean and `Γ⁽⁰⁾ = √λ σ(0)`; both are fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSplinePath {
    pub horizon: f64,
    /// `B + 1` rows of length `d`.
    pub mu: Vec<Vec<f64>>,
    /// `Γ⁽⁰⁾`.
    pub anchor: Matrix,
    /// `Γ⁽ᵇ⁾ − Γ⁽⁰⁾` for `b = 1..=B`.
    pub offsets: Vec<Matrix>,
}

/// Spline values at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct SplinePoint {
    pub mu: Vec<f64>,
    pub dmu: Vec<f64>,
    pub gamma: Matrix,
    pub dgamma: Matrix,
}

impl GaussianSplinePath {
    /// Constant mean at the initial mean and `Γ ≡ Γ⁽⁰⁾`.
    pub fn initial(spec: &ProblemSpec, knots: usize) -> Self {
        let d = spec.dim();
        let mean = match spec.initial_law() {
            InitialLaw::Point(x) => x.clone(),
            InitialLaw::ScaledGaussian { .. } => vec![0.0; d],
        };
        let anchor = spec.model().diffusion(0.0).scale(libm::sqrt(spec.noise_level()));
        Self {
            horizon: spec.horizon(),
            mu: vec![mean; knots + 1],
            anchor,
            offsets: vec![Matrix::zeros(d, d); knots],
        }
    }

    pub fn knots(&self) -> usize {
        self.offsets.len()
    }

    pub fn dim(&self) -> usize {
        self.anchor.rows()
    }

    pub fn spacing(&self) -> f64 {
        self.horizon / self.knots() as f64
    }

    pub fn gamma_knot(&self, b: usize) -> Matrix {
        if b == 0 {
            self.anchor.clone()
        } else {
            self.anchor.add(&self.offsets[b - 1])
        }
    }

    /// Segment index and the weights of its two ends.
    fn segment(&self, t: f64) -> (usize, f64, f64) {
        let delta = self.spacing();
        let b = ((libm::floor(t / delta)) as isize).clamp(0, self.knots() as isize - 1) as usize;
        let lo = (b as f64 + 1.0) * delta - t;
        let hi = t - b as f64 * delta;
        (b, lo / delta, hi / delta)
    }

    /// Piecewise-linear values and piecewise-constant derivatives. The last
    /// segment is used at `t = T`.
    pub fn eval(&self, t: f64) -> SplinePoint {
        let (b, wl, wh) = self.segment(t);
        let delta = self.spacing();
        let (m0, m1) = (&self.mu[b], &self.mu[b + 1]);
        let mu = m0.iter().zip(m1).map(|(a, c)| wl * a + wh * c).collect();
        let dmu = m0.iter().zip(m1).map(|(a, c)| (c - a) / delta).collect();
        let (g0, g1) = (self.gamma_knot(b), self.gamma_knot(b + 1));
        SplinePoint {
            mu,
            dmu,
            gamma: g0.scale(wl).add(&g1.scale(wh)),
            dgamma: g1.sub(&g0).scale(1.0 / delta),
        }
    }

    /// Every knot of `Γ` is invertible with condition number at most
    /// [`MAX_CONDITION`].
    pub fn check_conditioning(&self) -> Result<()> {
        for b in 0..=self.knots() {
            let c = self.gamma_knot(b).condition_inf();
            if !(c <= MAX_CONDITION) {
                return Err(Error::IllConditionedSpline {
                    time: b as f64 * self.spacing(),
                });
            }
        }
        Ok(())
    }
}

/// `μ'(t) + G(t)(x − μ(t))` and `G(t) = Γ'Γ⁻¹ + (I − λσσᵀΣ⁻¹)/(2t)` with
/// `Σ = ΓΓᵀ`.
struct Coefficients {
    mu: Vec<f64>,
    dmu: Vec<f64>,
    g: Matrix,
    sigma_inv: Matrix,
}

fn coefficients(spec: &ProblemSpec, path: &GaussianSplinePath, t: f64) -> Result<Coefficients> {
    let p = path.eval(t);
    let d = path.dim();
    let inv = p.gamma.inverse().ok_or(Error::IllConditionedSpline { time: t })?;
    let sigma = spec.model().diffusion(t);
    let sst = sigma.matmul(&sigma.transpose()).scale(spec.noise_level());
    let sigma_big_inv = inv.transpose().matmul(&inv);
    let te = t.max(T_EPS);
    let corr = Matrix::identity(d)
        .sub(&sst.matmul(&sigma_big_inv))
        .scale(1.0 / (2.0 * te));
    Ok(Coefficients {
        mu: p.mu,
        dmu: p.dmu,
        g: p.dgamma.matmul(&inv).add(&corr),
        sigma_inv: spec.model().diffusion_inv(t),
    })
}

fn control_from(spec: &ProblemSpec, c: &Coefficients, x: &[f64], t: f64, out: &mut [f64]) {
    let d = x.len();
    let diff: Vec<f64> = x.iter().zip(&c.mu).map(|(a, b)| a - b).collect();
    let mut gd = vec![0.0; d];
    c.g.mul_vec(&diff, &mut gd);
    let mut b = vec![0.0; d];
    spec.drift(x, t, &mut b);
    let r: Vec<f64> = (0..d).map(|a| c.dmu[a] + gd[a] - b[a]).collect();
    c.sigma_inv.mul_vec(&r, out);
}

/// `σ⁻¹(μ' + G(x − μ) − b(x, t))`.
pub fn gaussian_control(spec: &ProblemSpec, path: &GaussianSplinePath, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let c = coefficients(spec, path, t)?;
    let mut out = vec![0.0; x.len()];
    control_from(spec, &c, x, t, &mut out);
    Ok(out)
}

/// The warm-start control as a fixed field.
#[derive(Clone)]
pub struct GaussianControl {
    pub spec: ProblemSpec,
    pub path: GaussianSplinePath,
}

impl GaussianControl {
    pub fn new(spec: &ProblemSpec, path: GaussianSplinePath) -> Result<Self> {
        path.check_conditioning()?;
        Ok(Self {
            spec: spec.clone(),
            path,
        })
    }

    fn coeffs(&self, t: f64) -> Option<Coefficients> {
        coefficients(&self.spec, &self.path, t).ok()
    }
}

impl ControlField for GaussianControl {
    fn dim(&self) -> usize {
        self.path.dim()
    }

    fn control(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self.coeffs(t) {
            Some(c) => control_from(&self.spec, &c, x, t, out),
            None => out.fill(f64::NAN),
        }
    }

    fn control_vjp(&self, x: &[f64], t: f64, cot: &[f64], out: &mut [f64]) {
        let Some(c) = self.coeffs(t) else {
            out.fill(f64::NAN);
            return;
        };
        let d = x.len();
        let mut r = vec![0.0; d];
        c.sigma_inv.tr_mul_vec(cot, &mut r);
        let mut jr = vec![0.0; d];
        self.spec.model().drift_jacobian_mul(x, t, &r, &mut jr);
        c.g.tr_mul_vec(&r, out);
        for (o, j) in out.iter_mut().zip(&jr) {
            *o -= j;
        }
    }

    fn control_batch(&self, x: &Matrix, t: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.dim());
        let mut cached: Option<(f64, Option<Coefficients>)> = None;
        for i in 0..x.rows() {
            if cached.as_ref().map_or(true, |(ct, _)| *ct != t[i]) {
                cached = Some((t[i], self.coeffs(t[i])));
            }
            match &cached.as_ref().unwrap().1 {
                Some(c) => control_from(&self.spec, c, x.row(i), t[i], out.row_mut(i)),
                None => out.row_mut(i).fill(f64::NAN),
            }
        }
        out
    }
}

/// Training settings for [`rgsoc_train`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmStartConfig {
    pub knots: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            knots: 20,
            steps: 200,
            batch: 512,
            lr: 3e-4,
            iterations: 60_000,
        }
    }
}

/// Objective values recorded during training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmStartHistory {
    pub objective: Vec<f64>,
    pub ema: Vec<f64>,
}

/// Objective above which training is considered to have diverged.
pub const DIVERGENCE: f64 = 1e8;

struct DriftOp<'a> {
    spec: &'a ProblemSpec,
    t: f64,
}

impl CustomOp for DriftOp<'_> {
    fn name(&self) -> &'static str {
        "drift"
    }

    fn vjp(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let mut gx = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.spec
                .model()
                .drift_jacobian_mul(x.row(i), self.t, grad.row(i), gx.row_mut(i));
        }
        vec![Some(gx)]
    }
}

fn drift_on_tape<'a>(tape: &mut Tape<'a>, spec: &'a ProblemSpec, x: Var, t: f64) -> Var {
    let xv = tape.value(x);
    let mut out = Matrix::zeros(xv.rows(), xv.cols());
    for i in 0..xv.rows() {
        spec.drift(xv.row(i), t, out.row_mut(i));
    }
    tape.custom(Box::new(DriftOp { spec, t }), vec![x], out)
}

/// Trainable parameters: `μ⁽¹⁾..μ⁽ᴮ⁾` as `1 × d` rows, then the `Γ` offsets.
fn spline_params(path: &GaussianSplinePath) -> Vec<Matrix> {
    let mut p: Vec<Matrix> = path.mu[1..].iter().map(|m| Matrix::row_vector(m)).collect();
    p.extend(path.offsets.iter().cloned());
    p
}

fn set_spline_params(path: &mut GaussianSplinePath, params: &[Matrix]) {
    let b = path.knots();
    for k in 0..b {
        path.mu[k + 1] = params[k].as_slice().to_vec();
        path.offsets[k] = params[b + k].clone();
    }
}

/// `(1/m) Σ_i [Δt Σ_{j<K} (½‖û(Y_ij, t_j)‖² + f(Y_ij, t_j)) + g(Y_iK)]` with
/// `Y_ij = μ̂(t_j) + √t_j Γ̂(t_j) Z_i`, built on a tape from the spline
/// parameter leaves `vars` (see [`rgsoc_train`] for their order).
pub fn rgsoc_objective_on_tape<'a>(
    tape: &mut Tape<'a>,
    spec: &'a ProblemSpec,
    path: &GaussianSplinePath,
    vars: &[Var],
    z: &Matrix,
    steps: usize,
) -> Result<Var> {
    let d = path.dim();
    let bk = path.knots();
    let m = z.rows();
    let delta = path.spacing();
    let lambda = spec.noise_level();
    let dt = spec.horizon() / steps as f64;
    let mu0 = tape.constant(Matrix::row_vector(&path.mu[0]));
    let anchor = tape.constant(path.anchor.clone());
    let mu_knot = |b: usize| if b == 0 { mu0 } else { vars[b - 1] };
    let mut gamma_knots = vec![anchor];
    for b in 1..=bk {
        let g = tape.add(anchor, vars[bk + b - 1]);
        gamma_knots.push(g);
    }
    let zc = tape.constant(z.clone());
    let inv_m = 1.0 / m as f64;
    let mut total: Option<Var> = None;
    let mut accumulate = |tape: &mut Tape<'a>, v: Var| {
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v),
        });
    };
    for (j, &t) in time_grid(spec.horizon(), steps).iter().enumerate() {
        let (b, wl, wh) = path.segment(t);
        let m_lo = tape.scale(mu_knot(b), wl);
        let m_hi = tape.scale(mu_knot(b + 1), wh);
        let mu = tape.add(m_lo, m_hi);
        let g_lo = tape.scale(gamma_knots[b], wl);
        let g_hi = tape.scale(gamma_knots[b + 1], wh);
        let gamma = tape.add(g_lo, g_hi);
        let gt = tape.transpose(gamma);
        let zg = tape.matmul(zc, gt);
        let spread = tape.scale(zg, libm::sqrt(t));
        let y = tape.add_row(spread, mu);
        if j == steps {
            let g = terminal_cost_on_tape(tape, spec, y);
            let gs = tape.sum(g);
            let term = tape.scale(gs, inv_m);
            accumulate(tape, term);
            break;
        }
        let dmu = {
            let diff = tape.sub(mu_knot(b + 1), mu_knot(b));
            tape.scale(diff, 1.0 / delta)
        };
        let dgamma = {
            let diff = tape.sub(gamma_knots[b + 1], gamma_knots[b]);
            tape.scale(diff, 1.0 / delta)
        };
        let inv = tape.inverse(gamma).ok_or(Error::IllConditionedSpline { time: t })?;
        let inv_t = tape.transpose(inv);
        let big_inv = tape.matmul(inv_t, inv);
        let sigma = spec.model().diffusion(t);
        let sst = tape.constant(sigma.matmul(&sigma.transpose()).scale(-lambda / (2.0 * t.max(T_EPS))));
        let corr = tape.matmul(sst, big_inv);
        let half_id = tape.constant(Matrix::scaled_identity(d, 1.0 / (2.0 * t.max(T_EPS))));
        let corr = tape.add(corr, half_id);
        let slope = tape.matmul(dgamma, inv);
        let gmat = tape.add(slope, corr);
        let neg_mu = tape.scale(mu, -1.0);
        let centered = tape.add_row(y, neg_mu);
        let gmat_t = tape.transpose(gmat);
        let lin = tape.matmul(centered, gmat_t);
        let with_mean = tape.add_row(lin, dmu);
        let b_y = drift_on_tape(tape, spec, y, t);
        let r = tape.sub(with_mean, b_y);
        let sinv_t = tape.constant(spec.model().diffusion_inv(t).transpose());
        let u = tape.matmul(r, sinv_t);
        let sq = tape.square(u);
        let energy = tape.sum(sq);
        let mut step_cost = tape.scale(energy, 0.5 * dt * inv_m);
        if spec.model().has_state_cost() {
            let f = state_cost_on_tape(tape, spec, y, t);
            let fs = tape.sum(f);
            let fc = tape.scale(fs, dt * inv_m);
            step_cost = tape.add(step_cost, fc);
        }
        accumulate(tape, step_cost);
    }
    Ok(total.expect("the grid has at least one point"))
}

/// Standard normal `m × d` draws for iteration `n`.
fn draws(seeds: &SeedStream, n: usize, m: usize, d: usize) -> Matrix {
    let s = seeds.child(n as u64);
    let mut z = Matrix::zeros(m, d);
    for i in 0..m {
        let mut r = s.substream(purpose::WARM_START, i as u64);
        rng::fill_standard_normal(&mut r, z.row_mut(i));
    }
    z
}

/// Adam on the free spline knots against the Monte Carlo objective.
pub fn rgsoc_train(
    spec: &ProblemSpec,
    init: GaussianSplinePath,
    cfg: &WarmStartConfig,
    seeds: &SeedStream,
) -> Result<(GaussianSplinePath, WarmStartHistory)> {
    let mut path = init;
    let mut params = spline_params(&path);
    let mut adam = Adam::new(cfg.lr, &params);
    let mut history = WarmStartHistory::default();
    let mut ema = None;
    let d = path.dim();
    for n in 0..cfg.iterations {
        let z = draws(seeds, n, cfg.batch, d);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let obj = rgsoc_objective_on_tape(&mut tape, spec, &path, &vars, &z, cfg.steps)?;
        let value = tape.value(obj).item();
        if !(value.abs() <= DIVERGENCE) {
            return Err(Error::WarmStartFailed { objective: value });
        }
        let e = ema_update(ema, value, EMA_BETA);
        ema = Some(e);
        history.objective.push(value);
        history.ema.push(e);
        let grads = tape.backward(obj).collect(&vars);
        adam.step(&mut params, &grads)?;
        set_spline_params(&mut path, &params);
    }
    path.check_conditioning()?;
    Ok((path, history))
}

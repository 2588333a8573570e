//! Euler–Maruyama rollouts, path functionals, and importance weights.
//!
//! Batches are stored time-major: `states[k]` is the `m × d` matrix of all
//! trajectories at `t_k`. Trajectory `i` draws its initial state and its
//! increments from its own substream, so results for trajectory `i` do not
//! depend on the batch size.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::linalg::Matrix;
use crate::policy::ControlPolicy;
use crate::problem::ProblemSpec;
use crate::rng::{self, purpose, SeedStream};

/// `t_k = T k / K` for `k = 0..=K`.
pub fn time_grid(horizon: f64, steps: usize) -> Vec<f64> {
    window_grid(0.0, horizon, steps)
}

/// `t_k = t₀ + (T − t₀) k / K`, ending exactly at `T`.
pub fn window_grid(start: f64, end: f64, steps: usize) -> Vec<f64> {
    let n = steps.max(1) as f64;
    (0..=steps)
        .map(|k| {
            if k == steps {
                end
            } else {
                start + (end - start) * k as f64 / n
            }
        })
        .collect()
}

/// Brownian increments, `K` matrices of shape `m × d` with i.i.d.
/// `N(0, T/K)` entries. Row `i` comes from substream `i`.
pub fn sample_increments(m: usize, steps: usize, dim: usize, horizon: f64, seeds: &SeedStream) -> Vec<Matrix> {
    let mut out: Vec<Matrix> = (0..steps).map(|_| Matrix::zeros(m, dim)).collect();
    if steps == 0 {
        return out;
    }
    let sd = libm::sqrt(horizon / steps as f64);
    for i in 0..m {
        let mut r = seeds.substream(purpose::INCREMENTS, i as u64);
        for inc in out.iter_mut() {
            for v in inc.row_mut(i) {
                *v = sd * rng::standard_normal(&mut r);
            }
        }
    }
    out
}

/// Initial states from the problem's initial law, row `i` from substream `i`.
pub fn sample_initial_states(spec: &ProblemSpec, m: usize, seeds: &SeedStream) -> Matrix {
    let mut x0 = Matrix::zeros(m, spec.dim());
    for i in 0..m {
        spec.sample_initial(seeds, i as u64, x0.row_mut(i));
    }
    x0
}

/// Initial states and increments for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNoise {
    pub x0: Matrix,
    pub increments: Vec<Matrix>,
}

impl BatchNoise {
    pub fn sample(spec: &ProblemSpec, m: usize, steps: usize, seeds: &SeedStream) -> Self {
        Self {
            x0: sample_initial_states(spec, m, seeds),
            increments: sample_increments(m, steps, spec.dim(), spec.horizon(), seeds),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.x0.rows()
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }
}

/// One Euler–Maruyama step for every row:
/// `x + Δt (b(x,t) + σ u) + √λ σ ΔB`.
pub fn euler_step(spec: &ProblemSpec, x: &Matrix, u: &Matrix, db: &Matrix, t: f64, dt: f64) -> Matrix {
    let d = spec.dim();
    let model = spec.model();
    let sigma = model.diffusion(t);
    let sl = libm::sqrt(spec.noise_level());
    let mut out = Matrix::zeros(x.rows(), d);
    let mut b = vec![0.0; d];
    let mut su = vec![0.0; d];
    let mut sdb = vec![0.0; d];
    for i in 0..x.rows() {
        let xi = x.row(i);
        model.drift(xi, t, &mut b);
        sigma.mul_vec(u.row(i), &mut su);
        sigma.mul_vec(db.row(i), &mut sdb);
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = xi[j] + dt * (b[j] + su[j]) + sl * sdb[j];
        }
    }
    out
}

fn first_non_finite(x: &Matrix) -> Option<usize> {
    (0..x.rows()).find(|&i| !x.row(i).iter().all(|v| v.is_finite()))
}

/// `m` Euler–Maruyama paths with their increments and recorded controls.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub dt: f64,
    pub noise_level: f64,
    pub times: Vec<f64>,
    /// `K + 1` matrices of shape `m × d`.
    pub states: Vec<Matrix>,
    /// `K` matrices of shape `m × d`.
    pub increments: Vec<Matrix>,
    /// Control applied at `(X_k, t_k)`, `K` matrices of shape `m × d`.
    pub controls: Vec<Matrix>,
    pub detached: bool,
}

impl TrajectoryBatch {
    pub fn batch_size(&self) -> usize {
        self.states[0].rows()
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn dim(&self) -> usize {
        self.states[0].cols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        self.states[k].row(i)
    }

    pub fn terminal(&self) -> &Matrix {
        &self.states[self.steps()]
    }

    /// States at `t_0..t_{K−1}` stacked time-major: row `k m + i`.
    pub fn stacked_states(&self) -> Matrix {
        stack(&self.states[..self.steps()])
    }

    /// Times matching [`TrajectoryBatch::stacked_states`].
    pub fn stacked_times(&self) -> Vec<f64> {
        let m = self.batch_size();
        let mut t = Vec::with_capacity(m * self.steps());
        for k in 0..self.steps() {
            t.extend(core::iter::repeat(self.times[k]).take(m));
        }
        t
    }

    pub fn stacked_controls(&self) -> Matrix {
        stack(&self.controls)
    }

    /// Recompute every step from the stored increments and controls and
    /// compare bitwise.
    pub fn replays_exactly(&self, spec: &ProblemSpec) -> bool {
        let dt = self.dt();
        (0..self.steps()).all(|k| {
            euler_step(
                spec,
                &self.states[k],
                &self.controls[k],
                &self.increments[k],
                self.times[k],
                dt,
            ) == self.states[k + 1]
        })
    }
}

pub(crate) fn stack(blocks: &[Matrix]) -> Matrix {
    if blocks.is_empty() {
        return Matrix::zeros(0, 0);
    }
    let cols = blocks[0].cols();
    let mut data = Vec::with_capacity(blocks.iter().map(|b| b.len()).sum());
    for b in blocks {
        data.extend_from_slice(b.as_slice());
    }
    let rows = data.len() / cols.max(1);
    Matrix::from_vec(rows, cols, data)
}

/// Roll out `policy` from `x0` with the given increments. Gradients do not
/// flow through the result.
pub fn rollout(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    x0: &Matrix,
    increments: &[Matrix],
) -> Result<TrajectoryBatch> {
    rollout_window(spec, policy, x0, 0.0, increments)
}

/// As [`rollout`], starting at time `start` instead of 0. The increments
/// must have variance `(T − start)/K`.
pub fn rollout_window(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    x0: &Matrix,
    start: f64,
    increments: &[Matrix],
) -> Result<TrajectoryBatch> {
    let steps = increments.len();
    let m = x0.rows();
    if x0.cols() != spec.dim() || policy.dim() != spec.dim() {
        return Err(contract("initial states and control must match the problem dimension"));
    }
    if increments.iter().any(|inc| inc.shape() != (m, spec.dim())) {
        return Err(contract("increments must be m x d per step"));
    }
    if !(0.0..=spec.horizon()).contains(&start) {
        return Err(contract("rollout start must lie in [0, T]"));
    }
    let times = window_grid(start, spec.horizon(), steps);
    let dt = (spec.horizon() - start) / steps.max(1) as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    if let Some(i) = first_non_finite(x0) {
        return Err(Error::SimulationDiverged { trajectory: i, step: 0 });
    }
    states.push(x0.clone());
    for k in 0..steps {
        let u = policy.eval_at(&states[k], times[k]);
        let next = euler_step(spec, &states[k], &u, &increments[k], times[k], dt);
        if let Some(i) = first_non_finite(&next) {
            return Err(Error::SimulationDiverged {
                trajectory: i,
                step: k + 1,
            });
        }
        controls.push(u);
        states.push(next);
    }
    Ok(TrajectoryBatch {
        dt,
        noise_level: spec.noise_level(),
        times,
        states,
        increments: increments.to_vec(),
        controls,
        detached: true,
    })
}

/// Convenience: sample noise from `seeds` and roll out.
pub fn rollout_seeded(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    m: usize,
    steps: usize,
    seeds: &SeedStream,
) -> Result<TrajectoryBatch> {
    let noise = BatchNoise::sample(spec, m, steps, seeds);
    rollout(spec, policy, &noise.x0, &noise.increments)
}

struct EulerOp<'a> {
    spec: &'a ProblemSpec,
    t: f64,
    dt: f64,
}

impl CustomOp for EulerOp<'_> {
    fn name(&self) -> &'static str {
        "euler_step"
    }

    fn vjp(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        let x = inputs[0];
        let d = x.cols();
        let model = self.spec.model();
        let gx = needs[0].then(|| {
            let mut gx = Matrix::zeros(x.rows(), d);
            let mut jg = vec![0.0; d];
            for i in 0..x.rows() {
                model.drift_jacobian_mul(x.row(i), self.t, grad.row(i), &mut jg);
                for ((o, g), j) in gx.row_mut(i).iter_mut().zip(grad.row(i)).zip(&jg) {
                    *o = g + self.dt * j;
                }
            }
            gx
        });
        let gu = needs[1].then(|| {
            let sigma = model.diffusion(self.t);
            let mut gu = Matrix::zeros(x.rows(), d);
            for i in 0..x.rows() {
                sigma.tr_mul_vec(grad.row(i), gu.row_mut(i));
                for v in gu.row_mut(i) {
                    *v *= self.dt;
                }
            }
            gu
        });
        vec![gx, gu]
    }
}

/// A rollout recorded on a tape, for losses that differentiate through the
/// dynamics.
pub struct AttachedRollout {
    pub states: Vec<Var>,
    pub controls: Vec<Var>,
    pub times: Vec<f64>,
}

/// Same arithmetic as [`rollout`], recorded on `tape`. Checks the tape's
/// element budget after every step.
pub fn rollout_on_tape<'a>(
    tape: &mut Tape<'a>,
    spec: &'a ProblemSpec,
    policy: &'a ControlPolicy,
    policy_vars: &[Var],
    x0: &Matrix,
    increments: &[Matrix],
) -> Result<AttachedRollout> {
    let steps = increments.len();
    let m = x0.rows();
    let times = time_grid(spec.horizon(), steps);
    let dt = spec.horizon() / steps.max(1) as f64;
    let mut states = vec![tape.constant(x0.clone())];
    let mut controls = Vec::with_capacity(steps);
    let tcols: Vec<Vec<f64>> = times.iter().map(|&t| vec![t; m]).collect();
    for k in 0..steps {
        let xk = states[k];
        let u = policy.forward_tape(tape, policy_vars, xk, &tcols[k]);
        let next = euler_step(spec, tape.value(xk), tape.value(u), &increments[k], times[k], dt);
        if let Some(i) = first_non_finite(&next) {
            return Err(Error::SimulationDiverged {
                trajectory: i,
                step: k + 1,
            });
        }
        let op = EulerOp { spec, t: times[k], dt };
        let xn = tape.custom(Box::new(op), vec![xk, u], next);
        controls.push(u);
        states.push(xn);
        tape.check_budget()?;
    }
    Ok(AttachedRollout {
        states,
        controls,
        times,
    })
}

struct RunningCostOp<'a> {
    spec: &'a ProblemSpec,
    t: f64,
}

impl CustomOp for RunningCostOp<'_> {
    fn name(&self) -> &'static str {
        "state_cost"
    }

    fn vjp(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let mut gx = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.spec.model().state_cost_grad(x.row(i), self.t, gx.row_mut(i));
            let g = grad.as_slice()[i];
            for v in gx.row_mut(i) {
                *v *= g;
            }
        }
        vec![Some(gx)]
    }
}

/// `f(x_i, t)` per row as an `m × 1` node.
pub fn state_cost_on_tape<'a>(tape: &mut Tape<'a>, spec: &'a ProblemSpec, x: Var, t: f64) -> Var {
    let xv = tape.value(x);
    let vals: Vec<f64> = (0..xv.rows()).map(|i| spec.state_cost(xv.row(i), t)).collect();
    tape.custom(Box::new(RunningCostOp { spec, t }), vec![x], Matrix::column(&vals))
}

struct TerminalCostOp<'a> {
    spec: &'a ProblemSpec,
}

impl CustomOp for TerminalCostOp<'_> {
    fn name(&self) -> &'static str {
        "terminal_cost"
    }

    fn vjp(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let mut gx = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.spec.model().terminal_cost_grad(x.row(i), gx.row_mut(i));
            let g = grad.as_slice()[i];
            for v in gx.row_mut(i) {
                *v *= g;
            }
        }
        vec![Some(gx)]
    }
}

/// `g(x_i)` per row as an `m × 1` node.
pub fn terminal_cost_on_tape<'a>(tape: &mut Tape<'a>, spec: &'a ProblemSpec, x: Var) -> Var {
    let xv = tape.value(x);
    let vals: Vec<f64> = (0..xv.rows()).map(|i| spec.terminal_cost(xv.row(i))).collect();
    tape.custom(Box::new(TerminalCostOp { spec }), vec![x], Matrix::column(&vals))
}

/// `Δt Σ_{k ≥ k₀} f(X_k, t_k) + g(X_K)` per trajectory.
pub fn work_functional(spec: &ProblemSpec, traj: &TrajectoryBatch, start: usize) -> Vec<f64> {
    let m = traj.batch_size();
    let steps = traj.steps();
    let dt = traj.dt();
    let model = spec.model();
    (0..m)
        .map(|i| {
            let mut running = 0.0;
            if model.has_state_cost() {
                for k in start.min(steps)..steps {
                    running += model.state_cost(traj.state(i, k), traj.times[k]);
                }
            }
            dt * running + model.terminal_cost(traj.state(i, steps))
        })
        .collect()
}

/// Itô sums `Σ_k ⟨integrand_k, ΔB_k⟩` per row.
pub fn stochastic_integral(integrand: &[Matrix], increments: &[Matrix]) -> Result<Vec<f64>> {
    if integrand.len() != increments.len() || integrand.iter().zip(increments).any(|(a, b)| a.shape() != b.shape()) {
        return Err(contract("integrand and increments must have matching shapes"));
    }
    let m = increments.first().map_or(0, |b| b.rows());
    let mut out = vec![0.0; m];
    for (u, db) in integrand.iter().zip(increments) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += u.row(i).iter().zip(db.row(i)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

/// `Δt Σ_k |u_k|²` per row.
pub fn energy(integrand: &[Matrix], dt: f64) -> Vec<f64> {
    let m = integrand.first().map_or(0, |b| b.rows());
    let mut out = vec![0.0; m];
    for u in integrand {
        for (i, o) in out.iter_mut().enumerate() {
            *o += u.row(i).iter().map(|a| a * a).sum::<f64>();
        }
    }
    out.iter_mut().for_each(|o| *o *= dt);
    out
}

/// Largest exponent that does not overflow.
pub const LOG_MAX: f64 = 709.782712893384;

/// Importance weights of a batch rolled out under its recorded controls.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceWeights {
    pub log_alpha: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Weights whose exponent overflowed; they are `+∞`.
    pub saturated: usize,
}

/// `log dP/dP^v = −λ^{−1/2} Σ⟨v, ΔB⟩ − (λ⁻¹/2) Δt Σ|v|²` per trajectory.
pub fn log_girsanov(traj: &TrajectoryBatch) -> Vec<f64> {
    let lambda = traj.noise_level;
    let ito = stochastic_integral(&traj.controls, &traj.increments).expect("batch shapes are consistent");
    let en = energy(&traj.controls, traj.dt());
    ito.iter()
        .zip(&en)
        .map(|(a, e)| -a / libm::sqrt(lambda) - 0.5 * e / lambda)
        .collect()
}

/// `α = exp(−λ⁻¹ W(X, 0) − λ^{−1/2} Σ⟨v, ΔB⟩ − (λ⁻¹/2) Δt Σ|v|²)`, formed in
/// log space.
pub fn importance_weight(spec: &ProblemSpec, traj: &TrajectoryBatch) -> ImportanceWeights {
    let lambda = spec.noise_level();
    let w = work_functional(spec, traj, 0);
    let lg = log_girsanov(traj);
    let log_alpha: Vec<f64> = w.iter().zip(&lg).map(|(w, l)| -w / lambda + l).collect();
    let mut saturated = 0;
    let alpha = log_alpha
        .iter()
        .map(|&l| {
            if l > LOG_MAX {
                saturated += 1;
                f64::INFINITY
            } else {
                libm::exp(l)
            }
        })
        .collect();
    ImportanceWeights {
        log_alpha,
        alpha,
        saturated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::expm;
    use crate::problem::{Dynamics, InitialLaw, LinearQuadratic};
    use alloc::sync::Arc;

    fn brownian(d: usize) -> ProblemSpec {
        let model = LinearQuadratic::isotropic(d, 0.0, 0.0, 0.0);
        ProblemSpec::new("bm", Arc::new(model), 1.0, 1.0, InitialLaw::Point(vec![0.5; d])).unwrap()
    }

    #[test]
    fn increments_are_reproducible_and_scaled() {
        let s = SeedStream::new(3);
        assert_eq!(sample_increments(4, 5, 2, 1.0, &s), sample_increments(4, 5, 2, 1.0, &s));
        assert!(sample_increments(4, 0, 2, 1.0, &s).is_empty());
        let inc = sample_increments(10_000, 1, 1, 1.0, &s);
        let v = inc[0].as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(mean.abs() < 4.0 / 100.0);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn trajectory_streams_do_not_depend_on_batch_size() {
        let s = SeedStream::new(9);
        let small = sample_increments(3, 4, 2, 1.0, &s);
        let large = sample_increments(7, 4, 2, 1.0, &s);
        for k in 0..4 {
            for i in 0..3 {
                assert_eq!(small[k].row(i), large[k].row(i));
            }
        }
    }

    #[test]
    fn pure_brownian_motion_sums_increments() {
        let spec = brownian(2);
        let s = SeedStream::new(1);
        let traj = rollout_seeded(&spec, &ControlPolicy::Zero { dim: 2 }, 5, 20, &s).unwrap();
        for i in 0..5 {
            for j in 0..2 {
                let sum: f64 = traj.increments.iter().map(|b| b[(i, j)]).sum();
                let want = 0.5 + sum;
                assert!((traj.terminal()[(i, j)] - want).abs() < 1e-13);
            }
        }
        assert!(traj.replays_exactly(&spec));
    }

    struct Constant(Vec<f64>);
    impl crate::policy::ControlField for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn control(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
            out.copy_from_slice(&self.0);
        }
    }

    #[test]
    fn constant_control_without_noise_drifts_linearly() {
        let spec = brownian(2);
        let policy = ControlPolicy::ClosedForm(Arc::new(Constant(vec![1.5, -2.0])));
        let x0 = Matrix::filled(1, 2, 0.5);
        let inc = vec![Matrix::zeros(1, 2); 8];
        let traj = rollout(&spec, &policy, &x0, &inc).unwrap();
        assert!((traj.terminal()[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((traj.terminal()[(0, 1)] + 1.5).abs() < 1e-14);
    }

    #[test]
    fn linear_drift_matches_matrix_exponential() {
        let a = Matrix::from_rows(&[&[-0.5, 0.3], &[0.2, 0.1]]);
        let d = 2;
        let model = LinearQuadratic::new(
            a.clone(),
            Matrix::zeros(d, d),
            Matrix::zeros(d, d),
            vec![0.0; d],
            Matrix::identity(d),
        )
        .unwrap();
        let spec = ProblemSpec::new("lin", Arc::new(model), 1.0, 1.0, InitialLaw::Point(vec![1.0, -1.0])).unwrap();
        let x0 = Matrix::row_vector(&[1.0, -1.0]);
        let inc = vec![Matrix::zeros(1, 2); 10_000];
        let traj = rollout(&spec, &ControlPolicy::Zero { dim: 2 }, &x0, &inc).unwrap();
        let mut want = [0.0; 2];
        expm(&a).mul_vec(&[1.0, -1.0], &mut want);
        for j in 0..2 {
            assert!((traj.terminal()[(0, j)] - want[j]).abs() <= 1e-3 * want[j].abs());
        }
    }

    #[test]
    fn divergence_reports_first_bad_trajectory() {
        let model = LinearQuadratic::isotropic(1, 1e6, 0.0, 0.0);
        let spec = ProblemSpec::new("blow", Arc::new(model), 1.0, 1.0, InitialLaw::Point(vec![1.0])).unwrap();
        let x0 = Matrix::column(&[0.0, 1.0]);
        let inc = vec![Matrix::zeros(2, 1); 200];
        match rollout(&spec, &ControlPolicy::Zero { dim: 1 }, &x0, &inc) {
            Err(Error::SimulationDiverged { trajectory, .. }) => assert_eq!(trajectory, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    struct Unit;
    impl Dynamics for Unit {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn drift_jacobian(&self, _x: &[f64], _t: f64) -> Matrix {
            Matrix::zeros(1, 1)
        }
        fn state_cost(&self, x: &[f64], _t: f64) -> f64 {
            x[0] * x[0]
        }
        fn state_cost_grad(&self, x: &[f64], _t: f64, out: &mut [f64]) {
            out[0] = 2.0 * x[0];
        }
        fn terminal_cost(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn terminal_cost_grad(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn diffusion(&self, _t: f64) -> Matrix {
            Matrix::identity(1)
        }
        fn diffusion_inv(&self, _t: f64) -> Matrix {
            Matrix::identity(1)
        }
    }

    fn fixed_path(steps: usize) -> TrajectoryBatch {
        let times = time_grid(1.0, steps);
        TrajectoryBatch {
            dt: 1.0 / steps as f64,
            noise_level: 1.0,
            states: times.iter().map(|&t| Matrix::scalar(t)).collect(),
            times,
            increments: vec![Matrix::zeros(1, 1); steps],
            controls: vec![Matrix::zeros(1, 1); steps],
            detached: true,
        }
    }

    #[test]
    fn work_functional_riemann_sum() {
        let spec = ProblemSpec::new("unit", Arc::new(Unit), 1.0, 1.0, InitialLaw::Point(vec![0.0])).unwrap();
        let w = work_functional(&spec, &fixed_path(10_000), 0);
        assert!((w[0] - 1.0 / 3.0).abs() < 2e-4);
    }

    #[test]
    fn work_functional_of_unit_cost_is_horizon() {
        let model = LinearQuadratic::new(
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            vec![0.0],
            Matrix::identity(1),
        )
        .unwrap();
        struct One(LinearQuadratic);
        impl Dynamics for One {
            fn dim(&self) -> usize {
                1
            }
            fn drift(&self, x: &[f64], t: f64, out: &mut [f64]) {
                self.0.drift(x, t, out)
            }
            fn drift_jacobian(&self, x: &[f64], t: f64) -> Matrix {
                self.0.drift_jacobian(x, t)
            }
            fn state_cost(&self, _x: &[f64], _t: f64) -> f64 {
                1.0
            }
            fn state_cost_grad(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn terminal_cost(&self, _x: &[f64]) -> f64 {
                0.0
            }
            fn terminal_cost_grad(&self, _x: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn diffusion(&self, t: f64) -> Matrix {
                self.0.diffusion(t)
            }
            fn diffusion_inv(&self, t: f64) -> Matrix {
                self.0.diffusion_inv(t)
            }
        }
        let spec = ProblemSpec::new("one", Arc::new(One(model)), 1.0, 1.0, InitialLaw::Point(vec![0.0])).unwrap();
        let w = work_functional(&spec, &fixed_path(10), 0);
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn stochastic_integral_of_constant_telescopes() {
        let inc = sample_increments(3, 50, 1, 1.0, &SeedStream::new(4));
        let c: Vec<Matrix> = (0..50).map(|_| Matrix::filled(3, 1, 2.5)).collect();
        let got = stochastic_integral(&c, &inc).unwrap();
        for i in 0..3 {
            let b: f64 = inc.iter().map(|m| m[(i, 0)]).sum();
            assert!((got[i] - 2.5 * b).abs() < 1e-12);
        }
        let zero: Vec<Matrix> = (0..50).map(|_| Matrix::zeros(3, 1)).collect();
        assert!(stochastic_integral(&zero, &inc).unwrap().iter().all(|&v| v == 0.0));
        assert!(stochastic_integral(&zero[..2], &inc).is_err());
    }

    #[test]
    fn weights_without_costs_or_control_are_one() {
        let spec = brownian(2);
        let traj = rollout_seeded(&spec, &ControlPolicy::Zero { dim: 2 }, 6, 10, &SeedStream::new(0)).unwrap();
        let w = importance_weight(&spec, &traj);
        assert!(w.alpha.iter().all(|&a| a == 1.0));
        assert_eq!(w.saturated, 0);
    }

    #[test]
    fn attached_rollout_is_bitwise_identical_to_detached() {
        use crate::nn::ControlNet;
        let spec = brownian(2);
        let mut net = ControlNet::new(2, 8, &SeedStream::new(2));
        let mut r = SeedStream::new(2).substream(8, 8);
        for p in net.params_mut() {
            for v in p.as_mut_slice() {
                *v = 0.3 * rng::standard_normal(&mut r);
            }
        }
        let policy = ControlPolicy::Neural(net);
        let noise = BatchNoise::sample(&spec, 4, 12, &SeedStream::new(5));
        let traj = rollout(&spec, &policy, &noise.x0, &noise.increments).unwrap();
        let mut tape = Tape::new();
        let vars = policy.register(&mut tape, true);
        let att = rollout_on_tape(&mut tape, &spec, &policy, &vars, &noise.x0, &noise.increments).unwrap();
        for k in 0..=12 {
            assert_eq!(tape.value(att.states[k]), &traj.states[k]);
        }
    }
}

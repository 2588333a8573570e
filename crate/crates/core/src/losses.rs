//! Training losses, the matching vector field, and the path-wise and
//! adjoint gradient estimators.
//!
//! Stacked quantities are time-major: row `k m + i` belongs to trajectory
//! `i` at `t_k`, for `k < K`.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::policy::ControlPolicy;
use crate::problem::ProblemSpec;
use crate::reparam::ReparamMatrices;
use crate::rng::SeedStream;
use crate::sim::{
    importance_weight, rollout_on_tape, rollout_window, sample_increments, stack, work_functional, BatchNoise,
    ImportanceWeights, TrajectoryBatch,
};

/// Loss names as accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Adjoint,
    CrossEntropy,
    Variance,
    LogVariance,
    Moment,
    Socm,
    SocmIdentity,
    SocmAdjoint,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Adjoint,
        LossKind::CrossEntropy,
        LossKind::Variance,
        LossKind::LogVariance,
        LossKind::Moment,
        LossKind::Socm,
        LossKind::SocmIdentity,
        LossKind::SocmAdjoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Adjoint => "adjoint",
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Variance => "variance",
            LossKind::LogVariance => "log_variance",
            LossKind::Moment => "moment",
            LossKind::Socm => "socm",
            LossKind::SocmIdentity => "socm_id",
            LossKind::SocmAdjoint => "socm_adjoint",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(alloc::format!(
                "unknown loss `{name}`; expected one of {}",
                names.join(", ")
            ))
        })
    }

    /// Only `socm` trains reparameterization matrices.
    pub fn learns_matrices(self) -> bool {
        self == LossKind::Socm
    }

    /// Only the adjoint loss differentiates through the rollout.
    pub fn needs_graph(self) -> bool {
        self == LossKind::Adjoint
    }
}

/// A loss estimate and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// One entry per control parameter; empty for parameter-free controls.
    pub control_grad: Vec<Matrix>,
    /// One entry per matrix parameter; empty unless matrices are learned.
    pub matrices_grad: Vec<Matrix>,
    pub y0_grad: Option<f64>,
    /// Per-trajectory contributions. For the mean-type losses their average
    /// is the estimate; for the variance losses they are the scalars whose
    /// spread is measured.
    pub samples: Vec<f64>,
    /// Importance weights whose exponent overflowed.
    pub saturated: usize,
}

/// Per-path ingredients of the matching field.
#[derive(Clone, Debug)]
pub struct MatchingInputs {
    pub batch: usize,
    pub dim: usize,
    /// `(t_k, t_j)` for `k < K`, `j = k..=K`, grouped by `k`.
    pub pairs: Vec<(f64, f64)>,
    offsets: Vec<usize>,
    /// `c_j = ∇ₓb(X_j) z_j − ∇ₓf(X_j) Δt` for `j < K` and `c_K = −∇g(X_K)`.
    c: Vec<Matrix>,
    /// `z_j = σ_j^{−T} (v_j Δt + √λ ΔB_j)`.
    z: Vec<Matrix>,
    sigma: Vec<Matrix>,
}

impl MatchingInputs {
    pub fn new(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Self {
        let m = traj.batch_size();
        let d = traj.dim();
        let steps = traj.steps();
        let dt = traj.dt();
        let sl = libm::sqrt(spec.noise_level());
        let model = spec.model();
        let mut c = Vec::with_capacity(steps + 1);
        let mut z = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        let mut q = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut gf = vec![0.0; d];
        for j in 0..steps {
            let t = traj.times[j];
            let sinv = model.diffusion_inv(t);
            let mut zj = Matrix::zeros(m, d);
            let mut cj = Matrix::zeros(m, d);
            for i in 0..m {
                let v = traj.controls[j].row(i);
                let db = traj.increments[j].row(i);
                for a in 0..d {
                    q[a] = v[a] * dt + sl * db[a];
                }
                sinv.tr_mul_vec(&q, zj.row_mut(i));
                let x = traj.state(i, j);
                model.drift_jacobian_mul(x, t, zj.row(i), &mut y);
                if model.has_state_cost() {
                    model.state_cost_grad(x, t, &mut gf);
                } else {
                    gf.fill(0.0);
                }
                for (o, (yv, g)) in cj.row_mut(i).iter_mut().zip(y.iter().zip(&gf)) {
                    *o = yv - g * dt;
                }
            }
            z.push(zj);
            c.push(cj);
            sigma.push(model.diffusion(t));
        }
        let mut ck = Matrix::zeros(m, d);
        for i in 0..m {
            model.terminal_cost_grad(traj.state(i, steps), ck.row_mut(i));
        }
        c.push(ck.scale(-1.0));

        let mut pairs = Vec::new();
        let mut offsets = Vec::with_capacity(steps);
        for k in 0..steps {
            offsets.push(pairs.len());
            for j in k..=steps {
                pairs.push((traj.times[k], traj.times[j]));
            }
        }
        Self {
            batch: m,
            dim: d,
            pairs,
            offsets,
            c,
            z,
            sigma,
        }
    }

    pub fn steps(&self) -> usize {
        self.z.len()
    }

    fn block(&self, vals: &Matrix, k: usize, j: usize) -> Matrix {
        let d = self.dim;
        Matrix::from_vec(d, d, vals.row(self.offsets[k] + j - k).to_vec())
    }

    /// `S_k = Σ_{j ≥ k} M_kj c_j − Σ_{j ≥ k, j < K} Ṁ_kj z_j`, one row per
    /// trajectory, accumulated from `j = K` down.
    fn s_block(&self, k: usize, mvals: &Matrix, mdot: &Matrix) -> Matrix {
        let steps = self.steps();
        let mut s = Matrix::zeros(self.batch, self.dim);
        for j in (k..=steps).rev() {
            gemm(1.0, &self.c[j], false, &self.block(mvals, k, j), true, 1.0, &mut s);
            if j < steps {
                gemm(-1.0, &self.z[j], false, &self.block(mdot, k, j), true, 1.0, &mut s);
            }
        }
        s
    }

    /// `S_k` for every `k` with `M = Id`, by suffix sums.
    fn s_identity(&self) -> Vec<Matrix> {
        let steps = self.steps();
        let mut out = vec![Matrix::zeros(0, 0); steps];
        let mut acc = self.c[steps].clone();
        for k in (0..steps).rev() {
            acc.add_assign(&self.c[k]);
            out[k] = acc.clone();
        }
        out
    }

    /// `w_k = σ_kᵀ S_k`, stacked.
    fn field(&self, s: &[Matrix]) -> Matrix {
        let blocks: Vec<Matrix> = s.iter().zip(&self.sigma).map(|(sk, sig)| sk.matmul(sig)).collect();
        stack(&blocks)
    }

    pub fn field_identity(&self) -> Matrix {
        self.field(&self.s_identity())
    }

    pub fn field_with(&self, mvals: &Matrix, mdot: &Matrix) -> Matrix {
        let s: Vec<Matrix> = (0..self.steps()).map(|k| self.s_block(k, mvals, mdot)).collect();
        self.field(&s)
    }
}

struct MatchingFieldOp {
    inputs: MatchingInputs,
}

impl CustomOp for MatchingFieldOp {
    fn name(&self) -> &'static str {
        "matching_field"
    }

    fn vjp(&self, _inputs: &[&Matrix], _output: &Matrix, grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        let inp = &self.inputs;
        let (m, d) = (inp.batch, inp.dim);
        let steps = inp.steps();
        let p = inp.pairs.len();
        let mut gm = needs[0].then(|| Matrix::zeros(p, d * d));
        let mut gmd = needs[1].then(|| Matrix::zeros(p, d * d));
        let mut out = Matrix::zeros(d, d);
        for k in 0..steps {
            let gk = Matrix::from_vec(m, d, grad.as_slice()[k * m * d..(k + 1) * m * d].to_vec());
            let r = gk.matmul(&inp.sigma[k].transpose());
            for j in k..=steps {
                let row = inp.offsets[k] + j - k;
                if let Some(gm) = gm.as_mut() {
                    gemm(1.0, &r, true, &inp.c[j], false, 0.0, &mut out);
                    gm.row_mut(row).copy_from_slice(out.as_slice());
                }
                if j < steps {
                    if let Some(gmd) = gmd.as_mut() {
                        gemm(-1.0, &r, true, &inp.z[j], false, 0.0, &mut out);
                        gmd.row_mut(row).copy_from_slice(out.as_slice());
                    }
                }
            }
        }
        vec![gm, gmd]
    }
}

fn require_detached(traj: &TrajectoryBatch) -> Result<()> {
    if traj.detached {
        Ok(())
    } else {
        Err(contract("this loss needs a detached trajectory batch"))
    }
}

/// The matching vector field `w(t_k)` for every trajectory and `k < K`,
/// stacked. Uses suffix sums when `M = Id`.
pub fn matching_field(spec: &ProblemSpec, traj: &TrajectoryBatch, mats: &ReparamMatrices) -> Result<Matrix> {
    require_detached(traj)?;
    let inp = MatchingInputs::new(spec, traj);
    Ok(match mats {
        ReparamMatrices::Identity { .. } => inp.field_identity(),
        ReparamMatrices::Gated(_) => {
            let (mv, md) = mats.values(&inp.pairs);
            inp.field_with(&mv, &md)
        }
    })
}

/// The matching field as a tape node depending on the matrix parameters.
pub fn matching_field_on_tape<'a>(
    tape: &mut Tape<'a>,
    spec: &ProblemSpec,
    traj: &TrajectoryBatch,
    mats: &ReparamMatrices,
    mat_vars: &[Var],
) -> Result<Var> {
    require_detached(traj)?;
    let inp = MatchingInputs::new(spec, traj);
    match mats {
        ReparamMatrices::Identity { .. } => Ok(tape.constant(inp.field_identity())),
        ReparamMatrices::Gated(net) => {
            let (mv, md) = net.forward_tape(tape, mat_vars, &inp.pairs);
            let value = inp.field_with(tape.value(mv), tape.value(md));
            tape.check_budget()?;
            Ok(tape.custom(Box::new(MatchingFieldOp { inputs: inp }), vec![mv, md], value))
        }
    }
}

/// `a_K = ∇g(X_K)`, `a_k = a_{k+1} + Δt (∇ₓb(X_k) a_{k+1} + ∇ₓf(X_k))`
/// along each frozen path. Returns `K + 1` matrices of shape `m × d`.
pub fn adjoint_ode_solve(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Vec<Matrix> {
    let m = traj.batch_size();
    let d = traj.dim();
    let steps = traj.steps();
    let dt = traj.dt();
    let model = spec.model();
    let mut out = vec![Matrix::zeros(m, d); steps + 1];
    for i in 0..m {
        model.terminal_cost_grad(traj.state(i, steps), out[steps].row_mut(i));
    }
    let mut ja = vec![0.0; d];
    let mut gf = vec![0.0; d];
    for k in (0..steps).rev() {
        let t = traj.times[k];
        let mut ak = Matrix::zeros(m, d);
        for i in 0..m {
            let x = traj.state(i, k);
            let next = out[k + 1].row(i);
            model.drift_jacobian_mul(x, t, next, &mut ja);
            if model.has_state_cost() {
                model.state_cost_grad(x, t, &mut gf);
            } else {
                gf.fill(0.0);
            }
            for (a, o) in ak.row_mut(i).iter_mut().enumerate() {
                *o = next[a] + dt * (ja[a] + gf[a]);
            }
        }
        out[k] = ak;
    }
    out
}

/// `−σ(t_k)ᵀ a(t_k)`, stacked, the target field of the adjoint variant of
/// the matching loss.
pub fn adjoint_field(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Matrix {
    let a = adjoint_ode_solve(spec, traj);
    let blocks: Vec<Matrix> = (0..traj.steps())
        .map(|k| a[k].matmul(&spec.model().diffusion(traj.times[k])).scale(-1.0))
        .collect();
    stack(&blocks)
}

/// Sample mean and standard error per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl Estimate {
    /// Column means and `std/√m` of the rows of `samples`.
    pub fn from_rows(samples: &Matrix) -> Self {
        let m = samples.rows();
        let d = samples.cols();
        let mf = m as f64;
        let mut mean = vec![0.0; d];
        let mut se = vec![0.0; d];
        for j in 0..d {
            let mu = (0..m).map(|i| samples[(i, j)]).sum::<f64>() / mf;
            let var = (0..m)
                .map(|i| (samples[(i, j)] - mu) * (samples[(i, j)] - mu))
                .sum::<f64>()
                / (mf - 1.0);
            mean[j] = mu;
            se[j] = libm::sqrt(var / mf);
        }
        Self { mean, se }
    }
}

/// Per path, `λ⁻¹ [Σ_j M_0j c_j − Σ_j Ṁ_0j z_j]` with `M_0j = M_{t_0}(t_j)`.
/// For a path started at `(x, t_0)` under zero control its weighted mean is
/// `∇ₓ E[e^{−W/λ} | X_{t_0} = x]` after multiplying by `e^{−W/λ}`.
pub fn pathwise_samples(spec: &ProblemSpec, traj: &TrajectoryBatch, mats: &ReparamMatrices) -> Result<Matrix> {
    require_detached(traj)?;
    let inp = MatchingInputs::new(spec, traj);
    let s0 = if inp.steps() == 0 {
        inp.c[0].clone()
    } else {
        match mats {
            ReparamMatrices::Identity { .. } => inp.s_identity().swap_remove(0),
            ReparamMatrices::Gated(_) => {
                let pairs = &inp.pairs[..inp.steps() + 1];
                let (mv, md) = mats.values(pairs);
                inp.s_block(0, &mv, &md)
            }
        }
    };
    Ok(s0.scale(1.0 / spec.noise_level()))
}

/// Monte Carlo estimate of `∇ₓ E[e^{−W(X,t)/λ} | X_t = x]` by the path-wise
/// reparameterization trick over `m` uncontrolled paths of `steps` steps.
pub fn pathwise_grad_estimator(
    spec: &ProblemSpec,
    x: &[f64],
    t: f64,
    mats: &ReparamMatrices,
    m: usize,
    steps: usize,
    seeds: &SeedStream,
) -> Result<Estimate> {
    let traj = uncontrolled_from(spec, x, t, m, steps, seeds)?;
    let samples = pathwise_samples(spec, &traj, mats)?;
    Ok(Estimate::from_rows(&weighted(spec, &traj, samples)))
}

/// The same quantity as [`pathwise_grad_estimator`] from the adjoint state:
/// `E[−λ⁻¹ a_0 e^{−W/λ}]`.
pub fn adjoint_grad_estimator(
    spec: &ProblemSpec,
    x: &[f64],
    t: f64,
    m: usize,
    steps: usize,
    seeds: &SeedStream,
) -> Result<Estimate> {
    let traj = uncontrolled_from(spec, x, t, m, steps, seeds)?;
    let a0 = adjoint_ode_solve(spec, &traj).swap_remove(0);
    let samples = a0.scale(-1.0 / spec.noise_level());
    Ok(Estimate::from_rows(&weighted(spec, &traj, samples)))
}

/// `m` uncontrolled paths from `(x, t)` to `T`.
pub fn uncontrolled_from(
    spec: &ProblemSpec,
    x: &[f64],
    t: f64,
    m: usize,
    steps: usize,
    seeds: &SeedStream,
) -> Result<TrajectoryBatch> {
    let d = spec.dim();
    let x0 = Matrix::from_fn(m, d, |_, j| x[j]);
    let inc = sample_increments(m, steps, d, spec.horizon() - t, seeds);
    rollout_window(spec, &ControlPolicy::Zero { dim: d }, &x0, t, &inc)
}

fn weighted(spec: &ProblemSpec, traj: &TrajectoryBatch, mut samples: Matrix) -> Matrix {
    let lambda = spec.noise_level();
    let w = work_functional(spec, traj, 0);
    for (i, wi) in w.iter().enumerate() {
        let e = libm::exp(-wi / lambda);
        for v in samples.row_mut(i) {
            *v *= e;
        }
    }
    samples
}

/// Importance weights of a detached batch, failing when every weight
/// overflowed.
pub fn checked_weights(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Result<ImportanceWeights> {
    let w = importance_weight(spec, traj);
    if w.saturated > 0 && w.saturated == w.alpha.len() {
        return Err(Error::DegenerateWeights);
    }
    Ok(w)
}

/// Nodes of the matching loss on a tape.
pub struct SocmNodes {
    pub loss: Var,
    /// `‖u − w‖²` per stacked row.
    pub residual: Var,
    pub weights: ImportanceWeights,
}

fn control_on_stack<'a>(tape: &mut Tape<'a>, u: &'a ControlPolicy, u_vars: &[Var], traj: &TrajectoryBatch) -> Var {
    let x = tape.constant(traj.stacked_states());
    u.forward_tape(tape, u_vars, x, &traj.stacked_times())
}

/// `(1/m) Σ_i [(1/K) Σ_k ‖u(X_k, t_k) − target_k‖²] α_i`.
fn weighted_least_squares<'a>(
    tape: &mut Tape<'a>,
    spec: &ProblemSpec,
    u: &'a ControlPolicy,
    u_vars: &[Var],
    target: Var,
    traj: &TrajectoryBatch,
) -> Result<SocmNodes> {
    let weights = checked_weights(spec, traj)?;
    let m = traj.batch_size();
    let steps = traj.steps();
    let uk = control_on_stack(tape, u, u_vars, traj);
    let diff = tape.sub(uk, target);
    let sq = tape.square(diff);
    let residual = tape.row_sum(sq);
    let scale = 1.0 / (m * steps.max(1)) as f64;
    let col: Vec<f64> = (0..m * steps).map(|r| weights.alpha[r % m] * scale).collect();
    let wc = tape.constant(Matrix::column(&col));
    let prod = tape.mul(residual, wc);
    let loss = tape.sum(prod);
    tape.check_budget()?;
    Ok(SocmNodes {
        loss,
        residual,
        weights,
    })
}

/// The matching loss with the field built from `mats` on the tape.
pub fn socm_on_tape<'a>(
    tape: &mut Tape<'a>,
    spec: &ProblemSpec,
    u: &'a ControlPolicy,
    u_vars: &[Var],
    mats: &ReparamMatrices,
    mat_vars: &[Var],
    traj: &TrajectoryBatch,
) -> Result<SocmNodes> {
    let w = matching_field_on_tape(tape, spec, traj, mats, mat_vars)?;
    weighted_least_squares(tape, spec, u, u_vars, w, traj)
}

fn per_trajectory(tape: &Tape<'_>, residual: Var, alpha: &[f64], steps: usize) -> Vec<f64> {
    let r = tape.value(residual).as_slice();
    let m = alpha.len();
    (0..m)
        .map(|i| {
            let s: f64 = (0..steps).map(|k| r[k * m + i]).sum();
            s / steps.max(1) as f64 * alpha[i]
        })
        .collect()
}

/// Matching loss and gradients in the control and, for learned matrices,
/// in the matrix parameters.
pub fn loss_socm(
    spec: &ProblemSpec,
    u: &ControlPolicy,
    mats: &ReparamMatrices,
    traj: &TrajectoryBatch,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let uv = u.register(&mut tape, true);
    let mv = match mats {
        ReparamMatrices::Identity { .. } => Vec::new(),
        ReparamMatrices::Gated(net) => net.register(&mut tape, true),
    };
    let nodes = socm_on_tape(&mut tape, spec, u, &uv, mats, &mv, traj)?;
    let grads = tape.backward(nodes.loss);
    Ok(LossValue {
        value: tape.value(nodes.loss).item(),
        control_grad: grads.collect(&uv),
        matrices_grad: grads.collect(&mv),
        y0_grad: None,
        samples: per_trajectory(&tape, nodes.residual, &nodes.weights.alpha, traj.steps()),
        saturated: nodes.weights.saturated,
    })
}

/// Weighted least squares against a supplied stacked target field, such as
/// [`matching_field`] or [`adjoint_field`].
pub fn loss_socm_with_field(
    spec: &ProblemSpec,
    u: &ControlPolicy,
    field: &Matrix,
    traj: &TrajectoryBatch,
) -> Result<LossValue> {
    require_detached(traj)?;
    if field.shape() != (traj.batch_size() * traj.steps(), traj.dim()) {
        return Err(contract("target field must have one row per trajectory and time step"));
    }
    let mut tape = Tape::new();
    let uv = u.register(&mut tape, true);
    let target = tape.constant(field.clone());
    let nodes = weighted_least_squares(&mut tape, spec, u, &uv, target, traj)?;
    let grads = tape.backward(nodes.loss);
    Ok(LossValue {
        value: tape.value(nodes.loss).item(),
        control_grad: grads.collect(&uv),
        matrices_grad: Vec::new(),
        y0_grad: None,
        samples: per_trajectory(&tape, nodes.residual, &nodes.weights.alpha, traj.steps()),
        saturated: nodes.weights.saturated,
    })
}

/// Nodes of the adjoint loss.
pub struct AdjointNodes {
    pub loss: Var,
    /// The rollout as a detached batch, for diagnostics.
    pub traj: TrajectoryBatch,
}

/// `(1/m) Σ_i [Δt Σ_k (½‖u_k‖² + f(X_k, t_k)) + g(X_K)]` with the rollout
/// recorded on the tape.
pub fn adjoint_on_tape<'a>(
    tape: &mut Tape<'a>,
    spec: &'a ProblemSpec,
    u: &'a ControlPolicy,
    u_vars: &[Var],
    noise: &BatchNoise,
) -> Result<AdjointNodes> {
    let att = rollout_on_tape(tape, spec, u, u_vars, &noise.x0, &noise.increments)?;
    let m = noise.batch_size();
    let steps = noise.steps();
    let dt = spec.horizon() / steps.max(1) as f64;
    let inv_m = 1.0 / m as f64;
    let xk = att.states[steps];
    let g = crate::sim::terminal_cost_on_tape(tape, spec, xk);
    let gs = tape.sum(g);
    let mut loss = tape.scale(gs, inv_m);
    for k in 0..steps {
        let sq = tape.square(att.controls[k]);
        let s = tape.sum(sq);
        let e = tape.scale(s, 0.5 * dt * inv_m);
        loss = tape.add(loss, e);
        if spec.model().has_state_cost() {
            let f = crate::sim::state_cost_on_tape(tape, spec, att.states[k], att.times[k]);
            let fs = tape.sum(f);
            let fe = tape.scale(fs, dt * inv_m);
            loss = tape.add(loss, fe);
        }
        tape.check_budget()?;
    }
    let traj = TrajectoryBatch {
        dt,
        noise_level: spec.noise_level(),
        times: att.times.clone(),
        states: att.states.iter().map(|&v| tape.value(v).clone()).collect(),
        increments: noise.increments.clone(),
        controls: att.controls.iter().map(|&v| tape.value(v).clone()).collect(),
        detached: true,
    };
    Ok(AdjointNodes { loss, traj })
}

/// The control objective, differentiated through the whole rollout. The
/// tape is capped at `element_limit` stored values when given.
pub fn loss_adjoint(
    spec: &ProblemSpec,
    u: &ControlPolicy,
    noise: &BatchNoise,
    element_limit: Option<usize>,
) -> Result<LossValue> {
    let mut tape = match element_limit {
        Some(l) => Tape::with_element_limit(l),
        None => Tape::new(),
    };
    let uv = u.register(&mut tape, true);
    let nodes = adjoint_on_tape(&mut tape, spec, u, &uv, noise)?;
    let grads = tape.backward(nodes.loss);
    Ok(LossValue {
        value: tape.value(nodes.loss).item(),
        control_grad: grads.collect(&uv),
        matrices_grad: Vec::new(),
        y0_grad: None,
        samples: crate::metrics::objective_samples(spec, &nodes.traj),
        saturated: 0,
    })
}

/// `Ỹ = −λ⁻¹ Σ⟨u, v⟩Δt − λ⁻¹ Σ f Δt − λ^{−1/2} Σ⟨u, ΔB⟩ + (λ⁻¹/2) Σ‖u‖²Δt`
/// per trajectory, for stacked control values `u` on a batch rolled out
/// under `v`.
pub fn tilde_y(spec: &ProblemSpec, u: &Matrix, traj: &TrajectoryBatch) -> Vec<f64> {
    let lambda = spec.noise_level();
    let dt = traj.dt();
    let m = traj.batch_size();
    let sl = libm::sqrt(lambda);
    let running = running_cost(spec, traj);
    (0..m)
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..traj.steps() {
                let uk = u.row(k * m + i);
                let vk = traj.controls[k].row(i);
                let db = traj.increments[k].row(i);
                for a in 0..uk.len() {
                    acc += -uk[a] * vk[a] * dt / lambda - uk[a] * db[a] / sl + 0.5 * uk[a] * uk[a] * dt / lambda;
                }
            }
            acc - running[i] / lambda
        })
        .collect()
}

/// `Δt Σ_k f(X_k, t_k)` per trajectory.
fn running_cost(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Vec<f64> {
    let model = spec.model();
    (0..traj.batch_size())
        .map(|i| {
            if !model.has_state_cost() {
                return 0.0;
            }
            let s: f64 = (0..traj.steps())
                .map(|k| model.state_cost(traj.state(i, k), traj.times[k]))
                .sum();
            s * traj.dt()
        })
        .collect()
}

/// Coefficients `−λ^{−1/2} ΔB − λ⁻¹ Δt v` of the part of `Ỹ` linear in `u`.
fn linear_coefficients(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Matrix {
    let lambda = spec.noise_level();
    let sl = libm::sqrt(lambda);
    let dt = traj.dt();
    stack(&traj.increments).zip_map(&traj.stacked_controls(), |db, v| -db / sl - v * dt / lambda)
}

struct FoldSteps {
    batch: usize,
}

impl CustomOp for FoldSteps {
    fn name(&self) -> &'static str {
        "fold_steps"
    }

    fn vjp(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        if !needs[0] {
            return vec![None];
        }
        let rows = inputs[0].rows();
        let g = grad.as_slice();
        vec![Some(Matrix::from_fn(rows, 1, |r, _| g[r % self.batch]))]
    }
}

/// Sum an `m K × 1` stacked column over time steps into `m × 1`.
fn fold_steps(tape: &mut Tape<'_>, col: Var, batch: usize) -> Var {
    let x = tape.value(col).as_slice();
    let steps = x.len() / batch.max(1);
    let out: Vec<f64> = (0..batch).map(|i| (0..steps).map(|k| x[k * batch + i]).sum()).collect();
    tape.custom(Box::new(FoldSteps { batch }), vec![col], Matrix::column(&out))
}

/// Per stacked row: `⟨u, coeff⟩ + (λ⁻¹Δt/2)‖u‖²`.
fn tilde_y_rows<'a>(tape: &mut Tape<'a>, spec: &ProblemSpec, uk: Var, traj: &TrajectoryBatch) -> Var {
    let coeff = tape.constant(linear_coefficients(spec, traj));
    let lin = tape.mul(uk, coeff);
    let lin = tape.row_sum(lin);
    let sq = tape.square(uk);
    let quad = tape.row_sum(sq);
    let quad = tape.scale(quad, 0.5 * traj.dt() / spec.noise_level());
    tape.add(lin, quad)
}

/// `Ỹ − λ⁻¹ g(X_K)` per trajectory, `m × 1`.
fn log_ratio_on_tape<'a>(tape: &mut Tape<'a>, spec: &ProblemSpec, uk: Var, traj: &TrajectoryBatch) -> Var {
    let lambda = spec.noise_level();
    let rows = tilde_y_rows(tape, spec, uk, traj);
    let per = fold_steps(tape, rows, traj.batch_size());
    let running = running_cost(spec, traj);
    let term = traj.terminal();
    let offset: Vec<f64> = (0..traj.batch_size())
        .map(|i| -running[i] / lambda - spec.terminal_cost(term.row(i)) / lambda)
        .collect();
    let oc = tape.constant(Matrix::column(&offset));
    tape.add(per, oc)
}

/// Cross-entropy loss: `E[(−λ^{−1/2} Σ⟨u, ΔB⟩ − λ⁻¹ Σ⟨u, v⟩Δt + (λ⁻¹/2) Σ‖u‖²Δt) α]`.
pub fn loss_cross_entropy(spec: &ProblemSpec, u: &ControlPolicy, traj: &TrajectoryBatch) -> Result<LossValue> {
    require_detached(traj)?;
    let weights = checked_weights(spec, traj)?;
    let m = traj.batch_size();
    let mut tape = Tape::new();
    let uv = u.register(&mut tape, true);
    let uk = control_on_stack(&mut tape, u, &uv, traj);
    let rows = tilde_y_rows(&mut tape, spec, uk, traj);
    let per = fold_steps(&mut tape, rows, m);
    let wc = tape.constant(Matrix::column(
        &weights.alpha.iter().map(|a| a / m as f64).collect::<Vec<_>>(),
    ));
    let prod = tape.mul(per, wc);
    let loss = tape.sum(prod);
    tape.check_budget()?;
    let grads = tape.backward(loss);
    let samples = tape
        .value(per)
        .as_slice()
        .iter()
        .zip(&weights.alpha)
        .map(|(p, a)| p * a)
        .collect();
    Ok(LossValue {
        value: tape.value(loss).item(),
        control_grad: grads.collect(&uv),
        matrices_grad: Vec::new(),
        y0_grad: None,
        samples,
        saturated: weights.saturated,
    })
}

fn unbiased_variance_on_tape(tape: &mut Tape<'_>, s: Var) -> Var {
    let m = tape.value(s).rows();
    let total = tape.sum(s);
    let mean = tape.scale(total, 1.0 / m as f64);
    let neg = tape.scale(mean, -1.0);
    let centered = tape.add_row(s, neg);
    let sq = tape.square(centered);
    let ss = tape.sum(sq);
    tape.scale(ss, 1.0 / (m as f64 - 1.0))
}

fn variance_family(spec: &ProblemSpec, u: &ControlPolicy, traj: &TrajectoryBatch, log: bool) -> Result<LossValue> {
    require_detached(traj)?;
    if traj.batch_size() < 2 {
        return Err(contract("variance losses need at least two trajectories"));
    }
    let mut tape = Tape::new();
    let uv = u.register(&mut tape, true);
    let uk = control_on_stack(&mut tape, u, &uv, traj);
    let s = log_ratio_on_tape(&mut tape, spec, uk, traj);
    let x = if log { s } else { tape.exp(s) };
    let loss = unbiased_variance_on_tape(&mut tape, x);
    tape.check_budget()?;
    let grads = tape.backward(loss);
    Ok(LossValue {
        value: tape.value(loss).item(),
        control_grad: grads.collect(&uv),
        matrices_grad: Vec::new(),
        y0_grad: None,
        samples: tape.value(x).as_slice().to_vec(),
        saturated: 0,
    })
}

/// `Var(exp(Ỹ − λ⁻¹ g))` across the batch, unbiased.
pub fn loss_variance(spec: &ProblemSpec, u: &ControlPolicy, traj: &TrajectoryBatch) -> Result<LossValue> {
    variance_family(spec, u, traj, false)
}

/// `Var(Ỹ − λ⁻¹ g)` across the batch, unbiased.
pub fn loss_log_variance(spec: &ProblemSpec, u: &ControlPolicy, traj: &TrajectoryBatch) -> Result<LossValue> {
    variance_family(spec, u, traj, true)
}

/// `E[(Ỹ + y₀ − λ⁻¹ g)²]` with `y₀` trainable.
pub fn loss_moment(spec: &ProblemSpec, u: &ControlPolicy, y0: f64, traj: &TrajectoryBatch) -> Result<LossValue> {
    require_detached(traj)?;
    let m = traj.batch_size();
    let mut tape = Tape::new();
    let uv = u.register(&mut tape, true);
    let y0v = tape.param(Matrix::scalar(y0));
    let uk = control_on_stack(&mut tape, u, &uv, traj);
    let s = log_ratio_on_tape(&mut tape, spec, uk, traj);
    let shifted = tape.add_row(s, y0v);
    let sq = tape.square(shifted);
    let ss = tape.sum(sq);
    let loss = tape.scale(ss, 1.0 / m as f64);
    tape.check_budget()?;
    let grads = tape.backward(loss);
    Ok(LossValue {
        value: tape.value(loss).item(),
        control_grad: grads.collect(&uv),
        matrices_grad: Vec::new(),
        y0_grad: Some(grads.get_or_zeros(y0v).item()),
        samples: tape.value(s).as_slice().to_vec(),
        saturated: 0,
    })
}

/// The `y₀` minimizing the moment loss for fixed `u`: the batch mean of
/// `λ⁻¹ g − Ỹ`, given the samples `Ỹ − λ⁻¹ g`.
pub fn optimal_y0(log_ratio: &[f64]) -> f64 {
    let m = log_ratio.len() as f64;
    let total: f64 = log_ratio.iter().sum();
    -(total * (1.0 / m))
}

/// `(1/m) Σ (s_i − s̄)²`, with the same arithmetic as the moment loss at
/// its optimal `y₀`.
pub fn uncorrected_variance(samples: &[f64]) -> f64 {
    let y0 = optimal_y0(samples);
    let ss: f64 = samples
        .iter()
        .map(|s| {
            let c = s + y0;
            c * c
        })
        .sum();
    ss * (1.0 / samples.len() as f64)
}

//! Evaluation quantities reported during training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::ground_truth::GroundTruth;
use crate::linalg::Matrix;
use crate::policy::ControlPolicy;
use crate::problem::ProblemSpec;
use crate::rng::SeedStream;
use crate::sim::{rollout, stochastic_integral, BatchNoise, TrajectoryBatch};

/// Smoothing coefficient of reported moving averages.
pub const EMA_BETA: f64 = 0.02;

/// `new` on the first call, `(1 − β) current + β new` afterwards.
pub fn ema_update(current: Option<f64>, new: f64, beta: f64) -> f64 {
    match current {
        None => new,
        Some(c) => (1.0 - beta) * c + beta * new,
    }
}

/// Mean, sample standard deviation and standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = libm::sqrt(var);
        Self {
            mean,
            std,
            se: std / libm::sqrt(n),
        }
    }
}

/// `Δt Σ_k (½‖u_k‖² + f(X_k, t_k)) + g(X_K)` per trajectory, with `u_k` the
/// recorded controls.
pub fn objective_samples(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Vec<f64> {
    let model = spec.model();
    let dt = traj.dt();
    (0..traj.batch_size())
        .map(|i| {
            let mut running = 0.0;
            for k in 0..traj.steps() {
                let u = traj.controls[k].row(i);
                running += 0.5 * u.iter().map(|v| v * v).sum::<f64>();
                if model.has_state_cost() {
                    running += model.state_cost(traj.state(i, k), traj.times[k]);
                }
            }
            dt * running + model.terminal_cost(traj.state(i, traj.steps()))
        })
        .collect()
}

/// Control objective of the control a batch was rolled out under.
pub fn control_objective(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Summary {
    Summary::of(&objective_samples(spec, traj))
}

/// Objective plus `Σ⟨u_k, ΔB_k⟩` per trajectory, scaled by `√λ` so that the
/// added term cancels the noise in the running cost at the optimum.
pub fn stl_samples(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Vec<f64> {
    let ito = stochastic_integral(&traj.controls, &traj.increments).expect("batch shapes are consistent");
    let sl = libm::sqrt(spec.noise_level());
    objective_samples(spec, traj)
        .into_iter()
        .zip(ito)
        .map(|(o, s)| o + sl * s)
        .collect()
}

/// Sticking-the-landing estimate of the control objective.
pub fn stl_objective(spec: &ProblemSpec, traj: &TrajectoryBatch) -> Summary {
    Summary::of(&stl_samples(spec, traj))
}

/// `std(α) / mean(α)` with the unbiased standard deviation.
pub fn alpha_normalized_std(weights: &[f64]) -> Result<f64> {
    if weights.len() < 2 {
        return Err(contract("normalized spread needs at least two weights"));
    }
    let s = Summary::of(weights);
    if s.mean == 0.0 {
        return Err(Error::ZeroMeanWeights);
    }
    Ok(s.std / s.mean)
}

/// Sum of squared entries.
pub fn grad_norm_sq(grads: &[Matrix]) -> f64 {
    grads.iter().flat_map(|g| g.as_slice()).map(|v| v * v).sum()
}

/// Weighted control error and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L2Error {
    pub value: f64,
    pub se: f64,
}

/// `E[‖u* − u‖² e^{−V(X₀,0)/λ}] / E[e^{−V(X₀,0)/λ}]` over paths driven by
/// `u*`, with time averaged over the left endpoints of the grid. For point
/// initial laws the weights are all equal.
pub fn control_l2_error(
    spec: &ProblemSpec,
    u: &ControlPolicy,
    truth: &GroundTruth,
    m: usize,
    steps: usize,
    seeds: &SeedStream,
) -> Result<L2Error> {
    let noise = BatchNoise::sample(spec, m, steps, seeds);
    let traj = rollout(spec, &truth.policy(), &noise.x0, &noise.increments)?;
    let err = per_path_error(u, &traj);
    let log_w = initial_log_weights(spec, truth, &noise.x0)?;
    Ok(weighted_mean(&err, &log_w))
}

/// Mean over `k` of `‖u*(X_k) − u(X_k)‖²` per path, with `u*` the controls
/// the batch was driven by.
pub fn per_path_error(u: &ControlPolicy, traj: &TrajectoryBatch) -> Vec<f64> {
    let m = traj.batch_size();
    let steps = traj.steps();
    let mut err = alloc::vec![0.0; m];
    for k in 0..steps {
        let uk = u.eval_at(&traj.states[k], traj.times[k]);
        for (i, e) in err.iter_mut().enumerate() {
            *e += uk
                .row(i)
                .iter()
                .zip(traj.controls[k].row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    err.iter_mut().for_each(|e| *e /= steps.max(1) as f64);
    err
}

fn initial_log_weights(spec: &ProblemSpec, truth: &GroundTruth, x0: &Matrix) -> Result<Vec<f64>> {
    if spec.initial_law().is_point() {
        return Ok(alloc::vec![0.0; x0.rows()]);
    }
    let value = truth
        .value
        .as_ref()
        .ok_or_else(|| Error::UnsupportedSetting(spec.name().into()))?;
    let lambda = spec.noise_level();
    Ok((0..x0.rows()).map(|i| -value.value(x0.row(i), 0.0) / lambda).collect())
}

/// Self-normalized weighted mean with a ratio-estimator standard error.
pub fn weighted_mean(values: &[f64], log_weights: &[f64]) -> L2Error {
    let top = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|l| libm::exp(l - top)).collect();
    let total: f64 = w.iter().sum();
    let value = values.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / total;
    let n = values.len() as f64;
    let wbar = total / n;
    let spread = values
        .iter()
        .zip(&w)
        .map(|(v, w)| {
            let r = w * (v - value);
            r * r
        })
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    L2Error {
        value,
        se: libm::sqrt(spread / n) / wbar,
    }
}

/// One row of the metrics table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub grad_norm_sq_ema: f64,
    pub l2_error: Option<f64>,
    pub l2_error_ema: Option<f64>,
    pub objective_mean: f64,
    pub objective_std: f64,
    pub stl_mean: f64,
    pub stl_std: f64,
    pub alpha_norm_std: Option<f64>,
    pub saturated_weights: usize,
    pub skipped_updates: u64,
}

impl MetricsRecord {
    /// Column names, in order.
    pub const COLUMNS: [&'static str; 13] = [
        "iteration",
        "loss",
        "grad_norm_sq",
        "grad_norm_sq_ema",
        "l2_error",
        "l2_error_ema",
        "control_objective",
        "control_objective_std",
        "stl_objective",
        "stl_objective_std",
        "alpha_norm_std",
        "saturated_weights",
        "skipped_updates",
    ];

    /// Values as text; missing values are empty. Floats use the shortest
    /// representation that round-trips.
    pub fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        alloc::vec![
            format!("{}", self.iteration),
            format!("{:?}", self.loss),
            format!("{:?}", self.grad_norm_sq),
            format!("{:?}", self.grad_norm_sq_ema),
            opt(self.l2_error),
            opt(self.l2_error_ema),
            format!("{:?}", self.objective_mean),
            format!("{:?}", self.objective_std),
            format!("{:?}", self.stl_mean),
            format!("{:?}", self.stl_std),
            opt(self.alpha_norm_std),
            format!("{}", self.saturated_weights),
            format!("{}", self.skipped_updates),
        ]
    }
}

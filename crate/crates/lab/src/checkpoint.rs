//! Run and warm-start checkpoints stored as [`Archive`]s.

use std::path::Path;
use std::sync::Arc;

use socm_core::adam::Adam;
use socm_core::linalg::Matrix;
use socm_core::nn::{Activation, ControlNet, Mlp};
use socm_core::policy::ControlPolicy;
use socm_core::problem::ProblemSpec;
use socm_core::reparam::{ReparamMatrices, ReparamNet};
use socm_core::runner::{TrainSettings, TrainState};
use socm_core::warmstart::{GaussianControl, GaussianSplinePath};

use crate::archive::Archive;
use crate::config::ProblemSection;
use crate::error::{LabError, Result};

/// Which problem a checkpoint belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub kind: String,
    pub problem: ProblemSection,
    pub loss: Option<String>,
    pub seed: Option<u64>,
    pub iteration: Option<u64>,
    pub batch: Option<usize>,
    pub steps: Option<usize>,
}

fn corrupt(what: &str) -> LabError {
    LabError::Checkpoint(what.to_string())
}

fn parse<T: std::str::FromStr>(a: &Archive, key: &str) -> Result<T> {
    a.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| corrupt(key))
}

fn parse_opt_f64(a: &Archive, key: &str) -> Result<Option<f64>> {
    match a.get(key) {
        None | Some("") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| corrupt(key)),
    }
}

fn write_problem(a: &mut Archive, setting: &str, problem_seed: u64, spec: &ProblemSpec) {
    a.set("setting", setting);
    a.set("dim", spec.dim());
    a.set("problem_seed", problem_seed);
    a.set_f64("horizon", spec.horizon());
    a.set_f64("noise_level", spec.noise_level());
}

pub fn read_info(a: &Archive) -> Result<CheckpointInfo> {
    Ok(CheckpointInfo {
        kind: a.get("kind").ok_or_else(|| corrupt("kind"))?.to_string(),
        problem: ProblemSection {
            setting: Some(a.get("setting").ok_or_else(|| corrupt("setting"))?.to_string()),
            dim: Some(parse(a, "dim")?),
            seed: parse(a, "problem_seed")?,
            horizon: Some(parse(a, "horizon")?),
            noise_level: Some(parse(a, "noise_level")?),
        },
        loss: a.get("loss").map(str::to_string),
        seed: a.get("seed").and_then(|s| s.parse().ok()),
        iteration: a.get("iteration").and_then(|s| s.parse().ok()),
        batch: a.get("batch").and_then(|s| s.parse().ok()),
        steps: a.get("steps").and_then(|s| s.parse().ok()),
    })
}

fn write_adam(a: &mut Archive, name: &str, adam: &Adam) {
    a.set(&format!("adam.{name}.step"), adam.steps());
    let (m, v) = adam.moments();
    a.push_indexed(&format!("adam.{name}.m"), m);
    a.push_indexed(&format!("adam.{name}.v"), v);
}

fn read_adam(a: &Archive, name: &str, lr: f64, params: &[Matrix]) -> Result<Adam> {
    let mut adam = Adam::new(lr, params);
    let step = parse(a, &format!("adam.{name}.step"))?;
    adam.restore(
        step,
        a.indexed(&format!("adam.{name}.m")),
        a.indexed(&format!("adam.{name}.v")),
    )?;
    Ok(adam)
}

fn write_warm_start(a: &mut Archive, path: &GaussianSplinePath) {
    a.set("warm.knots", path.knots());
    a.set_f64("warm.horizon", path.horizon);
    let d = path.dim();
    let mu = Matrix::from_fn(path.knots() + 1, d, |b, j| path.mu[b][j]);
    a.push("warm.mu", mu);
    a.push("warm.anchor", path.anchor.clone());
    a.push_indexed("warm.offset", &path.offsets);
}

fn read_warm_start(a: &Archive) -> Result<Option<GaussianSplinePath>> {
    let Some(mu) = a.array("warm.mu") else {
        return Ok(None);
    };
    let knots: usize = parse(a, "warm.knots")?;
    let anchor = a.array("warm.anchor").ok_or_else(|| corrupt("warm.anchor"))?.clone();
    let offsets = a.indexed("warm.offset");
    let d = anchor.rows();
    if knots == 0
        || mu.shape() != (knots + 1, d)
        || anchor.shape() != (d, d)
        || offsets.len() != knots
        || offsets.iter().any(|o| o.shape() != (d, d))
    {
        return Err(corrupt("warm"));
    }
    Ok(Some(GaussianSplinePath {
        horizon: parse(a, "warm.horizon")?,
        mu: (0..=knots).map(|b| mu.row(b).to_vec()).collect(),
        anchor,
        offsets,
    }))
}

/// Everything in `state`, with the problem it was trained on.
pub fn run_archive(
    setting: &str,
    problem_seed: u64,
    spec: &ProblemSpec,
    settings: &TrainSettings,
    seed: u64,
    state: &TrainState,
) -> Archive {
    let mut a = Archive::default();
    a.set("kind", "run");
    write_problem(&mut a, setting, problem_seed, spec);
    a.set("loss", settings.loss.name());
    a.set("seed", seed);
    a.set("batch", settings.batch);
    a.set("steps", settings.steps);
    a.set("iteration", state.iteration);
    let net = state.policy.network().expect("trained policies carry a network");
    a.set(
        "policy",
        if matches!(state.policy, ControlPolicy::Composite { .. }) {
            "composite"
        } else {
            "neural"
        },
    );
    a.set("policy.activation", net.mlp().activation().name());
    a.set(
        "policy.sizes",
        net.mlp()
            .sizes()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    a.push_indexed("control", net.params());
    match &state.matrices {
        ReparamMatrices::Identity { .. } => a.set("matrices", "identity"),
        ReparamMatrices::Gated(m) => {
            a.set("matrices", "gated");
            a.set("matrices.width", m.width());
            a.push_indexed("matrices", m.params());
        }
    }
    a.set_f64("y0", state.y0);
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    a.set("grad_norm_sq_ema", opt(state.grad_norm_sq_ema));
    a.set("l2_error_ema", opt(state.l2_error_ema));
    a.set("skipped_updates", state.skipped_updates);
    a.set("consecutive_failures", state.consecutive_failures);
    write_adam(&mut a, "control", &state.adam_control);
    write_adam(&mut a, "matrices", &state.adam_matrices);
    write_adam(&mut a, "y0", &state.adam_y0);
    if let Some(path) = &state.warm_start {
        write_warm_start(&mut a, path);
    }
    a
}

/// Rebuild a training state. Learning rates come from `settings`.
pub fn read_state(a: &Archive, spec: &ProblemSpec, settings: &TrainSettings) -> Result<TrainState> {
    let sizes: Vec<usize> = a
        .get("policy.sizes")
        .ok_or_else(|| corrupt("policy.sizes"))?
        .split(',')
        .map(|s| s.parse().map_err(|_| corrupt("policy.sizes")))
        .collect::<Result<_>>()?;
    let activation = match a.get("policy.activation") {
        Some("relu") => Activation::Relu,
        Some("tanh") => Activation::Tanh,
        _ => return Err(corrupt("policy.activation")),
    };
    let mlp = Mlp::from_params(&sizes, activation, true, a.indexed("control"))?;
    let net = ControlNet::from_mlp(mlp)?;
    let warm_start = read_warm_start(a)?;
    let policy = match (a.get("policy"), &warm_start) {
        (Some("neural"), _) => ControlPolicy::Neural(net),
        (Some("composite"), Some(path)) => ControlPolicy::Composite {
            base: Arc::new(GaussianControl::new(spec, path.clone())?),
            residual: net,
        },
        _ => return Err(corrupt("policy")),
    };
    let d = spec.dim();
    let matrices = match a.get("matrices") {
        Some("identity") => ReparamMatrices::Identity { dim: d },
        Some("gated") => ReparamMatrices::Gated(ReparamNet::from_params(
            d,
            parse(a, "matrices.width")?,
            a.indexed("matrices"),
        )?),
        _ => return Err(corrupt("matrices")),
    };
    let y0: f64 = parse(a, "y0")?;
    Ok(TrainState {
        iteration: parse(a, "iteration")?,
        adam_control: read_adam(a, "control", settings.lr_control, policy.params())?,
        adam_matrices: read_adam(a, "matrices", settings.lr_matrices, matrices.params())?,
        adam_y0: read_adam(a, "y0", settings.lr_y0, &[Matrix::scalar(y0)])?,
        policy,
        warm_start,
        matrices,
        y0,
        grad_norm_sq_ema: parse_opt_f64(a, "grad_norm_sq_ema")?,
        l2_error_ema: parse_opt_f64(a, "l2_error_ema")?,
        skipped_updates: parse(a, "skipped_updates")?,
        consecutive_failures: parse(a, "consecutive_failures")?,
    })
}

pub fn warm_start_archive(setting: &str, problem_seed: u64, spec: &ProblemSpec, path: &GaussianSplinePath) -> Archive {
    let mut a = Archive::default();
    a.set("kind", "warm_start");
    write_problem(&mut a, setting, problem_seed, spec);
    write_warm_start(&mut a, path);
    a
}

/// The warm-start spline stored in a warm-start or run checkpoint.
pub fn load_warm_start(path: &Path, spec: &ProblemSpec) -> Result<GaussianSplinePath> {
    let a = Archive::load(path)?;
    let ws = read_warm_start(&a)?.ok_or_else(|| LabError::Config(format!("{} holds no warm start", path.display())))?;
    if ws.dim() != spec.dim() || ws.horizon != spec.horizon() {
        return Err(LabError::Config(format!(
            "warm start in {} does not match the problem's dimension or horizon",
            path.display()
        )));
    }
    Ok(ws)
}

//! The iterative training loop: simulate, evaluate a loss, take an Adam step,
//! and periodically evaluate metrics. File handling is left to the caller.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::ground_truth::GroundTruth;
use crate::linalg::Matrix;
use crate::losses::{
    adjoint_field, loss_adjoint, loss_cross_entropy, loss_log_variance, loss_moment, loss_socm, loss_socm_with_field,
    loss_variance, LossKind, LossValue,
};
use crate::metrics::{
    alpha_normalized_std, control_l2_error, ema_update, grad_norm_sq, objective_samples, stl_samples, MetricsRecord,
    Summary, EMA_BETA,
};
use crate::nn::ControlNet;
use crate::policy::ControlPolicy;
use crate::problem::ProblemSpec;
use crate::reparam::{ReparamMatrices, ReparamNet};
use crate::rng::SeedStream;
use crate::sim::{importance_weight, rollout, BatchNoise, TrajectoryBatch};
use crate::warmstart::{GaussianControl, GaussianSplinePath};

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

/// Which control generates the training trajectories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Behavior {
    /// The control being learned.
    #[default]
    Current,
    Zero,
    /// The warm-start control, or zero without one.
    WarmStart,
}

impl Behavior {
    pub fn name(self) -> &'static str {
        match self {
            Behavior::Current => "current",
            Behavior::Zero => "zero",
            Behavior::WarmStart => "warm_start",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "current" => Ok(Behavior::Current),
            "zero" => Ok(Behavior::Zero),
            "warm_start" => Ok(Behavior::WarmStart),
            _ => Err(Error::Config(alloc::format!(
                "unknown behavior control `{name}`; expected one of current, zero, warm_start"
            ))),
        }
    }
}

/// Everything that shapes a run apart from the problem and the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub loss: LossKind,
    pub iterations: u64,
    pub batch: usize,
    pub steps: usize,
    pub lr_control: f64,
    pub lr_matrices: f64,
    pub lr_y0: f64,
    pub width: usize,
    pub matrix_width: usize,
    pub eval_every: u64,
    pub eval_batches: usize,
    pub checkpoint_every: u64,
    pub behavior: Behavior,
    pub max_consecutive_failures: u32,
    pub element_limit: Option<usize>,
    /// Iterations at which a simulated divergence is reported instead of
    /// running the step.
    pub inject_failures: Vec<u64>,
}

impl TrainSettings {
    pub fn new(loss: LossKind) -> Self {
        Self {
            loss,
            iterations: 40_000,
            batch: 128,
            steps: 100,
            lr_control: 1e-4,
            lr_matrices: 1e-2,
            lr_y0: 1e-2,
            width: ControlNet::DEFAULT_WIDTH,
            matrix_width: ReparamNet::DEFAULT_WIDTH,
            eval_every: 10,
            eval_batches: 10,
            checkpoint_every: 1000,
            behavior: Behavior::Current,
            max_consecutive_failures: 50,
            element_limit: None,
            inject_failures: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch", self.batch),
            ("steps", self.steps),
            ("width", self.width),
            ("matrix_width", self.matrix_width),
            ("eval_batches", self.eval_batches),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(alloc::format!("{name} must be at least 1")));
            }
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "eval_every and checkpoint_every must be at least 1".into(),
            ));
        }
        for (name, lr) in [
            ("lr_control", self.lr_control),
            ("lr_matrices", self.lr_matrices),
            ("lr_y0", self.lr_y0),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(alloc::format!("{name} must be positive, got {lr}")));
            }
        }
        if self.loss.needs_graph() && self.behavior != Behavior::Current {
            return Err(Error::Config(
                "the adjoint loss simulates under the learned control".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub policy: ControlPolicy,
    pub warm_start: Option<GaussianSplinePath>,
    pub matrices: ReparamMatrices,
    pub y0: f64,
    pub adam_control: Adam,
    pub adam_matrices: Adam,
    pub adam_y0: Adam,
    pub grad_norm_sq_ema: Option<f64>,
    pub l2_error_ema: Option<f64>,
    pub skipped_updates: u64,
    pub consecutive_failures: u32,
}

impl TrainState {
    /// Fresh parameters for `spec`. The control network's last layer is zero,
    /// so the initial control is zero (or the warm start).
    pub fn initial(
        spec: &ProblemSpec,
        settings: &TrainSettings,
        seeds: &SeedStream,
        warm_start: Option<GaussianSplinePath>,
    ) -> Result<Self> {
        let d = spec.dim();
        let init = seeds.child(INIT_STREAM);
        let net = ControlNet::new(d, settings.width, &init.child(0));
        let policy = match &warm_start {
            Some(path) => ControlPolicy::Composite {
                base: Arc::new(GaussianControl::new(spec, path.clone())?),
                residual: net,
            },
            None => ControlPolicy::Neural(net),
        };
        let matrices = if settings.loss.learns_matrices() {
            ReparamMatrices::Gated(ReparamNet::new(d, settings.matrix_width, &init.child(1)))
        } else {
            ReparamMatrices::Identity { dim: d }
        };
        let y0 = [Matrix::scalar(0.0)];
        Ok(Self {
            iteration: 0,
            adam_control: Adam::new(settings.lr_control, policy.params()),
            adam_matrices: Adam::new(settings.lr_matrices, matrices.params()),
            adam_y0: Adam::new(settings.lr_y0, &y0),
            policy,
            warm_start,
            matrices,
            y0: 0.0,
            grad_norm_sq_ema: None,
            l2_error_ema: None,
            skipped_updates: 0,
            consecutive_failures: 0,
        })
    }

    /// The warm-start control alone, if there is one.
    pub fn warm_start_policy(&self) -> Option<ControlPolicy> {
        match &self.policy {
            ControlPolicy::Composite { base, .. } => Some(ControlPolicy::ClosedForm(base.clone())),
            _ => None,
        }
    }
}

/// What happened in one call to [`Trainer::advance`].
#[derive(Clone, Debug, Default)]
pub struct StepEvent {
    /// The iteration count after the step.
    pub iteration: u64,
    pub loss: Option<f64>,
    /// Set when the step failed and was skipped.
    pub failure: Option<String>,
    pub record: Option<MetricsRecord>,
    pub checkpoint_due: bool,
    pub aborted: bool,
}

/// Drives one run.
pub struct Trainer {
    spec: ProblemSpec,
    settings: TrainSettings,
    seeds: SeedStream,
    truth: Option<GroundTruth>,
    state: TrainState,
    last_loss: f64,
    last_grad_norm_sq: f64,
}

impl Trainer {
    pub fn new(
        spec: ProblemSpec,
        settings: TrainSettings,
        seeds: SeedStream,
        truth: Option<GroundTruth>,
        state: TrainState,
    ) -> Result<Self> {
        settings.validate()?;
        if state.policy.dim() != spec.dim() || state.matrices.dim() != spec.dim() {
            return Err(Error::Config("checkpoint dimension does not match the problem".into()));
        }
        if settings.loss.learns_matrices() == state.matrices.is_identity() {
            return Err(Error::Config(alloc::format!(
                "loss `{}` does not match the checkpointed reparameterization matrices",
                settings.loss.name()
            )));
        }
        Ok(Self {
            spec,
            settings,
            seeds,
            truth,
            state,
            last_loss: f64::NAN,
            last_grad_norm_sq: f64::NAN,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn finished(&self) -> bool {
        self.state.iteration >= self.settings.iterations
    }

    fn behavior_policy(&self) -> ControlPolicy {
        match self.settings.behavior {
            Behavior::Current => self.state.policy.clone(),
            Behavior::Zero => ControlPolicy::Zero { dim: self.spec.dim() },
            Behavior::WarmStart => self
                .state
                .warm_start_policy()
                .unwrap_or(ControlPolicy::Zero { dim: self.spec.dim() }),
        }
    }

    /// Noise for training iteration `n`.
    pub fn training_noise(&self, n: u64) -> BatchNoise {
        let s = self.seeds.child(TRAIN_STREAM).child(n);
        BatchNoise::sample(&self.spec, self.settings.batch, self.settings.steps, &s)
    }

    /// The batch used at training iteration `n`, simulated under the
    /// behavior control. Not available for the adjoint loss.
    pub fn training_batch(&self, n: u64) -> Result<TrajectoryBatch> {
        let noise = self.training_noise(n);
        rollout(&self.spec, &self.behavior_policy(), &noise.x0, &noise.increments)
    }

    fn compute_loss(&self, n: u64) -> Result<LossValue> {
        let spec = &self.spec;
        let u = &self.state.policy;
        if self.settings.inject_failures.contains(&n) {
            return Err(Error::SimulationDiverged { trajectory: 0, step: 0 });
        }
        if self.settings.loss == LossKind::Adjoint {
            return loss_adjoint(spec, u, &self.training_noise(n), self.settings.element_limit);
        }
        let traj = self.training_batch(n)?;
        match self.settings.loss {
            LossKind::Socm | LossKind::SocmIdentity => loss_socm(spec, u, &self.state.matrices, &traj),
            LossKind::SocmAdjoint => loss_socm_with_field(spec, u, &adjoint_field(spec, &traj), &traj),
            LossKind::CrossEntropy => loss_cross_entropy(spec, u, &traj),
            LossKind::Variance => loss_variance(spec, u, &traj),
            LossKind::LogVariance => loss_log_variance(spec, u, &traj),
            LossKind::Moment => loss_moment(spec, u, self.state.y0, &traj),
            LossKind::Adjoint => unreachable!(),
        }
    }

    fn apply(&mut self, lv: &LossValue) -> Result<bool> {
        let st = &mut self.state;
        let mut ok = st.adam_control.step(st.policy.params_mut(), &lv.control_grad)?;
        if self.settings.loss.learns_matrices() {
            ok &= st.adam_matrices.step(st.matrices.params_mut(), &lv.matrices_grad)?;
        }
        if let Some(g) = lv.y0_grad {
            let mut p = [Matrix::scalar(st.y0)];
            ok &= st.adam_y0.step(&mut p, &[Matrix::scalar(g)])?;
            st.y0 = p[0].item();
        }
        Ok(ok)
    }

    /// Run one iteration, and the metrics evaluation when one is due.
    /// Divergent simulations, degenerate weights and non-finite gradients
    /// skip the step; too many in a row abort the run.
    pub fn advance(&mut self) -> Result<StepEvent> {
        let n = self.state.iteration;
        let mut event = StepEvent::default();
        let outcome = self.compute_loss(n);
        let failure = match outcome {
            Ok(lv) => {
                self.last_loss = lv.value;
                self.last_grad_norm_sq = grad_norm_sq(&lv.control_grad);
                event.loss = Some(lv.value);
                if self.apply(&lv)? {
                    self.state.grad_norm_sq_ema = Some(ema_update(
                        self.state.grad_norm_sq_ema,
                        self.last_grad_norm_sq,
                        EMA_BETA,
                    ));
                    None
                } else {
                    Some("non-finite gradient".to_string())
                }
            }
            Err(e @ (Error::SimulationDiverged { .. } | Error::DegenerateWeights)) => Some(e.to_string()),
            Err(e) => return Err(e),
        };
        self.state.iteration += 1;
        event.iteration = self.state.iteration;
        match failure {
            Some(msg) => {
                self.state.skipped_updates += 1;
                self.state.consecutive_failures += 1;
                event.failure = Some(msg);
                if self.state.consecutive_failures >= self.settings.max_consecutive_failures {
                    event.aborted = true;
                    return Ok(event);
                }
            }
            None => self.state.consecutive_failures = 0,
        }
        let it = self.state.iteration;
        if it % self.settings.eval_every == 0 {
            event.record = Some(self.evaluate_and_record()?);
        }
        event.checkpoint_due = it % self.settings.checkpoint_every == 0 || it == self.settings.iterations;
        Ok(event)
    }

    fn evaluate_and_record(&mut self) -> Result<MetricsRecord> {
        let it = self.state.iteration;
        let mut rec = self.evaluate(it)?;
        if let Some(l2) = rec.l2_error {
            self.state.l2_error_ema = Some(ema_update(self.state.l2_error_ema, l2, EMA_BETA));
        }
        rec.l2_error_ema = self.state.l2_error_ema;
        rec.loss = self.last_loss;
        rec.grad_norm_sq = self.last_grad_norm_sq;
        rec.grad_norm_sq_ema = self.state.grad_norm_sq_ema.unwrap_or(f64::NAN);
        Ok(rec)
    }

    /// Metrics of the current control from fresh batches keyed by `tag`.
    /// The loss and gradient columns are left at zero.
    pub fn evaluate(&self, tag: u64) -> Result<MetricsRecord> {
        evaluate_policy(
            &self.spec,
            &self.state.policy,
            self.truth.as_ref(),
            self.settings.batch,
            self.settings.steps,
            self.settings.eval_batches,
            &self.seeds.child(EVAL_STREAM).child(tag),
            self.state.skipped_updates,
            tag,
        )
    }
}

/// Metrics of `u` averaged over `batches` fresh batches of `m` paths.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    spec: &ProblemSpec,
    u: &ControlPolicy,
    truth: Option<&GroundTruth>,
    m: usize,
    steps: usize,
    batches: usize,
    seeds: &SeedStream,
    skipped_updates: u64,
    iteration: u64,
) -> Result<MetricsRecord> {
    let mut l2_sum = 0.0;
    let mut objective = Vec::with_capacity(m * batches);
    let mut stl = Vec::with_capacity(m * batches);
    let mut alpha = Vec::with_capacity(m * batches);
    let mut saturated = 0;
    for b in 0..batches {
        let s = seeds.child(b as u64);
        if let Some(truth) = truth {
            l2_sum += control_l2_error(spec, u, truth, m, steps, &s.child(0))?.value;
        }
        let noise = BatchNoise::sample(spec, m, steps, &s.child(1));
        let traj = rollout(spec, u, &noise.x0, &noise.increments)?;
        objective.extend(objective_samples(spec, &traj));
        stl.extend(stl_samples(spec, &traj));
        let w = importance_weight(spec, &traj);
        saturated += w.saturated;
        alpha.extend(w.alpha);
    }
    let obj = Summary::of(&objective);
    let st = Summary::of(&stl);
    Ok(MetricsRecord {
        iteration,
        l2_error: truth.map(|_| l2_sum / batches as f64),
        objective_mean: obj.mean,
        objective_std: obj.std,
        stl_mean: st.mean,
        stl_std: st.std,
        alpha_norm_std: alpha_normalized_std(&alpha).ok(),
        saturated_weights: saturated,
        skipped_updates,
        ..MetricsRecord::default()
    })
}

//! Run configuration: a TOML file with `[problem]`, `[training]` and
//! `[output]` tables, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use socm_core::losses::LossKind;
use socm_core::problem::{make_setting_with_dim, ProblemSpec};
use socm_core::runner::{Behavior, TrainSettings};
use socm_core::warmstart::WarmStartConfig;

use crate::error::{LabError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub training: TrainingSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub setting: Option<String>,
    /// Rescale the setting to another dimension.
    pub dim: Option<usize>,
    /// Seed for random problem coefficients.
    pub seed: u64,
    pub horizon: Option<f64>,
    pub noise_level: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub loss: Option<String>,
    pub seed: u64,
    pub iterations: Option<u64>,
    pub batch: Option<usize>,
    pub steps: Option<usize>,
    pub lr_control: Option<f64>,
    pub lr_matrices: Option<f64>,
    pub lr_y0: Option<f64>,
    pub width: Option<usize>,
    pub matrix_width: Option<usize>,
    pub eval_every: Option<u64>,
    pub eval_batches: Option<usize>,
    pub checkpoint_every: Option<u64>,
    /// `current`, `zero` or `warm_start`.
    pub behavior: Option<String>,
    pub max_consecutive_failures: Option<u32>,
    pub element_limit: Option<usize>,
    pub inject_failures: Vec<u64>,
    /// `none`, `gaussian`, or a checkpoint path.
    pub warm_start: Option<String>,
    pub warm_start_iterations: Option<usize>,
    pub warm_start_knots: Option<usize>,
    pub warm_start_steps: Option<usize>,
    pub warm_start_batch: Option<usize>,
    pub warm_start_lr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub dump_trajectories: bool,
    pub truth_cache: Option<PathBuf>,
}

/// Values given on the command line; each replaces the file value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub setting: Option<String>,
    pub loss: Option<String>,
    pub seed: Option<u64>,
    pub iterations: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub warm_start: Option<String>,
    pub dim: Option<usize>,
    pub dump_trajectories: bool,
    pub truth_cache: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.setting {
            self.problem.setting = Some(v.clone());
        }
        if let Some(v) = o.dim {
            self.problem.dim = Some(v);
        }
        if let Some(v) = &o.loss {
            self.training.loss = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.training.seed = v;
        }
        if let Some(v) = o.iterations {
            self.training.iterations = Some(v);
        }
        if let Some(v) = &o.warm_start {
            self.training.warm_start = Some(v.clone());
        }
        if let Some(v) = &o.output_dir {
            self.output.dir = Some(v.clone());
        }
        if o.dump_trajectories {
            self.output.dump_trajectories = true;
        }
        if let Some(v) = &o.truth_cache {
            self.output.truth_cache = Some(v.clone());
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Fill in registry defaults and check every value.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let setting = self
            .problem
            .setting
            .clone()
            .ok_or_else(|| LabError::Config("no setting given ([problem] setting or --setting)".into()))?;
        let loss_name = self
            .training
            .loss
            .clone()
            .ok_or_else(|| LabError::Config("no loss given ([training] loss or --loss)".into()))?;
        let loss = LossKind::from_name(&loss_name)?;
        let spec = build_problem(&self.problem)?;
        let (_, hp) = make_setting_with_dim(&setting, self.problem.seed, self.problem.dim)?;
        let t = &self.training;
        let mut s = TrainSettings::new(loss);
        s.iterations = t.iterations.unwrap_or(hp.iterations as u64);
        s.batch = t.batch.unwrap_or(hp.batch);
        s.steps = t.steps.unwrap_or(hp.steps);
        s.lr_control = t.lr_control.unwrap_or(hp.lr_control);
        s.lr_matrices = t.lr_matrices.unwrap_or(hp.lr_matrices);
        if let Some(v) = t.lr_y0 {
            s.lr_y0 = v;
        }
        if let Some(v) = t.width {
            s.width = v;
        }
        if let Some(v) = t.matrix_width {
            s.matrix_width = v;
        }
        if let Some(v) = t.eval_every {
            s.eval_every = v;
        }
        if let Some(v) = t.eval_batches {
            s.eval_batches = v;
        }
        if let Some(v) = t.checkpoint_every {
            s.checkpoint_every = v;
        }
        if let Some(v) = &t.behavior {
            s.behavior = Behavior::from_name(v)?;
        }
        if let Some(v) = t.max_consecutive_failures {
            s.max_consecutive_failures = v;
        }
        s.element_limit = t.element_limit;
        s.inject_failures = t.inject_failures.clone();
        s.validate()?;

        let warm_start = match t.warm_start.as_deref() {
            None if hp.warm_start => WarmStartMode::Gaussian,
            None | Some("none") => WarmStartMode::None,
            Some("gaussian") => WarmStartMode::Gaussian,
            Some(path) => WarmStartMode::Checkpoint(PathBuf::from(path)),
        };
        let defaults = WarmStartConfig::default();
        let warm = WarmStartConfig {
            knots: t.warm_start_knots.unwrap_or(defaults.knots),
            steps: t.warm_start_steps.unwrap_or(defaults.steps),
            batch: t.warm_start_batch.unwrap_or(defaults.batch),
            lr: t.warm_start_lr.unwrap_or(defaults.lr),
            iterations: t.warm_start_iterations.unwrap_or(defaults.iterations),
        };
        if warm.knots == 0 || warm.steps == 0 || warm.batch == 0 || !(warm.lr > 0.0) {
            return Err(LabError::Config(
                "warm-start knots, steps, batch and lr must be positive".into(),
            ));
        }
        let output_dir = self
            .output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{setting}-{loss_name}-{}", t.seed)));
        Ok(ResolvedRun {
            setting,
            spec,
            settings: s,
            seed: t.seed,
            warm_start,
            warm,
            output_dir,
            dump_trajectories: self.output.dump_trajectories,
            truth_cache: self.output.truth_cache.clone(),
            config: self.clone(),
        })
    }
}

/// The problem described by a `[problem]` table.
pub fn build_problem(p: &ProblemSection) -> Result<ProblemSpec> {
    let setting = p
        .setting
        .as_deref()
        .ok_or_else(|| LabError::Config("no setting given".into()))?;
    let (mut spec, _) = make_setting_with_dim(setting, p.seed, p.dim)?;
    if let Some(h) = p.horizon {
        spec = spec.with_horizon(h)?;
    }
    if let Some(l) = p.noise_level {
        spec = spec.with_noise_level(l)?;
    }
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
pub enum WarmStartMode {
    None,
    Gaussian,
    Checkpoint(PathBuf),
}

impl WarmStartMode {
    pub fn describe(&self) -> String {
        match self {
            WarmStartMode::None => "none".into(),
            WarmStartMode::Gaussian => "gaussian".into(),
            WarmStartMode::Checkpoint(p) => p.display().to_string(),
        }
    }
}

/// A fully specified run.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub setting: String,
    pub spec: ProblemSpec,
    pub settings: TrainSettings,
    pub seed: u64,
    pub warm_start: WarmStartMode,
    pub warm: WarmStartConfig,
    pub output_dir: PathBuf,
    pub dump_trajectories: bool,
    pub truth_cache: Option<PathBuf>,
    pub config: RunConfig,
}

//! The `train`, `eval` and `ground-truth` commands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use socm_core::ground_truth::GroundTruth;
use socm_core::losses::LossKind;
use socm_core::problem::{ProblemSpec, Setting};
use socm_core::rng::SeedStream;
use socm_core::runner::{evaluate_policy, TrainSettings, TrainState, Trainer};
use socm_core::warmstart::{rgsoc_train, GaussianSplinePath};

use crate::archive::Archive;
use crate::checkpoint::{load_warm_start, read_info, read_state, run_archive, warm_start_archive};
use crate::config::{build_problem, ResolvedRun, WarmStartMode};
use crate::error::{LabError, Result};
use crate::output::{dump_trajectories, record_json, write_json, MetricsWriter};
use crate::truth_cache;

const WARM_START_STREAM: u64 = 7;
const EVAL_COMMAND_STREAM: u64 = 8;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const WARM_START_FILE: &str = "warm_start.ckpt";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";

/// How a run ended.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub output_dir: PathBuf,
    pub iterations: u64,
    pub aborted: bool,
}

/// Ground truth for the run's problem, or `None` where none exists.
pub fn ground_truth_for(spec: &ProblemSpec, problem_seed: u64, cache: Option<&Path>) -> Result<Option<GroundTruth>> {
    let found = match cache {
        Some(dir) => truth_cache::load_or_compute(dir, spec, problem_seed),
        None => GroundTruth::for_problem(spec).map_err(LabError::from),
    };
    match found {
        Ok(t) => Ok(Some(t)),
        Err(LabError::Core(socm_core::Error::UnsupportedSetting(_))) => Ok(None),
        Err(e) => Err(e),
    }
}

fn rng_notes(run: &ResolvedRun) -> Value {
    let construction = Setting::from_key(&run.setting)
        .map(|s| s.construction_notes())
        .unwrap_or("");
    json!({
        "generator": "ChaCha8, keyed per (stream, purpose) by splitmix64 from the seed; one stream per trajectory",
        "normals": "rand_distr StandardNormal (ziggurat)",
        "training_batch": "child(1).child(iteration) of the run seed",
        "evaluation_batches": "child(2).child(iteration).child(batch) of the run seed",
        "parameter_init": "child(3) of the run seed",
        "warm_start": "child(7) of the run seed",
        "problem": construction,
    })
}

struct WarmStartOutcome {
    path: Option<GaussianSplinePath>,
    info: Value,
}

fn prepare_warm_start(run: &ResolvedRun, seeds: &SeedStream, log: &mut dyn Write) -> Result<WarmStartOutcome> {
    let spec = &run.spec;
    match &run.warm_start {
        WarmStartMode::None => Ok(WarmStartOutcome {
            path: None,
            info: json!({ "mode": "none" }),
        }),
        WarmStartMode::Checkpoint(p) => Ok(WarmStartOutcome {
            path: Some(load_warm_start(p, spec)?),
            info: json!({ "mode": "checkpoint", "path": p.display().to_string() }),
        }),
        WarmStartMode::Gaussian => {
            let init = GaussianSplinePath::initial(spec, run.warm.knots);
            let _ = writeln!(log, "warm start: {} iterations", run.warm.iterations);
            match rgsoc_train(spec, init, &run.warm, &seeds.child(WARM_START_STREAM)) {
                Ok((path, history)) => {
                    let file = run.output_dir.join(WARM_START_FILE);
                    warm_start_archive(&run.setting, run.config.problem.seed, spec, &path).save(&file)?;
                    Ok(WarmStartOutcome {
                        path: Some(path),
                        info: json!({
                            "mode": "gaussian",
                            "iterations": run.warm.iterations,
                            "objective_first": history.objective.first(),
                            "objective_ema_last": history.ema.last(),
                        }),
                    })
                }
                Err(e @ (socm_core::Error::WarmStartFailed { .. } | socm_core::Error::IllConditionedSpline { .. })) => {
                    let _ = writeln!(log, "warm start failed ({e}); continuing without it");
                    Ok(WarmStartOutcome {
                        path: None,
                        info: json!({ "mode": "gaussian", "failed": e.to_string() }),
                    })
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn save_checkpoint(run: &ResolvedRun, state: &TrainState, numbered: bool) -> Result<()> {
    let a = run_archive(
        &run.setting,
        run.config.problem.seed,
        &run.spec,
        &run.settings,
        run.seed,
        state,
    );
    a.save(&run.output_dir.join(CHECKPOINT_FILE))?;
    if numbered {
        a.save(&run.output_dir.join(format!("checkpoint-{}.ckpt", state.iteration)))?;
    }
    Ok(())
}

/// Train as configured, writing everything into the output directory.
/// Progress and skipped steps are reported on `log`.
pub fn train(run: &ResolvedRun, log: &mut dyn Write) -> Result<TrainReport> {
    let started = Instant::now();
    let dir = &run.output_dir;
    std::fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    let seeds = SeedStream::new(run.seed);
    let truth = ground_truth_for(&run.spec, run.config.problem.seed, run.truth_cache.as_deref())?;
    let warm = prepare_warm_start(run, &seeds, log)?;
    let state = TrainState::initial(&run.spec, &run.settings, &seeds, warm.path)?;
    let mut trainer = Trainer::new(run.spec.clone(), run.settings.clone(), seeds, truth, state)?;
    save_checkpoint(run, trainer.state(), false)?;
    let mut metrics = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    let mut last = None;
    let mut aborted = false;
    while !trainer.finished() {
        let ev = trainer.advance()?;
        if let Some(msg) = &ev.failure {
            let _ = writeln!(log, "iteration {}: step skipped: {msg}", ev.iteration - 1);
        }
        if let Some(rec) = ev.record {
            metrics.write(&rec)?;
            last = Some(rec);
        }
        if ev.aborted {
            let _ = writeln!(
                log,
                "aborting after {} consecutive failed steps",
                trainer.state().consecutive_failures
            );
            aborted = true;
            break;
        }
        if ev.checkpoint_due {
            metrics.flush()?;
            let numbered = ev.iteration % run.settings.checkpoint_every == 0;
            save_checkpoint(run, trainer.state(), numbered)?;
        }
    }
    metrics.flush()?;
    let state = trainer.state();
    if aborted {
        save_checkpoint(run, state, false)?;
    }
    if run.dump_trajectories {
        let traj = trainer.training_batch(state.iteration)?;
        dump_trajectories(&dir.join(TRAJECTORY_FILE), &traj)?;
    }
    let summary = json!({
        "status": if aborted { "aborted" } else { "completed" },
        "setting": run.setting,
        "loss": run.settings.loss.name(),
        "seed": run.seed,
        "problem_seed": run.config.problem.seed,
        "dim": run.spec.dim(),
        "iterations_completed": state.iteration,
        "skipped_updates": state.skipped_updates,
        "final": last.as_ref().map(record_json),
        "l2_error_ema": state.l2_error_ema,
        "grad_norm_sq_ema": state.grad_norm_sq_ema,
        "y0": (run.settings.loss == LossKind::Moment).then_some(state.y0),
        "ground_truth": trainer.truth().is_some(),
        "warm_start": warm.info,
        "settings": settings_json(&run.settings, run),
        "config": serde_json::to_value(&run.config)?,
        "rng": rng_notes(run),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
    });
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(TrainReport {
        output_dir: dir.clone(),
        iterations: state.iteration,
        aborted,
    })
}

fn settings_json(s: &TrainSettings, run: &ResolvedRun) -> Value {
    json!({
        "iterations": s.iterations,
        "batch": s.batch,
        "steps": s.steps,
        "lr_control": s.lr_control,
        "lr_matrices": s.lr_matrices,
        "lr_y0": s.lr_y0,
        "width": s.width,
        "matrix_width": s.matrix_width,
        "eval_every": s.eval_every,
        "eval_batches": s.eval_batches,
        "checkpoint_every": s.checkpoint_every,
        "behavior": s.behavior.name(),
        "max_consecutive_failures": s.max_consecutive_failures,
        "warm_start": run.warm_start.describe(),
        "horizon": run.spec.horizon(),
        "noise_level": run.spec.noise_level(),
    })
}

/// Options of the `eval` command.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub setting: Option<String>,
    pub batches: usize,
    pub batch: Option<usize>,
    pub steps: Option<usize>,
    pub seed: u64,
    pub truth_cache: Option<PathBuf>,
}

/// Recompute every metric for the control stored in a run checkpoint.
pub fn eval(checkpoint: &Path, opts: &EvalOptions) -> Result<Value> {
    let a = Archive::load(checkpoint)?;
    let info = read_info(&a)?;
    if info.kind != "run" {
        return Err(LabError::Config(format!(
            "{} is not a run checkpoint",
            checkpoint.display()
        )));
    }
    let stored = info.problem.setting.clone().unwrap_or_default();
    if let Some(s) = &opts.setting {
        if *s != stored {
            return Err(LabError::Config(format!(
                "checkpoint was trained on `{stored}`, not `{s}`"
            )));
        }
    }
    let spec = build_problem(&info.problem)?;
    let loss = LossKind::from_name(info.loss.as_deref().unwrap_or(""))?;
    let state = read_state(&a, &spec, &TrainSettings::new(loss))?;
    let truth = ground_truth_for(&spec, info.problem.seed, opts.truth_cache.as_deref())?;
    let batch = opts.batch.or(info.batch).unwrap_or(128);
    let steps = opts.steps.or(info.steps).unwrap_or(100);
    if batch == 0 || steps == 0 || opts.batches == 0 {
        return Err(LabError::Config("batch, steps and batches must be positive".into()));
    }
    let seeds = SeedStream::new(opts.seed).child(EVAL_COMMAND_STREAM);
    let rec = evaluate_policy(
        &spec,
        &state.policy,
        truth.as_ref(),
        batch,
        steps,
        opts.batches,
        &seeds,
        state.skipped_updates,
        state.iteration,
    )?;
    Ok(json!({
        "checkpoint": checkpoint.display().to_string(),
        "setting": stored,
        "loss": loss.name(),
        "iteration": state.iteration,
        "batch": batch,
        "steps": steps,
        "batches": opts.batches,
        "seed": opts.seed,
        "metrics": record_json(&rec),
    }))
}

/// Solve for the ground truth of a setting and store its tables in `cache`.
pub fn ground_truth(setting: &str, dim: Option<usize>, problem_seed: u64, cache: &Path) -> Result<PathBuf> {
    let problem = crate::config::ProblemSection {
        setting: Some(setting.to_string()),
        dim,
        seed: problem_seed,
        ..Default::default()
    };
    let spec = build_problem(&problem)?;
    let (_, archive) = truth_cache::compute(&spec, problem_seed)?;
    std::fs::create_dir_all(cache).map_err(LabError::io(cache))?;
    let path = truth_cache::cache_file(cache, &spec, problem_seed);
    archive.save(&path)?;
    Ok(path)
}

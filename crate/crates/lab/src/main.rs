use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use socm_lab::commands::{self, EvalOptions};
use socm_lab::config::{Overrides, RunConfig};
use socm_lab::{exit, LabError};

#[derive(Parser)]
#[command(name = "socm", version, about = "Train and evaluate stochastic optimal controls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a control and write metrics.csv, summary.json and checkpoints.
    Train {
        /// TOML file with [problem], [training] and [output] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// none, gaussian, or a checkpoint holding a warm start.
        #[arg(long)]
        warm_start: Option<String>,
        /// Rescale the setting to this dimension.
        #[arg(long)]
        dim: Option<usize>,
        /// Also write the states of one final batch to trajectories.csv.
        #[arg(long)]
        dump_trajectories: bool,
        /// Directory of ground-truth tables to read or fill.
        #[arg(long)]
        truth_cache: Option<PathBuf>,
    },
    /// Recompute all metrics for a run checkpoint and print them as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        setting: Option<String>,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        truth_cache: Option<PathBuf>,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precompute ground-truth tables for a setting.
    GroundTruth {
        #[arg(long)]
        setting: String,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 0)]
        problem_seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Train {
            config,
            setting,
            loss,
            seed,
            iters,
            output_dir,
            warm_start,
            dim,
            dump_trajectories,
            truth_cache,
        } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            cfg.apply(&Overrides {
                setting,
                loss,
                seed,
                iterations: iters,
                output_dir,
                warm_start,
                dim,
                dump_trajectories,
                truth_cache,
            });
            let resolved = cfg.resolve()?;
            let report = commands::train(&resolved, &mut std::io::stderr())?;
            eprintln!(
                "{} after {} iterations; outputs in {}",
                if report.aborted { "aborted" } else { "finished" },
                report.iterations,
                report.output_dir.display()
            );
            Ok(if report.aborted { exit::ABORTED } else { exit::OK })
        }
        Command::Eval {
            checkpoint,
            setting,
            batches,
            batch,
            steps,
            seed,
            truth_cache,
            out,
        } => {
            let opts = EvalOptions {
                setting,
                batches,
                batch,
                steps,
                seed,
                truth_cache,
            };
            let value = commands::eval(&checkpoint, &opts)?;
            match out {
                Some(path) => socm_lab::output::write_json(&path, &value)?,
                None => println!(
                    "{}",
                    serde_json::to_string_pretty(&value).context("formatting metrics")?
                ),
            }
            Ok(exit::OK)
        }
        Command::GroundTruth {
            setting,
            cache,
            dim,
            problem_seed,
        } => {
            let path = commands::ground_truth(&setting, dim, problem_seed, &cache)?;
            eprintln!("wrote {}", path.display());
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::CONFIG as u8
            } else {
                exit::OK as u8
            });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<LabError>().is_some_and(LabError::is_config);
            ExitCode::from(if config { exit::CONFIG } else { exit::FAILURE } as u8)
        }
    }
}

//! Command-line driver: dataset generation, training, evaluation, inference,
//! loss-component ablations and the gradient verification suite.
//!
//! Every command is reproducible from its config plus seeds; the effective
//! config is copied verbatim into the output directory manifest. Exit codes:
//! 0 success, 2 configuration/schema error, 3 I/O error, 4 data error,
//! 5 checkpoint error, 1 anything else. `DUALSEG_SEED` overrides the
//! configured seeds globally.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dualseg",
    version,
    about = "Dual-network semi-supervised 3D instrument segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset in the container format.
    GenData {
        /// JSON experiment config (profile defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the dual-network model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint bundle inside `--out`.
        #[arg(long)]
        resume: bool,
        /// Override the configured number of steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Override the experiment seed (single run).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint bundle on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Second checkpoint for a paired one-tailed t-test on DSC.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Score the truth masks against themselves (pipeline smoke test).
        #[arg(long)]
        use_truth: bool,
    },
    /// Segment one volume directory coarse-to-fine and write the results.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample directory in the container format.
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write mid-slice portable pixmap renders.
        #[arg(long)]
        render_slices: bool,
    },
    /// Train the loss-component ladder and tabulate the results.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Verify analytic loss gradients against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        side: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 20260101)]
        seed: u64,
        /// Failure threshold on the max relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, force } => {
            commands::gen_data(config.as_deref(), &out, force)
        }
        Command::Train { config, data, out, resume, steps, seed } => {
            commands::train(config.as_deref(), &data, &out, resume, steps, seed)
        }
        Command::Eval { checkpoint, data, out, compare, use_truth } => {
            commands::eval(&checkpoint, &data, &out, compare.as_deref(), use_truth)
        }
        Command::Infer { checkpoint, volume, out, render_slices } => {
            commands::infer(&checkpoint, &volume, &out, render_slices)
        }
        Command::Ablate { config, data, out, steps } => {
            commands::ablate(config.as_deref(), &data, &out, steps)
        }
        Command::GradCheck { side, eps, seed, tolerance } => {
            commands::grad_check(side, eps, seed, tolerance)
        }
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            let category = commands::categorize(&err);
            eprintln!(
                "{}",
                serde_json::json!({ "error": category, "message": format!("{err:#}") })
            );
            commands::exit_code(category)
        }
    }
}

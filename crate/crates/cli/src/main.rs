use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowcast_cli::commands;
use flowcast_cli::config::load_config;

/// Trajectory-forecasting workbench: flow-matching teacher, denoising-ODE
/// sampler, and one-step distilled student on synthetic multi-agent scenes.
#[derive(Parser)]
#[command(name = "flowcast", version, arg_required_else_help = true)]
struct Cli {
    /// JSON config file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted config overrides, e.g. --set sampler.T=50 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Scene-level parallelism for sampling and evaluation. Results are
    /// identical across worker counts; 1 also makes timing fields stable.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/val/test splits plus a manifest.
    GenData,
    /// Train the flow-matching teacher and write teacher.ckpt.
    TrainTeacher,
    /// ODE-sample a split with the teacher; writes samples.jsonl + report.
    Sample {
        /// Dataset split to sample.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Distill the one-step student from cached teacher samples.
    Distill,
    /// Evaluate a checkpoint on a split (ODE for a teacher checkpoint,
    /// single forward for a student); writes report.json + report.txt.
    Evaluate {
        /// Checkpoint to evaluate; defaults to the run's teacher.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render SVG overlays (past solid, hypotheses dotted, closest-to-truth
    /// pink) from the run's sample dump.
    Plot {
        /// Scene ids to draw, comma separated; default: first four sampled.
        #[arg(long, value_delimiter = ',')]
        scenes: Vec<String>,
        /// Split the sampled scenes came from.
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref(), &cli.set)?;
    if cli.workers == 0 {
        anyhow::bail!("--workers must be >= 1");
    }
    match &cli.command {
        Cmd::GenData => commands::cmd_gen_data(&cfg),
        Cmd::TrainTeacher => commands::cmd_train_teacher(&cfg),
        Cmd::Sample { split } => commands::cmd_sample(&cfg, split, cli.workers),
        Cmd::Distill => commands::cmd_distill(&cfg),
        Cmd::Evaluate { checkpoint, split } => {
            commands::cmd_evaluate(&cfg, checkpoint.as_deref(), split, cli.workers)
        }
        Cmd::Plot { scenes, split } => commands::cmd_plot(&cfg, scenes, split),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line surface for the pipeline: dataset generation, the two
//! training phases, click/box evaluation and efficiency benchmarks.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error (bad config
//! file, missing/mismatched checkpoint, invalid sizes), 3 runtime or numeric
//! error (IO failures, diverged training), 4 acceptance-check failure in
//! `bench --mode attn-scaling`.

mod commands;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use promptseg::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Desk-scale promptable segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of colored shapes.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Square image side in pixels (divisible by 32).
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Maximum instances per image.
        #[arg(long, default_value_t = 3)]
        max_instances: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a frozen toy teacher's embeddings into the encoder.
    Distill {
        /// Config file (empty or missing sections fall back to defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed of the frozen random teacher.
        #[arg(long, default_value_t = 1)]
        teacher_seed: u64,
        /// Teacher channel count; when it differs from the student
        /// embedding width a frozen 1x1 adapter reconciles them.
        #[arg(long)]
        teacher_channels: Option<usize>,
        /// Dataset directory (from `gen`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint and trace.
        #[arg(long)]
        out: PathBuf,
        /// Optimization steps.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Seed for student weight initialization.
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        /// Resume from an earlier checkpoint (step counter continues).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// End-to-end prompt-supervised training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Initialize from a checkpoint (e.g. a distilled encoder).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cap the number of optimizer steps (schedule ends at the cap).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
    },
    /// Zero-shot evaluation with simulated clicks or ground-truth boxes.
    Eval {
        /// `point` or `box`.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum clicks in point mode.
        #[arg(long, default_value_t = 5)]
        clicks: usize,
    },
    /// Efficiency accounting and wall-clock measurement.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the model input resolution.
        #[arg(long)]
        input_size: Option<usize>,
        /// `macs`, `time` or `attn-scaling`.
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 9)]
        reps: usize,
        /// Optional directory for CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit-code classes. Usage errors are reported by clap or by explicit
/// checks (an empty dataset is a usage problem); configuration covers
/// config files and checkpoints; everything else at runtime is 3.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. }
        | Error::Invalid(_)
        | Error::CorruptCheckpoint(_)
        | Error::CheckpointVersion(_)
        | Error::CheckpointShape { .. } => 2,
        Error::Io(_) | Error::NonFinite(_) | Error::Shape(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's default exit code for usage errors is 2; this tool
            // reserves 2 for configuration problems.
            let is_help = matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let outcome = match cli.command {
        Command::Gen {
            seed,
            count,
            size,
            max_instances,
            out,
        } => commands::gen(seed, count, size, max_instances, &out),
        Command::Distill {
            config,
            teacher_seed,
            teacher_channels,
            data,
            out,
            steps,
            model_seed,
            resume,
        } => commands::distill(
            config.as_deref(),
            teacher_seed,
            teacher_channels,
            &data,
            &out,
            steps,
            model_seed,
            resume.as_deref(),
        ),
        Command::Train {
            config,
            init,
            data,
            out,
            steps,
            model_seed,
        } => commands::train(
            config.as_deref(),
            init.as_deref(),
            &data,
            &out,
            steps,
            model_seed,
        ),
        Command::Eval {
            mode,
            ckpt,
            data,
            out,
            clicks,
        } => commands::eval(&mode, &ckpt, &data, &out, clicks),
        Command::Bench {
            config,
            input_size,
            mode,
            warmup,
            reps,
            out,
        } => commands::bench(config.as_deref(), input_size, &mode, warmup, reps, out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

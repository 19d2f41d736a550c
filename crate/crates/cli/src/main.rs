//! Command-line front end for the temporal action localization pipeline:
//! synthetic data generation, refinement training, evaluation, gradient
//! checking and proposal inspection.

mod commands;
mod config;
mod error;
mod formats;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "asmloc", version, about = "Weakly-supervised temporal action localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run configuration; missing sections fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path overrides applied on top of the file, e.g.
    /// `--set model.gamma=4 --set schedule.base_epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<config::RunConfig> {
        config::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus (features, manifest, report).
    Generate {
        /// Output directory.
        #[arg(long, env = "ASMLOC_OUT_DIR")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train with multi-step proposal refinement.
    Train {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, metrics and proposals.
        #[arg(long, env = "ASMLOC_OUT_DIR")]
        out: PathBuf,
        /// Resample every video to this many snippets (drops ground truth).
        #[arg(long, value_name = "T")]
        fixed_t: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint: mAP over an IoU grid plus duration buckets.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding checkpoint.json / checkpoint.bin.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "ASMLOC_OUT_DIR")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print per-video inference (classes, proposals, detections) as JSON.
    InspectProposals {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict the output to one video id.
        #[arg(long)]
        video: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, cfg } => commands::generate(&cfg.load()?, &out),
        Command::Train {
            data,
            out,
            fixed_t,
            cfg,
        } => commands::train(&cfg.load()?, &data, &out, fixed_t),
        Command::Eval {
            data,
            checkpoint,
            out,
            cfg,
        } => commands::eval(&cfg.load()?, &data, &checkpoint, &out),
        Command::Gradcheck { tolerance, cfg } => commands::gradcheck(&cfg.load()?, tolerance),
        Command::InspectProposals {
            data,
            checkpoint,
            video,
            cfg,
        } => commands::inspect_proposals(&cfg.load()?, &data, &checkpoint, video.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

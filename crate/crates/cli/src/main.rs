//! Operator-facing pipeline: synthesize data, train the hierarchy, evaluate,
//! predict, explain, and run class-conditional scenario analysis.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fundus_dqa::error::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "fundus-dqa", version, about = "Hierarchical diagnostic-quality assessment of fundus photographs")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the three stage models plus the flat baseline.
    Train {
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate hierarchical and flat models on the test split.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one image.
    Predict {
        #[arg(long)]
        out: PathBuf,
        /// Input image (.ppm natively; .png with the `png` feature).
        #[arg(long)]
        image: PathBuf,
    },
    /// Saliency map plus heat/transparency overlays for one image.
    Explain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Threshold sweep and class-conditional scenario selection.
    Scenario {
        #[arg(long)]
        out: PathBuf,
    },
}

/// 0 success, 2 config error, 3 data error, 4 numeric failure, 1 otherwise.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data { .. } | Error::Image(_) | Error::Io(_) | Error::Checkpoint { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Synth { out } => commands::cmd_synth(&cfg, out),
        Command::Train { out } => commands::cmd_train(&cfg, out),
        Command::Eval { out } => commands::cmd_eval(&cfg, out),
        Command::Predict { out, image } => commands::cmd_predict(&cfg, out, image),
        Command::Explain { out, image } => commands::cmd_explain(&cfg, out, image),
        Command::Scenario { out } => commands::cmd_scenario(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

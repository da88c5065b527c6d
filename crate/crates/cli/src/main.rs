mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wipose::net::Mode;

#[derive(Debug, Parser)]
#[command(name = "wipose", version, about = "Geometry-conditioned WiFi pose estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random stream of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Experiment or session configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Unify TX/RX coordinates from board correspondences and distance measurements.
    Calibrate(Common),
    /// Simulate the synthetic dataset described by the config's scene.
    Simulate(Common),
    /// Compute and cache feature maps for a dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding index.json.
        #[arg(long)]
        data: PathBuf,
        /// Side of the square feature maps; defaults to the model config's.
        #[arg(long)]
        map_size: Option<usize>,
    },
    /// Train one model on the configured split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Overrides the config's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every mode with identical data and seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint with perturbed device coordinates.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Perturbation std (m); repeatable. Defaults to the config's list.
        #[arg(long = "sigma")]
        sigmas: Vec<f64>,
    },
    /// Write per-frame decoder inputs of the test split with layout and sample labels.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and prints the relevant help.
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(c) => commands::calibrate(&c),
        Command::Simulate(c) => commands::simulate(&c),
        Command::Preprocess { common, data, map_size } => commands::preprocess(&common, &data, map_size),
        Command::Train {
            common,
            data,
            mode,
            epochs,
        } => commands::train(&common, &data, mode, epochs),
        Command::Eval { common, data, checkpoint } => commands::eval(&common, &data, &checkpoint),
        Command::Ablate { common, data, epochs } => commands::ablate(&common, &data, epochs),
        Command::Perturb {
            common,
            data,
            checkpoint,
            sigmas,
        } => commands::perturb(&common, &data, &checkpoint, &sigmas),
        Command::ExportFeatures { common, data, checkpoint } => commands::export_features(&common, &data, &checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! `ultralbm`: train, distill, evaluate and analyze ultralight lesion segmenters.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{AnalyzeArgs, ConfigArg, DistillArgs, GradcheckArgs, ModelArgs, SynthArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "ultralbm", version, about = "Ultralight bidirectional-Mamba U-Net for binary lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model with BCE + Dice, one run per seed
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory with images/ and masks/
        #[arg(long)]
        data_dir: Option<std::path::PathBuf>,
        /// Output directory for checkpoints, histories and the effective config [default: runs/train]
        #[arg(long)]
        out_dir: Option<std::path::PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train a student against a frozen teacher checkpoint
    Distill {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory with images/ and masks/
        #[arg(long)]
        data_dir: Option<std::path::PathBuf>,
        /// Output directory [default: runs/distill]
        #[arg(long)]
        out_dir: Option<std::path::PathBuf>,
        /// Teacher checkpoint
        #[arg(long)]
        teacher: Option<std::path::PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        distill: DistillArgs,
    },
    /// Report IoU and DSC of a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: Option<std::path::PathBuf>,
        /// Dataset directory with images/ and masks/
        #[arg(long)]
        data_dir: Option<std::path::PathBuf>,
        /// Optional directory for eval.json and the effective config
        #[arg(long)]
        out_dir: Option<std::path::PathBuf>,
        /// Square input size [default: 64]
        #[arg(long)]
        image_size: Option<usize>,
        /// Evaluation batch size [default: 8]
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Write thresholded mask predictions as PNG
    Predict {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint to run
        #[arg(long)]
        checkpoint: Option<std::path::PathBuf>,
        /// Directory of images, or a dataset directory with images/
        #[arg(long)]
        data_dir: Option<std::path::PathBuf>,
        /// Output directory for <id>_pred.png files
        #[arg(long)]
        out_dir: Option<std::path::PathBuf>,
        /// Square input size [default: 64]
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Count parameters and FLOPs of a configuration
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        /// Optional directory for analyze.json and the effective config
        #[arg(long)]
        out_dir: Option<std::path::PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        analyze: AnalyzeArgs,
    },
    /// Generate a synthetic lesion dataset
    Gendata {
        #[command(flatten)]
        config: ConfigArg,
        /// Output dataset directory [default: data/synthetic]
        #[arg(long)]
        out_dir: Option<std::path::PathBuf>,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Compare analytic gradients with central differences
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        /// Optional directory for gradcheck.json
        #[arg(long)]
        out_dir: Option<std::path::PathBuf>,
        #[command(flatten)]
        gradcheck: GradcheckArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

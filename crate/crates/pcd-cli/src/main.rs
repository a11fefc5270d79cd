//! `pcd`: synthesize landmark datasets, train and evaluate pose-conditioned
//! dendritic models, check gradients, and plot cumulative error curves.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcd_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pcd", version, about = "Pose-conditioned dendritic landmark localization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Settings file, one `key = value` per line.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the seeds in the settings.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for outputs, created if missing.
    #[arg(long, default_value = ".", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    /// Normalize pixel errors by sqrt(w*h) of the face box.
    Bbox,
    /// Normalize by the outer eye-corner distance.
    Interocular,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    /// Fine stage when the checkpoint has one, coarse otherwise.
    Auto,
    Coarse,
    Fine,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of records to generate.
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Manifest file name (default `synth-s<seed>-n<count>.jsonl`).
        #[arg(long)]
        name: Option<String>,
    },
    /// Train a model and write a checkpoint plus an epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training manifest (overrides `paths.train_manifest`).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Validation manifest scored after each epoch (overrides `paths.val_manifest`).
        #[arg(long, value_name = "PATH")]
        val: Option<PathBuf>,
        /// Checkpoint to start from (overrides `paths.init`).
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        /// Checkpoint path to write (overrides `paths.checkpoint`; default `<out>/model.ckpt`).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Add a hard-example mining phase after the uniform epochs.
        #[arg(long)]
        mining: bool,
        /// Build the keypoint network without pose conditioning.
        #[arg(long)]
        no_conditioning: bool,
        /// Spend the keypoint loss on every pixel instead of the sampled mask.
        #[arg(long)]
        plain_softmax: bool,
        /// Train the fine localization stage of an existing checkpoint (needs --init).
        #[arg(long)]
        fine_stage: bool,
        /// Double the last two branch stages at build time.
        #[arg(long)]
        more_filters: bool,
        /// Treat pose labels as absent: freeze the pose network, drop the pose loss.
        #[arg(long)]
        no_pose_labels: bool,
        /// Epochs per phase (overrides `train.epochs`).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint over a manifest and write its CED table.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (overrides `paths.checkpoint`).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Manifest to evaluate on (overrides `paths.val_manifest`).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Average each prediction with a horizontally flipped pass.
        #[arg(long)]
        tta: bool,
        /// Error normalizer (overrides `eval.protocol`).
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        /// Localization stage to decode.
        #[arg(long, value_enum, default_value_t = StageArg::Auto)]
        stage: StageArg,
        /// Sweep visibility thresholds and report the F1-best one.
        #[arg(long)]
        calibrate_tau: bool,
    },
    /// Run the finite-difference gradient suite and print one line per check.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Overlay CED tables (`threshold,fraction` CSV) in a static SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// CED tables to overlay.
        #[arg(required = true, value_name = "CSV")]
        tables: Vec<PathBuf>,
        /// Comma-separated curve labels (default: file stems).
        #[arg(long)]
        labels: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too; only real usage
            // mistakes exit nonzero.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 1,
                Error::Data(_) | Error::Io(_) => 2,
                Error::Numeric(_) => 3,
            })
        }
    }
}

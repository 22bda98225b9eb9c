//! Command-line entry point. All hyperparameters live in the config file;
//! flags carry only paths, the mode/seed overrides, and verbosity.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tumorsynth::config::ExperimentConfig;
use tumorsynth::pipeline::{self, PipelineError};
use tumorsynth::training::AugMode;

#[derive(Parser)]
#[command(
    name = "tumorsynth",
    version,
    about = "Boundary-aware GAN augmentation pipeline for multimodal tumor segmentation"
)]
struct Cli {
    /// Experiment config file (key=value lines; see `dump-defaults`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory receiving every artifact the command writes.
    #[arg(long, global = true, env = "TUMORSYNTH_OUT")]
    out: Option<PathBuf>,

    /// Stream per-iteration / per-epoch progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset under the configured data dir.
    Phantom,
    /// Adversarial training on the training split; writes loss CSV and checkpoints.
    TrainGan {
        /// Resume from a previously saved generator/discriminator checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthesize cases from deformed training labels for inspection.
    Synth {
        /// Generator checkpoint to sample from.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the segmentation network under an augmentation mode.
    TrainSeg {
        /// Override the configured mode: none, traditional, or proposed.
        #[arg(long)]
        mode: Option<String>,
        /// Generator checkpoint (required when the mode is proposed).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a segmentation checkpoint on the test split.
    Evaluate {
        /// Segmentation checkpoint to score.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every augmentation mode over several seeds and tabulate test metrics.
    Compare {
        /// Seeds per mode.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Generator checkpoint backing the proposed-mode rows.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the default config with every key spelled out.
    DumpDefaults,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if matches!(cli.command, Command::DumpDefaults) {
        print!("{}", ExperimentConfig::dump_defaults());
        return Ok(());
    }
    let config_path = cli
        .config
        .ok_or_else(|| PipelineError::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(&config_path).map_err(|e| {
        PipelineError::Config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let cfg = ExperimentConfig::parse(&text)?;
    let out = cli
        .out
        .ok_or_else(|| PipelineError::Config("--out (or TUMORSYNTH_OUT) is required".into()))?;
    let v = cli.verbose;
    match cli.command {
        Command::Phantom => pipeline::cmd_phantom(&cfg, &out, v),
        Command::TrainGan { checkpoint } => {
            pipeline::cmd_train_gan(&cfg, &out, checkpoint.as_deref(), v)
        }
        Command::Synth { checkpoint } => pipeline::cmd_synth(&cfg, &out, &checkpoint, v),
        Command::TrainSeg { mode, checkpoint } => {
            let mode = mode
                .map(|m| m.parse::<AugMode>().map_err(PipelineError::Config))
                .transpose()?;
            pipeline::cmd_train_seg(&cfg, &out, mode, checkpoint.as_deref(), v)
        }
        Command::Evaluate { checkpoint } => pipeline::cmd_evaluate(&cfg, &out, &checkpoint),
        Command::Compare { seeds, checkpoint } => {
            pipeline::cmd_compare(&cfg, &out, seeds, checkpoint.as_deref(), v)
        }
        Command::DumpDefaults => unreachable!("handled above"),
    }
}

mod commands;
mod outdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use disentangle::warp::PeMode;

/// Category-level 3D reconstruction and recognition on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "disentangle", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Fit shape, texture and camera to one image and mask.
    Fit(FitArgs),
    /// Train the networks on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground truth) on a dataset split.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, required_unless_present = "print_config")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core, 1 is bit-exact across runs.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Replace a complete or partial previous run in the output directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    /// RGB image.
    #[arg(long, required_unless_present = "print_config")]
    pub image: Option<PathBuf>,
    /// Foreground mask of the same size.
    #[arg(long, required_unless_present = "print_config")]
    pub mask: Option<PathBuf>,
    /// Starting mesh (OBJ with the configured icosphere topology, mirror
    /// symmetric); the scaled sphere when absent.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PeArg {
    None,
    Pe2,
    Pe4,
}

impl From<PeArg> for PeMode {
    fn from(p: PeArg) -> Self {
        match p {
            PeArg::None => PeMode::None,
            PeArg::Pe2 => PeMode::Pe2,
            PeArg::Pe4 => PeMode::Pe4,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `synth`; overrides the configured one.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Continue an interrupted run from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Positional encoding of the canonical chart.
    #[arg(long, value_enum)]
    pub pe: Option<PeArg>,
    /// Drop the shape encoder from the recognition branch.
    #[arg(long)]
    pub no_shape_encoder: bool,
    /// Caps the number of phase-A steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Steps between checkpoints.
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    /// Checkpoint and exit after this many steps of this invocation; the run
    /// stays resumable with `--resume`.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Dataset split to score.
    #[arg(long)]
    pub split: Option<String>,
    /// Score the ground truth instead of a checkpoint.
    #[arg(long)]
    pub gt_oracle: bool,
    /// PCK threshold as a fraction of the image diagonal.
    #[arg(long)]
    pub alpha: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

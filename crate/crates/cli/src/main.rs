//! `fundus-height`: corpus preparation, synthetic data, training, evaluation,
//! inference and ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 data or checkpoint error,
//! 3 non-finite loss.

mod ablate;
mod commands;
mod figures;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use fundus_height::config::{Scale, Sweep};

#[derive(Parser, Debug)]
#[command(name = "fundus-height", version, about = "Fundus image to macular heightmap translation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct GlobalArgs {
    /// Run configuration, TOML or JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory (eval, infer; resumes training when given to train).
    #[arg(long, global = true)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, global = true, action = ArgAction::Set)]
    pub deterministic: Option<bool>,
    /// Built-in configuration preset, used when no --config is given.
    #[arg(long, global = true, value_enum)]
    pub scale: Option<ScaleArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Desk,
    Full,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Full => Scale::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    StackDepth,
    Supervision,
    PixelNorm,
}

impl From<SweepArg> for Sweep {
    fn from(s: SweepArg) -> Self {
        match s {
            SweepArg::StackDepth => Sweep::StackDepth,
            SweepArg::Supervision => Sweep::Supervision,
            SweepArg::PixelNorm => Sweep::PixelNorm,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrast-enhance, resize and re-emit a corpus with its manifest.
    Prep(PrepArgs),
    /// Write a synthetic corpus in the standard layout.
    Synth(SynthArgs),
    /// Train every configured stage and write stage checkpoints.
    Train(DataArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Predict heightmaps for individual fundus images.
    Infer(InferArgs),
    /// Run sweep points and emit comparison tables and figures.
    Ablate(AblateArgs),
}

#[derive(Args, Clone, Debug)]
pub struct PrepArgs {
    /// Raw corpus root (with manifest.csv).
    #[arg(long)]
    pub input: PathBuf,
    /// Resize target; defaults to the configured image size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub no_clahe: bool,
    #[arg(long)]
    pub clip_limit: Option<f64>,
    /// Tiles per side.
    #[arg(long)]
    pub tile_grid: Option<usize>,
}

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    /// Number of pairs.
    #[arg(short, long)]
    pub n: usize,
    /// Side length; defaults to the configured image size.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Corpus root; defaults to `paths.data_root` from the configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint whose discriminator supplies LPIPS features; defaults to --ckpt.
    #[arg(long)]
    pub lpips_ckpt: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct InferArgs {
    /// Fundus PNG files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub no_clahe: bool,
}

#[derive(Args, Clone, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Sweeps to run; defaults to `ablation.sweeps` from the configuration.
    #[arg(long, value_enum)]
    pub sweep: Vec<SweepArg>,
    /// Fixed LPIPS discriminator; defaults to the first completed sweep point.
    #[arg(long)]
    pub lpips_ckpt: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let g = &cli.global;
    let result = match &cli.command {
        Command::Prep(a) => commands::prep(g, a),
        Command::Synth(a) => commands::synth(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Infer(a) => commands::infer(g, a),
        Command::Ablate(a) => ablate::ablate(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if let run::CliError::Core(fundus_height::Error::Divergence { recent, .. }) = &e {
                for (i, l) in recent.iter().enumerate() {
                    log::error!(
                        "  recent[{i}]: adv {} pix {} per {} total {}",
                        l.adversarial,
                        l.pixel,
                        l.perceptual,
                        l.total
                    );
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}

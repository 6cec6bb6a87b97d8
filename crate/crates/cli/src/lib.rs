//! Command-line driver: training, fusion, evaluation and verification.

pub mod commands;
pub mod config;
pub mod exit;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moctefuse::verify::Scope;

pub use exit::CliError;

#[derive(Debug, Parser)]
#[command(name = "moctefuse", version, about = "Illumination-gated infrared/visible image fusion")]
pub struct Cli {
    /// More log output (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the illumination gate on day/night labelled visible images.
    TrainGate(TrainGateArgs),
    /// Train the fusion network against a frozen gate.
    TrainFuse(TrainFuseArgs),
    /// Fuse one pair or a directory of pairs.
    Fuse(FuseArgs),
    /// Compute EN, SD, MI and VIF for fused images.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's header and parameter manifest.
    InspectCheckpoint(InspectArgs),
    /// Write the synthetic gate corpus and fusion pairs.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainCommon {
    /// Dataset root with `vi/` (and `ir/` for fusion) subdirectories.
    #[arg(long)]
    pub data: PathBuf,
    /// INI settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV training log [default: <out> with a .log.csv extension].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint (parameters, optimizer and counters).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any setting, e.g. `--set fusion.channels=8`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainGateArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Labelled images to report held-out accuracy on after training.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ForceGate {
    /// P_H = 1: only the high-illumination expert contributes.
    Hi,
    /// P_H = 0: only the low-illumination expert contributes.
    Lo,
}

impl ForceGate {
    pub fn high(self) -> bool {
        self == ForceGate::Hi
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFuseArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Trained gate checkpoint (kept frozen).
    #[arg(long)]
    pub gate: PathBuf,
    #[arg(long)]
    pub force_gate: Option<ForceGate>,
    #[arg(long)]
    pub crop_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    /// Infrared image or directory.
    #[arg(long)]
    pub ir: PathBuf,
    /// Visible image or directory.
    #[arg(long)]
    pub vi: PathBuf,
    #[arg(long)]
    pub gate: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory; images are written as `<id>_fused.png`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force_gate: Option<ForceGate>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ir: PathBuf,
    #[arg(long)]
    pub vi: PathBuf,
    #[arg(long)]
    pub fused: PathBuf,
    /// Report path; `.json` and `.csv` files are written next to each other.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_scope)]
    pub scope: Scope,
    /// [default: $MOCTEFUSE_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    s.parse()
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output root: `fusion/{ir,vi}`, `gate/train/vi`, `gate/heldout/vi`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Bright and dark training images each.
    #[arg(long, default_value_t = 200)]
    pub gate_per_class: usize,
    /// Bright and dark held-out images each.
    #[arg(long, default_value_t = 50)]
    pub heldout_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub gate_size: usize,
    /// [default: $MOCTEFUSE_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.sequential {
        moctefuse::par::set_sequential(true);
    }
    match cli.command {
        Command::TrainGate(a) => commands::train_gate(&a),
        Command::TrainFuse(a) => commands::train_fuse(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::InspectCheckpoint(a) => commands::inspect(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

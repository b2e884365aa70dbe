//! `csn`: cost reports, sweeps, gradient checks, desk-scale training and
//! filter images for 3D channel-separated networks.
//!
//! Exit codes: 0 success, 1 invalid input or runtime error, 2 a check ran
//! and failed.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "csn", version, about = "3D channel-separated networks: analysis, training, visualization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer and total params, FLOPs and channel interactions.
    Analyze(AnalyzeArgs),
    /// Central finite-difference checks of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Clip and video top-1 of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Cost table (and optionally accuracy) over block variants.
    Sweep(SweepArgs),
    /// Render conv1 or a depthwise layer of a checkpoint as an image grid.
    VizFilters(VizArgs),
    /// Write a synthetic moving-squares dataset.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Table2,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Architecture name, e.g. ir-csn-50, resnet3d-26, bottleneck-dg4-16.
    #[arg(long)]
    arch: String,
    /// Clip size `TxHxW` (or `CxTxHxW`, `NxCxTxHxW`).
    #[arg(long, default_value = "8x224x224")]
    input: String,
    #[arg(long, default_value_t = 400)]
    classes: usize,
    /// Count FLOPs over output or input voxels.
    #[arg(long, default_value = "output")]
    voxels: String,
    /// Add BN scale/shift to the parameter total.
    #[arg(long)]
    include_bn: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also compare the reference networks against published totals;
    /// exits 2 on a tolerance failure.
    #[arg(long, value_enum)]
    check: Option<Reference>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Layers,
    Blocks,
    TinyModel,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(value_enum)]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags shared by every command that trains.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// JSON file with optional `train`, `sample` and `task` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Clips per video at evaluation.
    #[arg(long)]
    eval_clips: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "tiny-ip-csn")]
    arch: String,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset directory.
    #[arg(long)]
    held_out: Option<PathBuf>,
    /// Output directory for history.csv, history.json and final.csnw.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Write checkpoints/iter_NNNNNN.csnw every this many iterations.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Base architecture; its block family is swapped per variant.
    #[arg(long, default_value = "bottleneck-16")]
    arch: String,
    /// Comma-separated axes: groups-3x3x3, groups-1x1x1, block-kind.
    #[arg(long, value_delimiter = ',', default_value = "groups-3x3x3,groups-1x1x1")]
    axis: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "8x224x224")]
    input: String,
    #[arg(long, default_value_t = 400)]
    classes: usize,
    /// Train every variant on `--data` and report held-out video@1.
    #[arg(long, requires_all = ["data", "held_out"])]
    train: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    held_out: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `conv1`, a depthwise layer such as `conv3_2.spatial`, or `comp_<k>`.
    #[arg(long)]
    layer: String,
    #[arg(long)]
    out: PathBuf,
    /// Nearest-neighbour upscale factor.
    #[arg(long, default_value_t = csn_core::viz::DEFAULT_SCALE)]
    scale: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with an optional `task` section.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::VizFilters(a) => commands::viz_filters(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

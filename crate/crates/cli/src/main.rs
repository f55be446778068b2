//! `tdla`: dataset tooling, synthetic corpora, training and evaluation.

mod commands;
mod imageio;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tdla", version, about = "Document layout analysis workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-category instance counts and shares.
    Stats(StatsArgs),
    /// Stratified train/val/test split.
    Split(SplitArgs),
    /// Relabel with a builtin or file mapping.
    Remap(RemapArgs),
    /// Render a synthetic corpus.
    Gen(GenArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Score predictions or a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Metric deltas between two result files.
    Compare(CompareArgs),
    /// Check annotation invariants; exits 2 on violations.
    Validate(ValidateArgs),
}

#[derive(Args)]
pub struct StatsArgs {
    /// COCO annotation file.
    #[arg(required_unless_present = "published")]
    input: Option<PathBuf>,
    /// Table file to write.
    #[arg(long)]
    out: PathBuf,
    /// Split manifest from `tdla split`, for per-split columns.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Tabulate the bundled published category counts instead of a file.
    #[arg(long, conflicts_with = "input")]
    published: bool,
}

#[derive(Args)]
pub struct SplitArgs {
    input: PathBuf,
    #[arg(long, default_value = "6,1,3")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
pub struct RemapArgs {
    input: PathBuf,
    /// Builtin map name or a mapping file.
    #[arg(long)]
    map: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct GenArgs {
    /// Flat key=value corpus description; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    pages: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// rectangular, manhattan, non_manhattan or multi_column.
    #[arg(long)]
    family: Option<String>,
    /// Keep every category of the source taxonomy instead of only the palette.
    #[arg(long)]
    full_taxonomy: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// COCO annotations of the training pages.
    #[arg(long)]
    data: PathBuf,
    /// Page images; defaults to `images/` beside the annotations.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Flat key=value file. `model.*` keys configure the network.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset the config starts from: toy or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Gradient workers; results do not depend on it. Defaults to 1.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    no_encoder: bool,
    #[arg(long)]
    no_dynamic_decoder: bool,
    #[arg(long)]
    no_shared_heads: bool,
    /// Heads share one hidden trunk.
    #[arg(long)]
    shared_trunk: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Ground-truth COCO file.
    #[arg(long)]
    gt: PathBuf,
    /// COCO file of scored predictions.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Checkpoint to run on the ground-truth pages.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Page images for `--checkpoint`; defaults to `images/` beside the gt.
    #[arg(long)]
    images: Option<PathBuf>,
    /// boxes, masks or both.
    #[arg(long, default_value = "both")]
    mode: String,
    #[arg(long, default_value_t = 0.0)]
    score_threshold: f64,
    #[arg(long, default_value_t = 100)]
    max_dets: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also write the checkpoint's predictions as COCO.
    #[arg(long)]
    save_predictions: Option<PathBuf>,
    /// Results file, one JSON record per mode.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(required_unless_present = "ablation_fixture")]
    a: Option<PathBuf>,
    #[arg(required_unless_present = "ablation_fixture")]
    b: Option<PathBuf>,
    /// Compare the bundled published ablation rows against the full model.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    ablation_fixture: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct ValidateArgs {
    input: PathBuf,
    /// Write the violation report here as well.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats(a) => commands::stats(a),
        Command::Split(a) => commands::split(a),
        Command::Remap(a) => commands::remap(a),
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Validate(a) => commands::validate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

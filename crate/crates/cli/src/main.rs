//! `rbvl`: generate corpora, pretrain teachers, train and evaluate students,
//! and run the comparison matrix.
//!
//! Settings resolve in three layers: built-in defaults, then the JSON file
//! given by `--config` (fields it omits keep their defaults), then explicit
//! flags.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbvl::experiments::SweepAxis;
use rbvl::losses::{Ablations, Metric};

#[derive(Parser, Debug)]
#[command(name = "rbvl", version, about = "Rebalanced vision-language distillation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (corpus.json + feats.bin).
    Generate(GenerateArgs),
    /// Pretrain the image and text teachers on a corpus.
    PretrainTeachers(TeacherArgs),
    /// Train one student and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a student checkpoint.
    Eval(EvalArgs),
    /// Full objective against cr-only and every single-term removal.
    Ablate(MatrixArgs),
    /// Structure-alignment metric variants (MAE, MSE, KL, WD).
    MetricSweep(MatrixArgs),
    /// Sweep batch size, temperature or λ.
    ParamSweep(ParamSweepArgs),
    /// Standalone teachers against strong-to-weak and weak-to-strong distillation.
    ImbalanceProbe(ProbeArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Generator config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `imbalanced` or `balanced`; selects the defaults the config overrides.
    #[arg(long, default_value = "imbalanced")]
    preset: String,
    #[arg(long)]
    n_instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TeacherArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Teacher config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Training settings shared by every command that trains students.
#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory written by `pretrain-teachers`.
    #[arg(long)]
    teachers: PathBuf,
    /// Train config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
    /// Comma-separated losses to remove, e.g. `iic,ttc,sa`.
    #[arg(long, value_parser = parse_ablations)]
    ablate: Option<Ablations>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Seeds per variant.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
}

#[derive(Args, Debug)]
struct ParamSweepArgs {
    #[command(flatten)]
    matrix: MatrixArgs,
    /// `batch`, `tau` or `lambda`.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values; λ accepts `learnable`. Defaults per axis.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    teachers: PathBuf,
    /// Teacher config JSON for the distilled single-modal encoders.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: rbvl::Error| e.to_string())
}

fn parse_ablations(s: &str) -> Result<Ablations, String> {
    Ablations::parse_list(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

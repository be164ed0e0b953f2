//! `mlvtg`: data generation, training, evaluation, benchmarking and
//! inspection for the grounding model.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric
//! failure, 1 anything else.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlvtg::bench::CountingAlloc;
use mlvtg::Error;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Debug, Parser)]
#[command(name = "mlvtg", version, about = "Video temporal grounding with state-space aligner blocks")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run config; command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Write a random frozen-block file standing in for a pretrained layer.
    MakeSurrogate(SurrogateArgs),
    /// Train the full pipeline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Time the aligner block against the attention baseline.
    Bench(BenchArgs),
    /// Dump query×clip cosine similarity at three depths for one sample.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub signal_strength: f64,
    #[arg(long, default_value_t = 32)]
    pub d_video: usize,
    #[arg(long, default_value_t = 24)]
    pub d_query: usize,
    #[arg(long, default_value_t = 8)]
    pub n_concepts: usize,
    /// Clip-count range, `MIN:MAX`.
    #[arg(long, default_value = "24:40", value_parser = parse_range)]
    pub video_len: (usize, usize),
    /// Token-count range, `MIN:MAX`.
    #[arg(long, default_value = "6:10", value_parser = parse_range)]
    pub query_len: (usize, usize),
}

#[derive(Debug, Args)]
pub struct SurrogateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Registered frozen architecture name.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub d_llm: Option<usize>,
    #[arg(long)]
    pub layer_index: Option<u32>,
}

/// Model and optimization overrides shared by training.
#[derive(Debug, Args, Default)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Registered gate name.
    #[arg(long)]
    pub gate: Option<String>,
    /// Registered scan strategy name.
    #[arg(long)]
    pub ssm_mode: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Drop the aligner stage.
    #[arg(long)]
    pub no_aligner: bool,
    /// Drop the refiner stage.
    #[arg(long)]
    pub no_refiner: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Frozen-block file; defaults to a seeded surrogate.
    #[arg(long)]
    pub frozen: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Comma-separated registered component names.
    #[arg(long, value_delimiter = ',')]
    pub components: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sample_id: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected MIN:MAX, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric_error() {
        4
    } else if e.is_data_error() {
        3
    } else if matches!(e, Error::Invalid(_) | Error::Unknown { .. } | Error::UnsupportedMode(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

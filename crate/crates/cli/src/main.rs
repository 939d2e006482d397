mod commands;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "memoattn", version, about = "Attention memoization on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, or tokenize a text file.
    Gen(GenArgs),
    /// Harvest attention maps, train embedders, build indexes and profile layers.
    Build(BuildArgs),
    /// Run baseline and memoized inference and report speedup and quality.
    Infer(InferArgs),
    /// Time mapped against copied gathers over batch sizes and sequence lengths.
    BenchStore(BenchStoreArgs),
    /// Per-record reuse counts and histogram from an inference hit log.
    ReuseReport(ReuseArgs),
    /// Memoization rate, accuracy, deviation and speedup across thresholds.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct GenArgs {
    /// Output corpus file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Tokenize this text file (one sequence per line) instead of generating.
    #[arg(long)]
    pub from_text: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub num_sequences: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 16)]
    pub templates: usize,
    /// Fraction of tokens resampled per sequence; 1.0 gives an i.i.d. corpus.
    #[arg(long, default_value_t = 0.2)]
    pub mutation_rate: f64,
    #[arg(long, default_value_t = 1000)]
    pub vocab_size: u32,
    /// `template-id` or `parity`.
    #[arg(long, default_value = "template-id")]
    pub label_rule: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct BuildArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub assets_dir: PathBuf,
    /// Model context length; defaults to the longest corpus sequence.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    /// Feed-forward width; defaults to the hidden dimension.
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long, default_value_t = 1.5)]
    pub attn_gain: f32,
    /// Fraction of the corpus held out for level calibration and profiling.
    #[arg(long, default_value_t = 0.2)]
    pub held_out: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.003)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 16)]
    pub pairs_per_anchor: usize,
    /// Level whose threshold the stored layer profiles are measured at.
    #[arg(long, default_value = "moderate")]
    pub level: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ServeArgs {
    /// Corpus to run inference on.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub assets_dir: PathBuf,
    /// Skip layers the performance model predicts no benefit for.
    #[arg(long)]
    pub selective: bool,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Carry profile times over to the workload `linear`ly or `quadratic`ally.
    #[arg(long, default_value = "linear")]
    pub scaling: String,
    /// Timed repetitions; the fastest is reported.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value = "reports")]
    pub report_out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub serve: ServeArgs,
    #[arg(long, conflicts_with = "level")]
    pub threshold: Option<f64>,
    /// `conservative`, `moderate` or `aggressive`.
    #[arg(long)]
    pub level: Option<String>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct BenchStoreArgs {
    /// Directory holding one store per sequence length; created if missing.
    #[arg(long)]
    pub store_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub records: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,32,64")]
    pub batches: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    pub seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "reports")]
    pub report_out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ReuseArgs {
    #[arg(long)]
    pub assets_dir: PathBuf,
    /// Hit log written by `infer`; defaults to the one in the report directory.
    #[arg(long)]
    pub hit_log: Option<PathBuf>,
    #[arg(long, default_value = "reports")]
    pub report_out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub serve: ServeArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.8,0.9,0.99,1")]
    pub thresholds: Vec<f64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result: Result<()> = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Build(a) => commands::build(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::BenchStore(a) => commands::bench_store(&a),
        Command::ReuseReport(a) => commands::reuse_report(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

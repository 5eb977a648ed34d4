//! `ksa`: masks, cache-cost tables, equivalence suites and toy-model runs.
//!
//! Every run prints its resolved configuration as one JSON line on stdout;
//! data goes to `--out` (or stdout when absent). Exit codes: 0 success,
//! 1 failed check or runtime error, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ksa_core::DType;
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "ksa", version, about = "Summary-token attention toolkit")]
pub struct Cli {
    /// Seed for every random draw in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Element type for numeric work.
    #[arg(long, global = true, env = "KSA_DTYPE", default_value = "f32")]
    pub dtype: DType,
    /// Data output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Export a visibility mask.
    Mask(MaskArgs),
    /// KV-cache cost table or curve.
    Mem(MemArgs),
    /// Decode-vs-prefill and block-sparse-vs-dense oracle suites.
    Equiv(EquivArgs),
    /// Train the toy model on a synthetic task.
    Train(TrainArgs),
    /// Teacher/student warm-up with annealed summary projections.
    Distill(DistillArgs),
    /// Attention weights of one query in one layer.
    AttnDump(AttnDumpArgs),
    /// Token-by-token decode through the summary cache.
    DecodeBench(DecodeBenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Ksa,
    Swa,
    Sca,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    Csv,
    Pbm,
    Blocks,
}

#[derive(Debug, Args, Serialize)]
pub struct MaskArgs {
    /// Text tokens.
    #[arg(long)]
    pub n: usize,
    /// Chunk size.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Sliding chunks.
    #[arg(long, default_value_t = 1)]
    pub c: usize,
    #[arg(long, value_enum, default_value_t = MaskKind::Ksa)]
    pub kind: MaskKind,
    /// SWA window; defaults to `(C+1)·k`.
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long, value_enum, default_value_t = MaskFormat::Csv)]
    pub format: MaskFormat,
    #[arg(long, default_value_t = 4)]
    pub block_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MemFormat {
    Table,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct MemArgs {
    /// Comma-separated mechanisms; defaults to the eight single mechanisms.
    #[arg(long)]
    pub mechanisms: Option<String>,
    /// Sequence length for the table.
    #[arg(long, default_value_t = 131_072)]
    pub n: u64,
    /// `start:end:xF` (geometric) or `start:end:+S` (arithmetic).
    #[arg(long)]
    pub n_range: Option<String>,
    #[arg(long, default_value_t = 128)]
    pub h: u64,
    #[arg(long, default_value_t = 8)]
    pub g: u64,
    #[arg(long, default_value_t = 128)]
    pub d: u64,
    #[arg(long, default_value_t = 512)]
    pub dc: u64,
    #[arg(long, default_value_t = 64)]
    pub dr: u64,
    #[arg(long, default_value_t = 8)]
    pub k: u64,
    /// SWA window.
    #[arg(long, default_value_t = 4096)]
    pub w: u64,
    /// Bytes per element.
    #[arg(long, default_value_t = 2.0)]
    pub bytes: f64,
    #[arg(long, default_value_t = 36)]
    pub layers: u64,
    /// KSA:Full ratio of `hybrid-ksa`.
    #[arg(long, default_value_t = 3)]
    pub ratio: u64,
    /// Count the linear-attention state once instead of per head.
    #[arg(long)]
    pub gdn_shared: bool,
    #[arg(long, value_enum, default_value_t = MemFormat::Table)]
    pub format: MemFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct EquivArgs {
    #[arg(long, default_value_t = 96)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub c: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Max absolute delta; 1e-10 for f64 and 1e-5 for f32 by default.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    pub block_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    Copy,
    DistantRecall,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// `full`, `swa`, `sca`, `ksa`, `hybrid-<kind>` or `hybrid-<kind>-<R>`.
    #[arg(long, default_value = "hybrid-ksa")]
    pub arch: String,
    /// Layer count (2 for train/distill, 4 otherwise).
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Defaults to `heads`.
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub mlp_hidden: usize,
    /// Chunk size.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Sliding chunks.
    #[arg(long, default_value_t = 1)]
    pub c: usize,
    /// SWA window; defaults to `(C+1)·k`.
    #[arg(long)]
    pub swa_window: Option<usize>,
    #[arg(long, default_value_t = 10_000.0)]
    pub rope_theta: f64,
    #[arg(long)]
    pub tie_embeddings: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TaskArgs {
    #[arg(long, value_enum, default_value_t = TaskName::DistantRecall)]
    pub task: TaskName,
    /// Distant-recall sequence length.
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 8)]
    pub keys: usize,
    #[arg(long, default_value_t = 16)]
    pub values: usize,
    #[arg(long, default_value_t = 8)]
    pub fillers: usize,
    /// The key/value pair starts one of the first `pair_chunks` chunks.
    #[arg(long, default_value_t = 4)]
    pub pair_chunks: usize,
    /// Copy payload length.
    #[arg(long, default_value_t = 8)]
    pub payload: usize,
    /// Copy alphabet size.
    #[arg(long, default_value_t = 8)]
    pub alphabet: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Held-out samples for the final accuracy.
    #[arg(long, default_value_t = 512)]
    pub eval_samples: usize,
    /// Save the trained weights here (plus a `.json` manifest).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DistillArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Last step with λ = 1.
    #[arg(long, default_value_t = 50)]
    pub anneal_start: usize,
    /// First step with λ = 0.
    #[arg(long, default_value_t = 150)]
    pub anneal_end: usize,
    /// Weight of the attention-output alignment loss.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Weight of the output KL loss.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Start from these weights instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttnDumpArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    /// Layer index, from 0.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Text index of the query; defaults to the last token.
    #[arg(long)]
    pub query: Option<usize>,
    /// Load weights (and model shape) from a checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeBenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    /// Tokens to decode; defaults to the task's sequence length.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Emit the per-step cache state as JSON lines instead of CSV.
    #[arg(long)]
    pub dump: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match serde_json::to_string(&cli) {
        Ok(line) => println!("{line}"),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

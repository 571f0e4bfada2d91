use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Seed used by every command when `--seed` is omitted.
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "lpforge", version, about = "Low-precision network analysis, kernels, simulation and training")]
pub struct Cli {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Table, global = true)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a list of reals to integer codes.
    Quantize(QuantizeArgs),
    /// Multiply seeded random 8-bit activations by ternary weights.
    Gemm(GemmArgs),
    /// Run the same product through the systolic array model.
    Sim(SimArgs),
    /// Weight and activation memory footprint of a topology.
    Analyze(AnalyzeArgs),
    /// Widen the output channels of the leading conv layers.
    Widen(WidenArgs),
    /// Compute cost (FMAs times operand bits) of a topology.
    Cost(CostArgs),
    /// Train the toy network under one scheme.
    Train(TrainArgs),
    /// Measure GEMM throughput of the float reference and the packed kernel.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Weights,
    Activations,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Comma-separated reals.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    pub bits: u32,
    #[arg(long, value_enum, default_value_t = Kind::Weights)]
    pub kind: Kind,
}

#[derive(Debug, Args)]
pub struct Dims {
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    /// Float triple loop on the decoded operands.
    Ref,
    /// Packed 2-bit sign-select kernel.
    Ternary,
    /// Generic integer kernel.
    Int,
}

#[derive(Debug, Args)]
pub struct GemmArgs {
    #[command(flatten)]
    pub dims: Dims,
    #[arg(long, value_enum, default_value_t = Backend::Ternary)]
    pub backend: Backend,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub dims: Dims,
    /// PE rows.
    #[arg(long, default_value_t = 8)]
    pub rows: usize,
    /// PE columns.
    #[arg(long, default_value_t = 8)]
    pub cols: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Topology file, or the name of a bundled topology.
    #[arg(long)]
    pub topology: String,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// `training` or `inference`.
    #[arg(long, default_value = "inference")]
    pub mode: String,
    #[arg(long, default_value_t = 32)]
    pub wbits: u32,
    #[arg(long, default_value_t = 32)]
    pub abits: u32,
}

#[derive(Debug, Args)]
pub struct WidenArgs {
    #[arg(long)]
    pub topology: String,
    #[arg(long, default_value_t = 2.0)]
    pub factor: f64,
    /// Fraction of conv layers, counted from the input, to widen.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Write the widened topology here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub topology: String,
    #[arg(long, default_value_t = 32)]
    pub wbits: u32,
    #[arg(long, default_value_t = 32)]
    pub abits: u32,
    /// Topology to compare against; the ratio is cost / baseline cost.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub baseline_wbits: u32,
    #[arg(long, default_value_t = 32)]
    pub baseline_abits: u32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// baseline, low_precision, wrpn, apprentice or wrpn_apprentice.
    #[arg(long, default_value = "baseline")]
    pub scheme: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Pixel noise of the synthetic data.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Teacher checkpoint; without it a teacher is trained with the same seed.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Write per-epoch records as JSON lines.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Write the trained network.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 128)]
    pub m: usize,
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    #[arg(long, default_value_t = 1024)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

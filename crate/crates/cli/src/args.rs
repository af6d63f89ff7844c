use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cskv", version, about = "Low-rank KV cache compression toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random model container (and its config if the file is missing).
    InitModel(InitModelArgs),
    /// Initialize and fine-tune low-rank K/V factors on calibration streams.
    Calibrate(CalibrateArgs),
    /// Greedy generation; the transcript is printed as token ids.
    Generate(GenerateArgs),
    /// Fidelity of one cache configuration against the baseline.
    Eval(EvalArgs),
    /// Run an ablation grid.
    Sweep(SweepArgs),
    /// Summarize a sweep or eval CSV.
    Report(ReportArgs),
}

pub fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("ratio {v} must lie in [0, 1)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuantArg {
    None,
    Ptq4,
    Qat4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Random,
    Svd,
    Asvd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Gradient,
    Als,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CacheArg {
    Baseline,
    Cskv,
    Streaming,
    H2o,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StorageArg {
    F16,
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitArg {
    /// Closed-form weighted optimum per layer.
    Oracle,
    /// Init plus fine-tuning with the calibration flags.
    Calibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    /// Windows 2..64 at one ratio.
    Window,
    /// Fixed totals 0.5 and 0.75, varying the key/value split.
    KvSplit,
    /// random / svd / asvd inits over ratios 0.5..0.8.
    Init,
    /// none / ptq4 / qat4 over ratios 0.5..0.8.
    Quant,
    /// CSKV, streaming and H2O at matched bytes.
    Baselines,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Weights container.
    #[arg(long)]
    pub model: PathBuf,
    /// Model config JSON.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    /// Fraction of key channels removed.
    #[arg(long, default_value_t = 0.5, value_parser = parse_ratio)]
    pub ratio_k: f64,
    /// Fraction of value channels removed.
    #[arg(long, default_value_t = 0.5, value_parser = parse_ratio)]
    pub ratio_v: f64,
    /// Recent tokens kept at full width.
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, value_enum, default_value_t = QuantArg::None)]
    pub quant: QuantArg,
    /// Precision of cached rows.
    #[arg(long, value_enum, default_value_t = StorageArg::F16)]
    pub storage: StorageArg,
}

#[derive(Debug, Clone, Args)]
pub struct CalibArgs {
    #[arg(long, value_enum, default_value_t = InitArg::Asvd)]
    pub init: InitArg,
    /// ASVD activation exponent.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Gradient)]
    pub mode: ModeArg,
    /// Rows per gradient step (all rows when omitted).
    #[arg(long)]
    pub batch_rows: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    /// Lines per synthetic retrieval prompt.
    #[arg(long, default_value_t = 8)]
    pub n_lines: usize,
    /// Tokens generated per task.
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
}

#[derive(Debug, Clone, Args)]
pub struct InitModelArgs {
    /// Config JSON; created from the size flags when it does not exist.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 1024)]
    pub vocab: usize,
    /// Power-law decay of the W_K / W_V singular values.
    #[arg(long, default_value_t = 1.0)]
    pub kv_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weights container to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub calib: CalibArgs,
    /// Token streams, one space-separated sequence per line. Synthetic
    /// retrieval prompts are used when omitted.
    #[arg(long)]
    pub streams: Option<PathBuf>,
    /// Number of synthetic streams when `--streams` is omitted.
    #[arg(long, default_value_t = 16)]
    pub calib_tasks: usize,
    #[arg(long, default_value_t = 8)]
    pub n_lines: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Factor container to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Report JSON (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = CacheArg::Baseline)]
    pub cache: CacheArg,
    /// Factor container (required by `--cache cskv`).
    #[arg(long)]
    pub factors: Option<PathBuf>,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Token budget for pruning caches (default: bytes of the CSKV plan).
    #[arg(long)]
    pub budget: Option<usize>,
    /// Prompt token ids, space or comma separated. A synthetic retrieval
    /// prompt is used when omitted.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub n_lines: usize,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Fixed factors; otherwise factors are fitted per configuration.
    #[arg(long)]
    pub factors: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FitArg::Calibrated)]
    pub fit: FitArg,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[arg(long, default_value_t = 16)]
    pub calib_tasks: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = CacheArg::Cskv)]
    pub cache: CacheArg,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Tasks evaluated, seeded `seed..seed+seeds`.
    #[arg(long, default_value_t = 4)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Plot-data JSON to write.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = GridArg::Window)]
    pub grid: GridArg,
    /// Ratio of the window grid.
    #[arg(long, default_value_t = 0.8, value_parser = parse_ratio)]
    pub ratio: f64,
    /// Window of the non-window grids.
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, value_enum, default_value_t = StorageArg::F16)]
    pub storage: StorageArg,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 4)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// CSV written by `eval` or `sweep`.
    #[arg(long)]
    pub csv: PathBuf,
}

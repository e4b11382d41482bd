use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssmprune_core::pruning::HeadMode;
use ssmprune_core::{Component, Mode, ModeFilter, PrunedVariant};

#[derive(Debug, Parser)]
#[command(name = "ssmprune", version, about = "Profile, score and prune selective state space models")]
pub struct Cli {
    /// Model config (TOML or JSON). The built-in desk model is used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,

    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "ssmprune-out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Text,
    /// JSON.
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Convention {
    Executed,
    ReferenceKernels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightsFormat {
    Binary,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    #[value(name = "m1-130m")]
    Mamba1,
    #[value(name = "m2-130m")]
    Mamba2,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-component FLOPs, memory and (optionally) latency.
    Profile(ProfileArgs),
    /// Collect per-state step-size activity and export heatmaps.
    Activity(ActivityArgs),
    /// Build a pruning plan and write the pruned model.
    Prune(PruneArgs),
    /// Latency, memory and fidelity over a grid of lengths and ratios.
    Sweep(SweepArgs),
    /// Re-render tables and plot series from a saved sweep.
    Report(ReportArgs),
    /// Write a model config (and optionally random weights).
    Init(InitArgs),
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [64, 512, 2048])]
    pub seqlens: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, value_delimiter = ',', default_values = ["prefill", "decode"])]
    pub modes: Vec<Mode>,
    /// Restrict to these components (e.g. `norm,ssm`).
    #[arg(long, value_delimiter = ',')]
    pub components: Vec<Component>,
    /// Also time forwards (3 warm-up / 10 measured unless overridden).
    #[arg(long)]
    pub measure: bool,
    #[command(flatten)]
    pub timing: TimingArgs,
    #[arg(long, value_enum, default_value_t = Convention::Executed)]
    pub convention: Convention,
    /// Materialize states in blocks of this many steps in the memory model.
    #[arg(long)]
    pub state_block: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ActivityArgs {
    /// Sequences to profile, one JSON array per line. Seeded synthetic data otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub len: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Tokens at the end of each sequence fed one at a time through decode.
    #[arg(long, default_value_t = 0)]
    pub decode_steps: usize,
    #[arg(long, default_value = "both")]
    pub modes: ModeFilter,
    /// Keep up to this many raw step-size rows per layer.
    #[arg(long, default_value_t = 0)]
    pub reservoir: usize,
    /// Pixel size of one heatmap cell.
    #[arg(long, default_value_t = 8)]
    pub cell: usize,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub ratio: f64,
    /// Activity scores from `activity`; collected on synthetic data otherwise.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub activity_len: usize,
    #[arg(long, default_value = "per-state")]
    pub head_mode: HeadMode,
    #[arg(long, default_value = "optimized")]
    pub variant: PrunedVariant,
    #[arg(long, value_enum, default_value_t = WeightsFormat::Binary)]
    pub weights_format: WeightsFormat,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = ssmprune_core::harness::DEFAULT_SEQLENS)]
    pub seqlens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = ssmprune_core::harness::DEFAULT_RATIOS)]
    pub ratios: Vec<f64>,
    #[arg(long, default_value = "optimized")]
    pub variant: PrunedVariant,
    #[arg(long, default_value = "per-state")]
    pub head_mode: HeadMode,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value = "prefill")]
    pub mode: Mode,
    #[command(flatten)]
    pub timing: TimingArgs,
    /// Cost model only; skip latency measurement.
    #[arg(long)]
    pub no_timing: bool,
    /// Record process peak memory around one forward per cell.
    #[arg(long)]
    pub hwm: bool,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Multiple-choice items, one JSON object per line.
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub eval_sequences: usize,
    #[arg(long, default_value_t = 64)]
    pub eval_len: usize,
    #[arg(long, default_value_t = 256)]
    pub activity_len: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Saved sweep; defaults to `<out>/sweep.json`.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Also write seeded random weights next to the config.
    #[arg(long)]
    pub weights: bool,
}

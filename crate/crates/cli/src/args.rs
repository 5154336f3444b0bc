//! Command-line flags and the flat `key = value` config file.
//!
//! A config file lists flags without their leading dashes:
//!
//! ```text
//! # train.cfg
//! batch-scheme = uniform_t
//! segment-steps = 3
//! no-spdm = true
//! ```
//!
//! Its entries are spliced in front of the command-line flags, so a flag
//! given on the command line wins.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use trajrec_core::metrics::NdtwNorm;
use trajrec_core::synth::Style;
use trajrec_core::training::{BatchScheme, LossScope};

/// Relative data paths resolve against this directory when it is set.
pub const DATA_DIR_ENV: &str = "TRAJREC_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "trajrec", version, about = "Sparse-to-dense GPS trajectory recovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dense dataset.
    GenData(GenDataArgs),
    /// Train a denoiser on a dense dataset.
    Train(TrainArgs),
    /// Fill in query points with a trained checkpoint or a baseline.
    Recover(RecoverArgs),
    /// Score recovered trajectories against the dense truth.
    Eval(EvalArgs),
    /// Run a length, sparsity, irregularity or step-count sweep.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    /// Flat key = value file with defaults for these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 512)]
    pub length: usize,
    #[arg(long, default_value = "taxi_smooth")]
    pub style: Style,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest taxi heading change per step, degrees.
    #[arg(long)]
    pub max_turn_deg: Option<f64>,
    #[arg(long)]
    pub agents: Option<usize>,
}

/// How dense records are cut into observed and query points.
#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.5)]
    pub erase_ratio: f64,
    /// 0 spreads erased points evenly; larger values erase in bursts.
    #[arg(long, default_value_t = 0.0)]
    pub knob: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, loss trace and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "uniform_t")]
    pub batch_scheme: BatchScheme,
    #[arg(long, default_value_t = 2)]
    pub segment_steps: usize,
    /// Step stride between segments; defaults to segment-steps - 1.
    #[arg(long)]
    pub advance: Option<usize>,
    /// Drop the state path between denoising steps.
    #[arg(long)]
    pub no_spdm: bool,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value = "query_only")]
    pub loss_scope: LossScope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Write `ckpt_<iteration>.ckpt` every this many iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 500)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 32)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 5)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 64)]
    pub step_embed_dim: usize,
    /// Ignore agent and weekday fields.
    #[arg(long)]
    pub no_contexts: bool,
    /// Diffuse absolute coordinates or offsets from the interpolation prior.
    #[arg(long, value_enum, default_value = "absolute")]
    pub target: TargetArg,
    /// Print a progress line every this many iterations (0: silent).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Absolute,
    PriorResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ddpm,
    Ddim,
    /// Linear interpolation baseline; needs no checkpoint.
    Lerp,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct RecoverArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ddim")]
    pub mode: ModeArg,
    /// Denoiser evaluations; defaults to every diffusion step.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub no_state: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Timing CSV; defaults to `<out>.timing.csv`.
    #[arg(long)]
    pub timing: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Coordinate statistics sidecar; defaults to a fit on the truth file.
    #[arg(long)]
    pub norm: Option<PathBuf>,
    #[arg(long, default_value = "path_length")]
    pub ndtw_norm: NdtwNorm,
    /// Timing CSV from `recover`, used for the wall_seconds column.
    #[arg(long)]
    pub timing: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Length,
    Sparsity,
    Irregularity,
    /// Step-count grid with and without state propagation.
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IrregularityAxis {
    Spatial,
    Temporal,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub sweep: Sweep,
    /// Checkpoint for the model rows; without it only the baseline runs.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Tasks per grid point.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Trajectory length for the sparsity, irregularity and steps sweeps.
    #[arg(long, default_value_t = 128)]
    pub length: usize,
    #[arg(long, default_value_t = 0.5)]
    pub erase_ratio: f64,
    #[arg(long, default_value = "taxi_smooth")]
    pub style: Style,
    #[arg(long, value_enum, default_value = "ddim")]
    pub mode: ModeArg,
    /// Denoiser evaluations for the model rows of the data sweeps.
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "temporal")]
    pub irregularity: IrregularityAxis,
    #[arg(long, default_value = "path_length")]
    pub ndtw_norm: NdtwNorm,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Parses one config file into `--key value` arguments.
pub fn config_args(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key = value, got {raw:?}", n + 1);
        };
        let (k, v) = (k.trim().trim_start_matches("--"), v.trim());
        if k.is_empty() || k == "config" {
            bail!("config line {}: bad key {k:?}", n + 1);
        }
        match v {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => {
                out.push(format!("--{k}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Splices the entries of `--config <file>` right after the subcommand name.
pub fn expand_config(argv: &[String]) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv.to_vec());
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let extra = config_args(&text)?;
    let mut out = argv.to_vec();
    let at = argv.len().min(2);
    out.splice(at..at, extra);
    Ok(out)
}

/// Resolves a relative input path against the data directory, if set.
pub fn data_path(p: &std::path::Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if p.is_relative() && !p.exists() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

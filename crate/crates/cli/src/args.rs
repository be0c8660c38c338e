//! Flag definitions. Each subcommand's flags double as its JSON config file
//! schema: a file supplies values for flags not given on the command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use flashopt::analysis::{QuantScheme, SweepScheme};
use flashopt::floatcodec::LowPrecisionFormat;
use flashopt::optimizers::{Mode, OptimizerKind, VarianceScheme};
use flashopt::trainbench::{Activation, DatasetKind};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "flashopt", version, about = "Weight-splitting and 8-bit optimizer-state experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reconstruction error of every finite FP32 value, bucketed by exponent.
    Sweep(SweepArgs),
    /// Companded vs linear quantization error on a recorded trajectory.
    QuantBench(QuantBenchArgs),
    /// Train the MLP harness and write a JSON report.
    Train(TrainArgs),
    /// Checkpoint utilities.
    #[command(subcommand)]
    Ckpt(CkptCommand),
}

#[derive(Debug, Subcommand)]
pub enum CkptCommand {
    /// Print the tensor table and byte totals of a checkpoint.
    Inspect {
        file: PathBuf,
        /// Print the table as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Write a checkpoint holding one synthetic optimizer state.
    Create(CreateArgs),
}

/// Parses a value by its serde name, so flags and config files agree.
fn serde_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn sweep_scheme(s: &str) -> Result<SweepScheme, String> {
    s.parse().map_err(|e: flashopt::Error| e.to_string())
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Fills every unset field of `self` from `file`.
macro_rules! merge_fields {
    ($self:ident, $file:ident; $($f:ident),* $(,)?) => {
        Self { config: $self.config, $($f: $self.$f.or($file.$f)),* }
    };
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SweepArgs {
    /// JSON file with defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// bf16 or fp16 [default: bf16]
    #[arg(long, value_parser = serde_name::<LowPrecisionFormat>)]
    pub format: Option<LowPrecisionFormat>,
    /// ulp8, ulp16, none or same-format-baseline [default: ulp16]
    #[arg(long, value_parser = sweep_scheme)]
    pub scheme: Option<SweepScheme>,
    /// Per-exponent bucket CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Worker threads; 0 uses every core [default: $FLASHOPT_WORKERS or 0]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Lowest FP32 exponent field visited [default: 0]
    #[arg(long)]
    pub min_exponent_field: Option<u32>,
    /// Highest FP32 exponent field visited [default: 254]
    #[arg(long)]
    pub max_exponent_field: Option<u32>,
}

impl SweepArgs {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; format, scheme, out, summary, workers, min_exponent_field, max_exponent_field)
    }
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct QuantBenchArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Trajectory file written by `train --trajectory`.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Per-snapshot NMSE CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Quantile summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Quantization group size [default: 32]
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Comma-separated schemes [default: companded,linear]
    #[arg(long, value_delimiter = ',', value_parser = serde_name::<QuantScheme>)]
    pub schemes: Option<Vec<QuantScheme>>,
}

impl QuantBenchArgs {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; trajectory, out, summary, group_size, schemes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Paired-run settings: 2000 steps, warmup-cosine schedule.
    Parity,
    /// Flash AdamW on heavy-tailed regression at a high learning rate.
    Divergence,
    /// Full-precision run for recording optimizer states.
    QuantBench,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// parity, divergence or quant-bench [default: parity]
    #[arg(long, value_parser = serde_name::<Preset>)]
    pub preset: Option<Preset>,
    /// sgd, adamw or lion [default: adamw]
    #[arg(long, value_parser = serde_name::<OptimizerKind>)]
    pub optimizer: Option<OptimizerKind>,
    /// reference or flash [default: flash]
    #[arg(long, value_parser = serde_name::<Mode>)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// two-moons or linear-regression [default: two-moons]
    #[arg(long, value_parser = serde_name::<DatasetKind>)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate; other hyperparameters keep their preset values.
    #[arg(long, allow_hyphen_values = true)]
    pub lr: Option<f32>,
    /// companded or linear (flash AdamW only)
    #[arg(long, value_parser = serde_name::<VarianceScheme>)]
    pub variance_scheme: Option<VarianceScheme>,
    /// Step each tensor as soon as its gradient is ready.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub gradient_release: Option<bool>,
    /// Micro-batches per optimizer step.
    #[arg(long)]
    pub accumulation: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// tanh or relu
    #[arg(long, value_parser = serde_name::<Activation>)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub n_features: Option<usize>,
    /// JSON run report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// `step,loss` CSV of minibatch losses.
    #[arg(long)]
    pub losses: Option<PathBuf>,
    /// Final optimizer states.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Optimizer-state trajectory for quant-bench.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Steps between trajectory snapshots [default: 10]
    #[arg(long)]
    pub snapshot_every: Option<u64>,
}

impl TrainArgs {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file;
            preset, optimizer, mode, seed, dataset, steps, batch_size, lr,
            variance_scheme, gradient_release, accumulation, hidden, activation,
            n_samples, n_features, report, losses, checkpoint, trajectory, snapshot_every,
        )
    }
}

#[derive(Debug, Args)]
pub struct CreateArgs {
    #[arg(long, value_parser = serde_name::<OptimizerKind>, default_value = "adamw")]
    pub optimizer: OptimizerKind,
    #[arg(long, value_parser = serde_name::<Mode>, default_value = "flash")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1_000_000)]
    pub params: usize,
    /// Synthetic optimizer steps applied before saving.
    #[arg(long, default_value_t = 3)]
    pub steps: u64,
    #[arg(long)]
    pub out: PathBuf,
}

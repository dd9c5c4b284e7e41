use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use qexpand_core::classic::{Method, WeightMode};
use qexpand_core::eval::{Grouping, Protocol};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "qexpand", version, about = "Query expansion workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic clustered corpus.
    Synth(SynthArgs),
    /// Build the normalized database of one stage.
    Index(IndexArgs),
    /// Top-k retrieval, optionally after expansion.
    Search(SearchArgs),
    /// Write expanded query vectors.
    Expand(ExpandArgs),
    /// Train a learned aggregator.
    Train(TrainArgs),
    /// Fit the softmax temperature of a trained aggregator for DBA.
    FitTemperature(FitTemperatureArgs),
    /// Write a database-side augmented database.
    Dba(DbaCommandArgs),
    /// Score one configuration with mAP.
    Eval(EvalArgs),
    /// Score methods over a grid of neighbor counts.
    Sweep(SweepArgs),
    /// Relative improvement per query group.
    Groups(GroupsArgs),
    /// Summarize a checkpoint.
    InspectCheckpoint(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Index(_) => "index",
            Command::Search(_) => "search",
            Command::Expand(_) => "expand",
            Command::Train(_) => "train",
            Command::FitTemperature(_) => "fit-temperature",
            Command::Dba(_) => "dba",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Groups(_) => "groups",
            Command::InspectCheckpoint(_) => "inspect-checkpoint",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Synth(a) => &a.common,
            Command::Index(a) => &a.common,
            Command::Search(a) => &a.common,
            Command::Expand(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::FitTemperature(a) => &a.common,
            Command::Dba(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Sweep(a) => &a.common,
            Command::Groups(a) => &a.common,
            Command::InspectCheckpoint(a) => &a.common,
        }
    }

    /// Fully resolved arguments, keyed by flag name.
    pub fn resolved(&self) -> serde_json::Value {
        let v = match self {
            Command::Synth(a) => serde_json::to_value(a),
            Command::Index(a) => serde_json::to_value(a),
            Command::Search(a) => serde_json::to_value(a),
            Command::Expand(a) => serde_json::to_value(a),
            Command::Train(a) => serde_json::to_value(a),
            Command::FitTemperature(a) => serde_json::to_value(a),
            Command::Dba(a) => serde_json::to_value(a),
            Command::Eval(a) => serde_json::to_value(a),
            Command::Sweep(a) => serde_json::to_value(a),
            Command::Groups(a) => serde_json::to_value(a),
            Command::InspectCheckpoint(a) => serde_json::to_value(a),
        };
        v.expect("arguments serialize")
    }
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (falls back to QEXPAND_THREADS, then all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// TOML config or a previous run's manifest.json supplying defaults.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// `val` or `test`.
    #[arg(long, default_value = "test", value_parser = ["val", "test"])]
    pub stage: String,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct QeArgs {
    #[arg(long, default_value = "none")]
    pub method: Method,
    #[arg(long, default_value_t = 0)]
    pub nqe: usize,
    /// αQE exponent.
    #[arg(long, default_value_t = 3.0)]
    pub alpha: f64,
    /// DQE regularization.
    #[arg(long, default_value_t = 0.1)]
    pub svm_c: f64,
    /// DQE negatives taken from the bottom of the ranking.
    #[arg(long, default_value_t = 5)]
    pub neg: usize,
    /// LAttQE checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the checkpoint's weight mode.
    #[arg(long)]
    pub weight_mode: Option<WeightMode>,
}

#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DbaArgs {
    #[arg(long, default_value_t = 0)]
    pub ndba: usize,
    #[arg(long, default_value = "aqe")]
    pub dba_method: Method,
    #[arg(long, default_value_t = 3.0)]
    pub dba_alpha: f64,
    #[arg(long)]
    pub dba_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dba_weight_mode: Option<WeightMode>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 200)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub min_items: usize,
    #[arg(long, default_value_t = 50)]
    pub max_items: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 2000)]
    pub distractors: usize,
    #[arg(long, default_value_t = 1000)]
    pub train_distractors: usize,
    #[arg(long, default_value_t = 0.1)]
    pub query_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub easy_fraction: f64,
    /// Bisect σ until the no-expansion validation mAP is near this value.
    #[arg(long)]
    pub calibrate: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct IndexArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SearchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub qe: QeArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub dba: DbaArgs,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExpandArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub qe: QeArgs,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub kmax: usize,
    #[arg(long)]
    pub no_positional_encoding: bool,
    #[arg(long)]
    pub position_only: bool,
    #[arg(long)]
    pub no_self_attention: bool,
    #[arg(long)]
    pub no_aux_head: bool,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub margin: f64,
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value_t = 20000)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub pool_refresh: usize,
    #[arg(long, default_value_t = 32)]
    pub min_neighbors: usize,
    #[arg(long, default_value_t = 64)]
    pub max_neighbors: usize,
    #[arg(long, default_value_t = 0.6)]
    pub max_drop: f64,
    #[arg(long, default_value_t = 1.0)]
    pub aux_weight: f64,
    #[arg(long, default_value_t = 64)]
    pub val_nqe: usize,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Corpus whose `train` split is trained on.
    #[arg(long)]
    pub train_data: PathBuf,
    /// Corpus whose validation stage selects the epoch (default: train data).
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FitTemperatureArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train_data: PathBuf,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 1e-2)]
    pub temperature_lr: f64,
    #[arg(long, default_value_t = 5)]
    pub temperature_epochs: usize,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DbaCommandArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub dba: DbaArgs,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub qe: QeArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub dba: DbaArgs,
    #[arg(long, value_delimiter = ',', default_values = ["M", "H"])]
    pub protocols: Vec<Protocol>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub nqe: Vec<usize>,
    #[arg(long, default_value_t = 3.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub svm_c: f64,
    #[arg(long, default_value_t = 5)]
    pub neg: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub weight_mode: Option<WeightMode>,
    #[arg(long, value_delimiter = ',', default_values = ["M", "H"])]
    pub protocols: Vec<Protocol>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GroupsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub qe: QeArgs,
    /// `relevants` or `preqe-ap`.
    #[arg(long, default_value = "relevants")]
    #[serde(serialize_with = "grouping_name")]
    pub by: Grouping,
    #[arg(long, value_delimiter = ',', default_values = ["M", "H"])]
    pub protocols: Vec<Protocol>,
}

fn grouping_name<S: serde::Serializer>(g: &Grouping, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match g {
        Grouping::ByRelevantCount => "relevants",
        Grouping::ByPreQeAp => "preqe-ap",
    })
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct InspectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

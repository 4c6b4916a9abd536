//! Command-line arguments and the train config file.
//!
//! Training settings can come from a TOML or JSON file (`--config`), from
//! flags, or both; a flag always wins over the file, and anything left unset
//! falls back to a default.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Deserialize;

use crate::ops::CliError;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Settings file, TOML or JSON by extension; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output index directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Components per block model (clamped to each block's cell count).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Covering strength: every set of this many joined attributes shares a
    /// block.
    #[arg(long)]
    pub strength: Option<usize>,
    /// Largest admissible block tensor volume (product of its domains).
    #[arg(long)]
    pub max_block_volume: Option<u128>,
    /// Join balance factor; higher merges more small attributes together.
    #[arg(long)]
    pub balance: Option<f64>,
    /// Bins per continuous attribute.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Master RNG seed; training is a pure function of data + settings + seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum ALS sweeps per fit attempt.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative residual improvement below which a fit stops.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Extra random restarts per block fit.
    #[arg(long)]
    pub retries: Option<usize>,
    /// Score decay for block selection at query time.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Attributes to force continuous (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub continuous: Vec<String>,
    /// Attributes to force categorical (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Worker threads for block fitting (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

/// The config file mirror of [`TrainArgs`]; unknown keys are rejected so
/// typos fail loudly.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub rank: Option<usize>,
    pub strength: Option<usize>,
    pub max_block_volume: Option<u128>,
    pub balance: Option<f64>,
    pub bins: Option<usize>,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub retries: Option<usize>,
    pub alpha: Option<f64>,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    pub threads: Option<usize>,
}

/// Fully resolved training settings.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub data: PathBuf,
    pub out: PathBuf,
    pub rank: usize,
    pub strength: usize,
    pub max_block_volume: u128,
    pub balance: f64,
    pub bins: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub retries: usize,
    pub alpha: f64,
    pub continuous: Vec<String>,
    pub categorical: Vec<String>,
    pub threads: Option<usize>,
}

impl TrainArgs {
    pub fn resolve(self) -> Result<TrainSettings, CliError> {
        let file = match &self.config {
            Some(path) => read_train_file(path)?,
            None => TrainFile::default(),
        };
        let missing = |what: &str| {
            CliError::Config(format!(
                "{what} must be given via --{what} or the config file"
            ))
        };
        Ok(TrainSettings {
            data: self.data.or(file.data).ok_or_else(|| missing("data"))?,
            out: self.out.or(file.out).ok_or_else(|| missing("out"))?,
            rank: self.rank.or(file.rank).unwrap_or(32),
            strength: self.strength.or(file.strength).unwrap_or(2),
            max_block_volume: self
                .max_block_volume
                .or(file.max_block_volume)
                .unwrap_or(65_536),
            balance: self.balance.or(file.balance).unwrap_or(1.25),
            bins: self.bins.or(file.bins).unwrap_or(14),
            seed: self.seed.or(file.seed).unwrap_or(0),
            max_iters: self.max_iters.or(file.max_iters).unwrap_or(200),
            tol: self.tol.or(file.tol).unwrap_or(1e-6),
            retries: self.retries.or(file.retries).unwrap_or(2),
            alpha: self.alpha.or(file.alpha).unwrap_or(0.01),
            continuous: if self.continuous.is_empty() {
                file.continuous
            } else {
                self.continuous
            },
            categorical: if self.categorical.is_empty() {
                file.categorical
            } else {
                self.categorical
            },
            threads: self.threads.or(file.threads),
        })
    }
}

fn read_train_file(path: &PathBuf) -> Result<TrainFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path
        .extension()
        .is_some_and(|ext| ext.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Trained index directory.
    #[arg(long)]
    pub index: PathBuf,
    /// Query as inline JSON: {"predicates":[{"attr":..,"op":..,"value":..}]}.
    #[arg(long, conflicts_with = "query_file")]
    pub query: Option<String>,
    /// File containing the query JSON; `-` or omitting both reads stdin.
    #[arg(long)]
    pub query_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ZeroMode {
    /// Redraw until every query matches at least one row.
    Drop,
    /// Keep whatever the draw produces.
    Keep,
    /// Only emit queries that match nothing.
    Only,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Trained index directory.
    #[arg(long)]
    pub index: PathBuf,
    /// Workload file (JSON lines), possibly with recorded truths.
    #[arg(long, conflicts_with = "gen")]
    pub workload: Option<PathBuf>,
    /// Generate this many queries instead of reading a workload file
    /// (requires --data).
    #[arg(long)]
    pub gen: Option<usize>,
    /// CSV to compute exact truths from (required for --gen and for workload
    /// entries without a recorded truth).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed for workload generation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-attribute predicate probability for generated workloads.
    #[arg(long, default_value_t = 0.4)]
    pub inclusion: f64,
    /// Minimum predicates per generated query.
    #[arg(long, default_value_t = 2)]
    pub min_filters: usize,
    /// Maximum predicates per generated query.
    #[arg(long)]
    pub max_filters: Option<usize>,
    /// How generated queries treat zero-truth draws.
    #[arg(long, value_enum, default_value_t = ZeroMode::Drop)]
    pub zeros: ZeroMode,
    /// Write the summary report here (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-query outcomes as JSON lines.
    #[arg(long)]
    pub per_query: Option<PathBuf>,
    /// Omit wall-clock fields so the report is byte-for-byte reproducible.
    #[arg(long)]
    pub stable: bool,
    /// Save the generated workload (with truths) for reuse.
    #[arg(long)]
    pub save_workload: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct UpdateArgs {
    /// Trained index directory to start from.
    #[arg(long)]
    pub index: PathBuf,
    /// CSV reflecting the data's new state (same header as at training).
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the refreshed index.
    #[arg(long)]
    pub out: PathBuf,
    /// Rescale block weights to the new row count; no refitting. New
    /// attribute values in the data are tolerated (they estimate as zero).
    #[arg(long, conflicts_with = "retrain")]
    pub weights_only: bool,
    /// Re-encode the data and refit every block, warm-starting from the
    /// current factors.
    #[arg(long)]
    pub retrain: bool,
    /// Maximum ALS sweeps per refit (retrain only).
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Relative residual improvement below which a refit stops.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Seed for any restarts a refit needs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VerifyCoverArgs {
    /// Design file: `v k t` header, then one whitespace-separated block of
    /// 1-based attribute numbers per line.
    #[arg(long)]
    pub design: PathBuf,
    /// Joined attribute domains (comma separated); enables volume checks.
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<u64>,
    /// Block volume budget to check against (needs --domains).
    #[arg(long)]
    pub max_block_volume: Option<u128>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Trained index directory.
    #[arg(long)]
    pub index: PathBuf,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cdl_core::io::RawDtype;

#[derive(Debug, Parser)]
#[command(name = "cdl", version, about = "Convolutional dictionary learning for spike sorting")]
pub struct Cli {
    /// Worker threads (default: all cores). 1 forces the sequential path.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Fixed reduction order and no wall-clock columns, so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Only print errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a recording with known filters and spike times.
    Simulate(SimulateArgs),
    /// Learn filters and lambda from a dataset.
    Train(TrainArgs),
    /// Sparse-code every window with trained filters.
    Encode(EncodeArgs),
    /// Check the analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Match learned filters to reference filters.
    EvalFilters(EvalFiltersArgs),
    /// Detect spikes over a threshold sweep and score them against ground truth.
    Sort(SortArgs),
    /// Summarize a dataset, filter file or training history.
    Report(ReportArgs),
}

/// Where the signal comes from: a dataset file or a raw recording.
#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "input")]
pub struct InputArgs {
    /// Dataset file written by `simulate`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Headerless little-endian recording.
    #[arg(long, requires_all = ["fs", "window_len"])]
    pub raw: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RawArgs {
    /// Sample type of --raw.
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    pub dtype: RawDtype,
    /// Sampling rate of --raw in Hz.
    #[arg(long)]
    pub fs: Option<f64>,
    /// Window length in samples for --raw.
    #[arg(long)]
    pub window_len: Option<usize>,
    /// Noise level of --raw on the raw scale (default: median absolute deviation estimate).
    #[arg(long)]
    pub sigma: Option<f64>,
}

fn parse_dtype(s: &str) -> Result<RawDtype, String> {
    s.parse().map_err(|e: cdl_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config (JSON). Default: four neurons, N=500, J=1000, 16 dB.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config SNR (dB).
    #[arg(long, allow_negative_numbers = true)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub raw: RawArgs,
    /// Training config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder config (JSON); L, lambda and sigma may be left out.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Gamma prior on lambda (JSON, fields r and delta). Default: mean at the initial lambda, delta 50.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Output filter file.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the per-epoch history CSV here.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Write a filter file after every epoch into this directory.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Start from these filters (and their lambda) instead of clustering.
    #[arg(long, conflicts_with = "init_err_db")]
    pub init: Option<PathBuf>,
    /// Start from the ground-truth filters perturbed to this error (dB); needs a simulated dataset.
    #[arg(long, allow_negative_numbers = true)]
    pub init_err_db: Option<f64>,
    /// Number of filters (default: from ground truth or --init).
    #[arg(long)]
    pub filters: Option<usize>,
    /// Filter length (default: from ground truth or --init).
    #[arg(long)]
    pub filter_len: Option<usize>,
    /// Amplitude threshold for clustering initialization, relative to the largest sample.
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    /// Override the number of epochs.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub raw: RawArgs,
    /// Trained filter file.
    #[arg(long)]
    pub filters: PathBuf,
    /// Encoder config (JSON); missing L, lambda and sigma come from the filter file.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Output CSV of nonzero code entries.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed of the random problem instance.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub instances: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = cdl_core::grads::FD_STEP)]
    pub step: f64,
    /// Write the per-entry report CSV here (last instance).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFiltersArgs {
    /// Learned filter file.
    #[arg(long)]
    pub filters: PathBuf,
    /// Reference filters: a filter file or a simulated dataset.
    #[arg(long)]
    pub truth: PathBuf,
    /// Largest shift tried when aligning (default: half the filter length).
    #[arg(long)]
    pub max_shift: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SortArgs {
    /// Simulated dataset with ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Trained filter file.
    #[arg(long)]
    pub filters: PathBuf,
    /// Encoder config (JSON); missing L, lambda and sigma come from the filter file.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Comma-separated code thresholds (default: 20 values spread up to the largest code entry).
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    /// Matching tolerance in samples.
    #[arg(long, default_value_t = cdl_core::eval::DEFAULT_TOLERANCE)]
    pub tolerance: usize,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Dataset file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Filter file.
    #[arg(long)]
    pub filters: Option<PathBuf>,
    /// Training history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `msae` command line.
//!
//! Every command prints one JSON document (stdout, or `--out` where that
//! flag names the result file) and short human-readable notes on stderr.
//! Exit codes: 0 success, 1 usage, 2 data or format, 3 numeric failure.

mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::error::MsaeError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "msae", version, about = "Train, evaluate and interrogate sparse autoencoders over embeddings")]
pub struct Cli {
    /// JSON file of default flag values for the subcommand (`{"epochs": 5}`);
    /// flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a known sparse dictionary.
    Synth(SynthArgs),
    /// Fit normalization statistics and write them as a sidecar JSON file.
    FitStats(FitStatsArgs),
    /// Train an autoencoder and write an SAE1 checkpoint.
    Train(TrainArgs),
    /// Compute the metric report of a checkpoint on an embedding set.
    Eval(EvalArgs),
    /// Train a linear probe on labelled embeddings.
    Probe(ProbeArgs),
    /// Name latents by matching decoder directions to a concept vocabulary.
    Concepts(ConceptsArgs),
    /// Nearest neighbours in embedding or activation space.
    Search(SearchArgs),
    /// Set latent magnitudes and map the result back to embedding space.
    Manipulate(ManipulateArgs),
    /// Classifier probability as one latent is swept over a magnitude grid.
    Sweep(SweepArgs),
    /// Activation distributions of latents split by a classifier's prediction.
    Associate(AssociateArgs),
    /// Serve the HTTP API over a checkpoint and an embedding set.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Image,
    Text,
    Synthetic,
}

impl From<ModalityArg> for crate::embedset::Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Self::Image,
            ModalityArg::Text => Self::Text,
            ModalityArg::Synthetic => Self::Synthetic,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Ambient dimension.
    #[arg(long)]
    pub n: usize,
    /// Number of ground-truth atoms.
    #[arg(long)]
    pub atoms: usize,
    /// Active atoms per sample.
    #[arg(long)]
    pub active: usize,
    /// Number of samples.
    #[arg(long)]
    pub count: usize,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Modality tag written to the file.
    #[arg(long, value_enum, default_value_t = ModalityArg::Synthetic)]
    pub modality: ModalityArg,
    /// Attach class labels: dominant atom index modulo this many classes.
    #[arg(long)]
    pub classes: Option<u32>,
    /// Output EMB1 file; normalization stats go to `<out>.stats.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the true atoms as an EMB1 file.
    #[arg(long, value_name = "FILE")]
    pub atoms_out: Option<PathBuf>,
    /// Also write a vocabulary TSV naming each atom (`atom<i>`).
    #[arg(long, value_name = "FILE")]
    pub vocab_out: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitStatsArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Defaults to `<embeddings>.stats.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Relu,
    Topk,
    #[value(name = "batch-topk", alias = "batch_topk")]
    BatchTopk,
    Matryoshka,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum)]
    pub arch: Arch,
    /// Sparsity for topk / batch-topk.
    #[arg(long)]
    pub k: Option<usize>,
    /// L1 coefficient for relu.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Matryoshka levels: `4,8,16`, `pow2:64..` (up to the latent count) or `pow2:4..256`.
    #[arg(long)]
    pub k_list: Option<String>,
    /// Matryoshka level weights: `uniform`, `reverse` or a comma list.
    #[arg(long)]
    pub alpha: Option<String>,
    /// Soft-cap activations with `c * tanh(z / c)`.
    #[arg(long)]
    pub softcap: Option<f64>,
    /// Latent count as a multiple of the input dimension.
    #[arg(long, conflicts_with = "latents")]
    pub expansion: Option<usize>,
    /// Latent count.
    #[arg(long)]
    pub latents: Option<usize>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    /// Defaults per architecture (relu 5e-5, topk 5e-4, matryoshka 1e-4).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output SAE1 checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the JSON result here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Normalization stats; defaults to the checkpoint's stats for the set's
    /// modality, then `<embeddings>.stats.json`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Linear probe JSON for the LP metrics.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_CKNNA_K)]
    pub cknna_k: usize,
    /// Rows used for CKNNA (seeded subsample when the set is larger).
    #[arg(long, default_value_t = crate::metrics::DEFAULT_CKNNA_SAMPLES)]
    pub cknna_samples: usize,
    /// Keep only the top-k activations per sample before decoding.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Also report progressive recovery over these k values (`4,8,16`).
    #[arg(long, value_delimiter = ',')]
    pub recovery_grid: Vec<usize>,
    /// Also report activation histograms with this many log10 bins.
    #[arg(long)]
    pub histogram_bins: Option<usize>,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_HIGH_THRESHOLD)]
    pub high_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Embeddings with class labels.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output probe JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the JSON result here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConceptsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// TSV of `name<TAB>row-index`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// EMB1 file the vocab rows index into.
    #[arg(long)]
    pub vocab_embeddings: PathBuf,
    #[arg(long, default_value_t = crate::concepts::DEFAULT_SIM_THRESHOLD)]
    pub sim_threshold: f64,
    #[arg(long, default_value_t = crate::concepts::DEFAULT_RATIO_THRESHOLD)]
    pub ratio_threshold: f64,
    /// Only list assignments passing every gate.
    #[arg(long)]
    pub valid_only: bool,
    /// Export this many top-activating samples per valid neuron (needs --embeddings).
    #[arg(long, requires = "embeddings")]
    pub top_samples: Option<usize>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Embedding,
    Activation,
}

impl From<SpaceArg> for crate::apps::SearchSpace {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Embedding => Self::Embedding,
            SpaceArg::Activation => Self::Activation,
        }
    }
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Indexed embedding set.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub index: IndexArgs,
    /// Query by indexed sample id.
    #[arg(long, conflicts_with = "query_vector", required_unless_present = "query_vector")]
    pub query_id: Option<String>,
    /// Query by raw vector (comma separated).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub query_vector: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = SpaceArg::Embedding)]
    pub space: SpaceArg,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Explain each hit by its shared top-c activations.
    #[arg(long)]
    pub explain: Option<usize>,
    /// Concept assignments JSON (from `concepts`) naming the explained latents.
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReturnSpaceArg {
    Raw,
    Activation,
}

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    #[command(flatten)]
    pub index: IndexArgs,
    #[arg(long, conflicts_with = "vector", required_unless_present = "vector")]
    pub sample: Option<String>,
    /// Raw input vector (comma separated).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub vector: Option<Vec<f64>>,
    /// `NEURON=MAGNITUDE`; repeatable.
    #[arg(long = "edit", value_name = "NEURON=MAGNITUDE")]
    pub edits: Vec<String>,
    #[arg(long, value_enum, default_value_t = ReturnSpaceArg::Raw)]
    pub return_space: ReturnSpaceArg,
    /// Also search the edited vector and return this many neighbours.
    #[arg(long)]
    pub search: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifierArgs {
    /// Classifier JSON: `{"kind":"linear","weights":[..],"bias":b}` or
    /// `{"kind":"probe","model":{..},"class":c}`.
    #[arg(long, conflicts_with = "probe")]
    pub classifier: Option<PathBuf>,
    /// Probe JSON (from `probe`), scored on --class.
    #[arg(long, requires = "class")]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub index: IndexArgs,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    #[arg(long)]
    pub neuron: usize,
    /// Ascending magnitude grid (`0.3,20,30`).
    #[arg(long, value_delimiter = ',', required = true)]
    pub magnitudes: Vec<f64>,
    /// Sample ids to sweep (comma separated); defaults to every indexed sample.
    #[arg(long, value_delimiter = ',')]
    pub samples: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AssociateArgs {
    #[command(flatten)]
    pub index: IndexArgs,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    /// Latents to summarize (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub neurons: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub index: IndexArgs,
    /// Concept assignments JSON (from `concepts`).
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    /// Probe JSON used when a sweep request names no classifier.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Allowed CORS origin; repeatable. Any origin when absent.
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
}

/// The clap command tree, for help rendering.
pub fn command() -> clap::Command {
    Cli::command()
}

/// Maps an error to its exit code.
pub fn exit_code(e: &MsaeError) -> i32 {
    if e.is_numeric_error() {
        EXIT_NUMERIC
    } else if e.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

fn config_args(path: &Path) -> Result<Vec<(String, Vec<OsString>)>, MsaeError> {
    let text = std::fs::read_to_string(path).map_err(|e| MsaeError::io(path, e))?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text)? else {
        return Err(MsaeError::Format { path: path.into(), detail: "config must be a JSON object".into() });
    };
    let scalar = |v: &Value| -> Result<OsString, MsaeError> {
        match v {
            Value::String(s) => Ok(s.into()),
            Value::Number(n) => Ok(n.to_string().into()),
            _ => Err(MsaeError::Format { path: path.into(), detail: format!("unsupported config value {v}") }),
        }
    };
    let mut out = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        let mut args = Vec::new();
        match &value {
            Value::Bool(true) => args.push(OsString::from(&flag)),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    args.push(OsString::from(&flag));
                    args.push(scalar(item)?);
                }
            }
            v => {
                args.push(OsString::from(&flag));
                args.push(scalar(v)?);
            }
        }
        out.push((flag, args));
    }
    Ok(out)
}

/// Splices config-file flags in after the subcommand, skipping any flag the
/// user already passed.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, MsaeError> {
    let mut config = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(PathBuf::from(it.next().unwrap_or_default()));
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let given: Vec<String> =
        rest.iter().map(|a| a.to_string_lossy().split('=').next().unwrap_or_default().to_string()).collect();
    let mut extra = Vec::new();
    for (flag, args) in config_args(&path)? {
        if !given.contains(&flag) {
            extra.extend(args);
        }
    }
    // argv[0], subcommand, config flags, user flags.
    let split = rest.len().min(2);
    let mut out: Vec<OsString> = rest[..split].to_vec();
    out.extend(extra);
    out.extend(rest[split..].iter().cloned());
    Ok(out)
}

fn init_threads() -> Result<(), MsaeError> {
    let Ok(v) = std::env::var("MSAE_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| MsaeError::InvalidArgument(format!("MSAE_THREADS must be a positive integer, got {v:?}")))?;
    // Ignore "already initialized" when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = init_threads().and_then(|()| commands::dispatch(cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn config_flags_land_after_subcommand_and_yield_to_cli() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"epochs": 5, "seed": 3, "k_list": "4,8"}"#).unwrap();
        let argv: Vec<OsString> = ["msae", "train", "--config", cfg.to_str().unwrap(), "--seed", "9"].iter().map(OsString::from).collect();
        let out = expand_config(argv).unwrap();
        let out: Vec<String> = out.iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(&out[..2], ["msae", "train"]);
        assert!(out.windows(2).any(|w| w == ["--epochs", "5"]));
        assert!(out.windows(2).any(|w| w == ["--k-list", "4,8"]));
        assert!(!out.windows(2).any(|w| w == ["--seed", "3"]));
        assert_eq!(out[out.len() - 2..], ["--seed", "9"]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&MsaeError::InvalidArgument("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&MsaeError::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&MsaeError::Truncated { path: "f".into(), detail: "d".into() }), EXIT_DATA);
    }
}

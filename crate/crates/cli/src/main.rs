//! `xlssl`: config-driven front end for the speech emotion recognition toolkit.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 data
//! error, 3 numeric failure.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use xlssl_core::corpus::{Partition, DEFAULT_SPLIT_RATIOS};
use xlssl_core::model::{ArchSpec, EncoderKind, BYPASS_DEFAULT_DIM};
use xlssl_core::{ExperimentKind, SslMode};

use config::RunConfig;
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "xlssl", version, about = "Semi-supervised cross-lingual speech emotion recognition")]
struct Cli {
    /// Maximum number of worker threads (default: one per core)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map raw manifests onto the five classes, merge them and split by speaker
    Prepare(PrepareCmd),
    /// Decode, resample and cache log-mel features for every utterance
    Extract(ExtractCmd),
    /// Train one model and score it on the test splits
    Train(TrainCmd),
    /// Score a checkpoint on one partition of a prepared corpus
    Evaluate(EvaluateCmd),
    /// Run a multi-seed experiment and write the report tables
    Experiment(ExperimentCmd),
}

#[derive(Args)]
struct PrepareCmd {
    /// Raw JSONL manifests of one language
    #[arg(long, num_args = 1.., required = true)]
    manifests: Vec<PathBuf>,
    /// JSON object mapping raw labels to a class name or "discard" (default: the five class names)
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = DEFAULT_SPLIT_RATIOS)]
    ratios: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Options shared by every config-driven command.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; see the key list below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.loss.tau=0.65
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Feature cache directory
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Prepared source-language directory
    #[arg(long)]
    source: Option<PathBuf>,
    /// Prepared target-language directory
    #[arg(long)]
    target: Option<PathBuf>,
    /// Directory of precomputed embeddings (bypass encoder)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// supervised, hard or soft
    #[arg(long)]
    mode: Option<SslMode>,
    /// Pseudo-label confidence threshold
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_h: Option<f64>,
    /// mlp, cnn-small or bypass, with that encoder's default shape
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExtractCmd {
    #[command(flatten)]
    config: ConfigArgs,
    /// Manifests to extract (default: those of paths.source and paths.target)
    #[arg(long, num_args = 1..)]
    manifest: Vec<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Labeled target utterances
    #[arg(long)]
    n_labeled: Option<usize>,
}

#[derive(Args)]
struct EvaluateCmd {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared corpus directory
    #[arg(long)]
    data: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test", value_parser = parse_partition)]
    partition: Partition,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentCmd {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// cross_lingual, multi_lingual, ssl_sweep, tau_sweep or synthetic
    #[arg(long)]
    kind: Option<ExperimentKind>,
    /// Number of seeds
    #[arg(long)]
    seeds: Option<usize>,
}

fn parse_partition(s: &str) -> std::result::Result<Partition, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown partition {s:?} (expected train, val or test)"))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.sets)?;
    if let Some(c) = &args.cache {
        cfg.paths.cache_dir = c.clone();
    }
    if let Some(o) = &args.out {
        cfg.paths.out_dir = o.clone();
    }
    Ok(cfg)
}

fn default_arch(kind: EncoderKind) -> ArchSpec {
    match kind {
        EncoderKind::Mlp => RunConfig::default().train.arch,
        EncoderKind::CnnSmall => ArchSpec::cnn_small(128),
        EncoderKind::Bypass => ArchSpec::bypass(BYPASS_DEFAULT_DIM),
    }
}

fn apply_model_args(cfg: &mut RunConfig, m: &ModelArgs) {
    let paths = &mut cfg.paths;
    for (slot, flag) in [(&mut paths.source, &m.source), (&mut paths.target, &m.target), (&mut paths.embeddings_dir, &m.embeddings)] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    let t = &mut cfg.train;
    if let Some(mode) = m.mode {
        t.loss.mode = mode;
        if mode != SslMode::Supervised {
            cfg.experiment.modes = vec![mode];
        }
    }
    if let Some(v) = m.tau {
        t.loss.tau = v;
    }
    if let Some(v) = m.lambda_a {
        t.loss.lambda_a = v;
    }
    if let Some(v) = m.lambda_h {
        t.loss.lambda_h = v;
    }
    if let Some(kind) = m.encoder {
        if t.arch.kind != kind {
            t.arch = default_arch(kind);
        }
    }
    if let Some(v) = m.epochs {
        t.epochs = v;
    }
    if let Some(v) = m.seed {
        t.seed = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::validation("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::validation(e.to_string()))?;
    }
    match cli.command {
        Command::Prepare(a) => {
            let ratios: [f64; 3] = a
                .ratios
                .as_slice()
                .try_into()
                .map_err(|_| CliError::validation("--ratios takes three values"))?;
            commands::prepare(&commands::PrepareArgs {
                manifests: a.manifests,
                taxonomy: a.taxonomy,
                seed: a.seed,
                ratios,
                out: a.out,
            })
        }
        Command::Extract(a) => {
            let cfg = load_config(&a.config)?;
            cfg.validate()?;
            commands::extract(&cfg, &a.manifest)
        }
        Command::Train(a) => {
            let mut cfg = load_config(&a.config)?;
            apply_model_args(&mut cfg, &a.model);
            if let Some(n) = a.n_labeled {
                cfg.n_labeled = n;
            }
            cfg.validate()?;
            commands::train(&cfg)
        }
        Command::Evaluate(a) => {
            let mut cfg = load_config(&a.config)?;
            if a.embeddings.is_some() {
                cfg.paths.embeddings_dir = a.embeddings;
            }
            cfg.validate()?;
            commands::evaluate(&cfg, &a.checkpoint, &a.data, a.partition)
        }
        Command::Experiment(a) => {
            let mut cfg = load_config(&a.config)?;
            apply_model_args(&mut cfg, &a.model);
            if let Some(k) = a.kind {
                cfg.experiment.kind = k;
            }
            if let Some(s) = a.seeds {
                cfg.experiment.seeds = s;
            }
            cfg.validate()?;
            commands::experiment(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let keys = config::key_listing();
    let mut cmd = Cli::command().after_help(keys.clone());
    for name in ["extract", "train", "evaluate", "experiment"] {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(keys.clone()));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}

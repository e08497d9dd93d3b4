//! The `prlm` command line: dataset ingestion, preference pairs, scorer and
//! policy training, and evaluation reports.
//!
//! Exit codes: 0 success, 1 user or configuration error, 2 runtime failure.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::corpus::{DatasetFormat, Split};
use crate::generate::GenerationSource;
use crate::retrieval::Strategy;

pub use config::{Backend, KRange, MethodSpec, Retrieval, RunConfig, SynthSection};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub(crate) fn runtime(e: impl Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub(crate) fn config(e: impl Display) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "prlm", version, about = "Personalized retrieval-augmented generation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each one overrides the matching
/// config-file value.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// lamp_json or jsonl.
    #[arg(long)]
    pub format: Option<DatasetFormat>,
    /// random, recency, bm25 or dense.
    #[arg(long)]
    pub retriever: Option<Strategy>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a dataset, or generate the synthetic one.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Re-split by timestamp: B1,B2.
        #[arg(long, value_parser = parse_boundaries)]
        split_boundaries: Option<[i64; 2]>,
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        /// Comma-separated style tokens.
        #[arg(long)]
        styles: Option<String>,
    },
    /// Build preference triplets from two generation sources.
    BuildPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        with_profile: Option<GenerationSource>,
        #[arg(long)]
        zero_shot: Option<GenerationSource>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train the personalization scorer on a triplet file.
    TrainPrm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the desk policy with group-relative policy optimization.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        /// Scorer model used for the personalization reward.
        #[arg(long)]
        prm: Option<PathBuf>,
        #[arg(long)]
        external_scores: Option<PathBuf>,
        /// Train without the personalization reward.
        #[arg(long)]
        no_personal_reward: bool,
        #[arg(long)]
        backend: Option<Backend>,
        /// Desk checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_completion: Option<usize>,
        #[arg(long)]
        warmup_steps: Option<usize>,
    },
    /// Score methods and write CSV, JSON and text reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// LABEL=SOURCE[@RETRIEVER]; repeatable.
        #[arg(long = "method")]
        methods: Vec<MethodSpec>,
        #[arg(long)]
        split: Option<Split>,
        /// Inclusive k range, e.g. 1..10.
        #[arg(long)]
        sweep_k: Option<KRange>,
        /// `all` or a comma-separated retriever list.
        #[arg(long, value_parser = config::parse_retrievers)]
        retrievers: Option<Vec<Strategy>>,
        /// CSV rows appended to the report; repeatable.
        #[arg(long = "fixture")]
        fixtures: Vec<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
}

fn parse_boundaries(s: &str) -> Result<[i64; 2], String> {
    let (a, b) = s.split_once(',').ok_or("boundaries must look like B1,B2")?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok([a, b])
}

fn base_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &c.dataset {
        cfg.dataset.path = Some(v.clone());
    }
    if let Some(v) = c.format {
        cfg.dataset.format = v;
    }
    if let Some(v) = c.retriever {
        cfg.retriever.strategy = v;
    }
    if let Some(v) = c.k {
        cfg.retriever.k = v;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Resolves the effective configuration of a parsed command line.
pub fn resolve(command: &Command) -> Result<RunConfig, CliError> {
    let mut cfg;
    match command {
        Command::Ingest { common, split_boundaries, synthetic, users, noise, styles } => {
            cfg = base_config(common)?;
            if split_boundaries.is_some() {
                cfg.dataset.split_boundaries = *split_boundaries;
            }
            if *synthetic || users.is_some() || noise.is_some() || styles.is_some() {
                let s = cfg.synthetic.get_or_insert_with(SynthSection::default);
                set(&mut s.users, *users);
                set(&mut s.noise, *noise);
                if let Some(list) = styles {
                    s.styles = list.split(',').map(|w| w.trim().to_string()).collect();
                }
            }
        }
        Command::BuildPairs { common, with_profile, zero_shot, limit } => {
            cfg = base_config(common)?;
            set(&mut cfg.pairs.with_profile, with_profile.clone());
            set(&mut cfg.pairs.zero_shot, zero_shot.clone());
            set(&mut cfg.pairs.limit, *limit);
        }
        Command::TrainPrm { common, triplets, epochs, lr } => {
            cfg = base_config(common)?;
            if triplets.is_some() {
                cfg.prm.triplets = triplets.clone();
            }
            set(&mut cfg.prm.epochs, *epochs);
            set(&mut cfg.prm.lr, *lr);
        }
        Command::TrainPolicy {
            common,
            prm,
            external_scores,
            no_personal_reward,
            backend,
            init,
            steps,
            lr,
            max_completion,
            warmup_steps,
        } => {
            cfg = base_config(common)?;
            if prm.is_some() {
                cfg.prm.path = prm.clone();
            }
            if external_scores.is_some() {
                cfg.prm.external_scores = external_scores.clone();
            }
            if *no_personal_reward {
                cfg.reward.personal = false;
            }
            set(&mut cfg.policy.backend, *backend);
            if init.is_some() {
                cfg.policy.checkpoint = init.clone();
            }
            set(&mut cfg.grpo.steps, *steps);
            set(&mut cfg.grpo.lr, *lr);
            set(&mut cfg.grpo.max_completion, *max_completion);
            set(&mut cfg.grpo.warmup_steps, *warmup_steps);
        }
        Command::Evaluate { common, methods, split, sweep_k, retrievers, fixtures, jobs, max_tokens } => {
            cfg = base_config(common)?;
            if !methods.is_empty() {
                cfg.eval.methods = methods.clone();
            }
            set(&mut cfg.eval.split, *split);
            if sweep_k.is_some() {
                cfg.eval.sweep_k = *sweep_k;
            }
            set(&mut cfg.eval.retrievers, retrievers.clone());
            if !fixtures.is_empty() {
                cfg.eval.fixtures = fixtures.clone();
            }
            set(&mut cfg.eval.jobs, *jobs);
            set(&mut cfg.policy.max_tokens, *max_tokens);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.command)?;
    match &cli.command {
        Command::Ingest { .. } => commands::ingest(&cfg).map(|_| ()),
        Command::BuildPairs { .. } => commands::build_pairs(&cfg).map(|_| ()),
        Command::TrainPrm { .. } => commands::train_prm(&cfg).map(|_| ()),
        Command::TrainPolicy { .. } => commands::train_policy(&cfg).map(|_| ()),
        Command::Evaluate { .. } => commands::evaluate(&cfg).map(|_| ()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

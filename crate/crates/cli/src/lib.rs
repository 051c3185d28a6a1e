//! `tkgqa` command-line pipelines.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tkgqa_core::SortMode;

use crate::config::{EmbedderKind, Overrides};
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tkgqa", version, about = "Training-free temporal knowledge graph QA agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a quadruple TSV and persist the store artifacts.
    Ingest(IngestArgs),
    /// Embed every fact and write the binary index.
    Index(IndexArgs),
    /// Run agent episodes over a question file.
    Run(RunArgs),
    /// Mine an experience library from training questions.
    Mine(MineArgs),
    /// Aggregate results into report tables and plot series.
    Report(ReportArgs),
}

fn parse_sort(s: &str) -> Result<SortMode, String> {
    match s {
        "relevance" => Ok(SortMode::Relevance),
        "time" => Ok(SortMode::Time),
        _ => Err(format!("expected relevance or time, got {s:?}")),
    }
}

fn parse_embedder(s: &str) -> Result<EmbedderKind, String> {
    match s {
        "hash" => Ok(EmbedderKind::Hash),
        "remote" => Ok(EmbedderKind::Remote),
        _ => Err(format!("expected hash or remote, got {s:?}")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub t_max: Option<usize>,
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    #[arg(long, global = true)]
    pub rerank_pool: Option<usize>,
    /// relevance or time
    #[arg(long, global = true, value_parser = parse_sort)]
    pub sort: Option<SortMode>,
    #[arg(long, global = true)]
    pub k_shots: Option<usize>,
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    /// Chat-completions URL or scripted:<path>.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// hash or remote
    #[arg(long, global = true, value_parser = parse_embedder)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long, global = true)]
    pub dimension: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Store directory written by `ingest`.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Index file written by `index`.
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    /// Load an index even if its embedder fingerprint differs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Append every gateway call to this JSONL file.
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Quadruple TSV: head, relation, tail, timestamp.
    pub graph: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Experience library used as demonstrations.
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Episodes per question.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Skip episodes already present in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Initial library to extend.
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// EvalRecord JSONL (defaults to <out>/results.jsonl).
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Trajectory JSONL (defaults to <out>/trajectories.jsonl).
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Gold-fact sidecar TSV: question_id, comma-separated fact ids.
    #[arg(long)]
    pub gold_facts: Option<PathBuf>,
    /// Interaction caps for the budget series, e.g. 1,3,8,20.
    #[arg(long, value_delimiter = ',')]
    pub caps: Option<Vec<usize>>,
    /// Use every trajectory for the gold-fact CDF instead of the
    /// successful, multi-target, more-than-3-rounds subset.
    #[arg(long)]
    pub cdf_all: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            t_max: self.t_max,
            limit: self.limit,
            rerank_pool: self.rerank_pool,
            sort: self.sort,
            k_shots: self.k_shots,
            group_size: self.group_size,
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            embedder: self.embedder,
            dimension: self.dimension,
            out: self.out.clone(),
            store: self.store.clone(),
            index: self.index.clone(),
            trace: self.trace.clone(),
            ..Default::default()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Index(a) => commands::index(&a),
        Command::Run(a) => commands::run(&a),
        Command::Mine(a) => commands::mine(&a),
        Command::Report(a) => commands::report(&a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

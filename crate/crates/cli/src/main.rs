//! `uniasm`: corpus inspection, vocabulary and dataset construction,
//! training, embedding, search and evaluation.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "uniasm", version, about = "Binary function similarity toolkit")]
struct Cli {
    /// TOML run configuration; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus and print statistics.
    Inspect(InspectArgs),
    /// Build a vocabulary from a corpus.
    Vocab(VocabArgs),
    /// Build train/validation pair datasets.
    Dataset(DatasetArgs),
    /// Train a model on a pair dataset.
    Train(TrainArgs),
    /// Embed every function of a corpus.
    Embed(EmbedArgs),
    /// Query an embedding pool.
    Search(SearchArgs),
    /// Cross-variant and vulnerability search evaluation.
    Eval(EvalArgs),
    /// Convert an embedding file to TSV.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Also write the report line to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VocabArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// FullI, HalfI or PieceI.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    vocab_cap: Option<usize>,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output directory for train.jsonl and valid.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Run directory to create; must not exist yet.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    /// Comma-separated subset of alg, sfp, mlm.
    #[arg(long)]
    tasks: Option<String>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Query label `project/func_name@variant`.
    #[arg(long)]
    query: String,
    /// Pool to search; defaults to the query's own pool.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Task such as xcom:O0, xopt:gcc:O0:O3 or xobf:O2:bcf (repeatable).
    #[arg(long = "task")]
    tasks: Vec<String>,
    /// Cutoffs (repeatable).
    #[arg(short, long = "k")]
    k: Vec<usize>,
    /// Vulnerability search for `project/func_name`: every variant is a query.
    #[arg(long)]
    vuln: Option<String>,
    /// Target pool for vulnerability search; defaults to --embeddings.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

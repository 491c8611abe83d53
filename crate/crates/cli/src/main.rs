//! `bookmem`: run the memorization-measurement pipeline on local files.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 provider/network error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod report;

use config::Config;

#[derive(Parser, Debug)]
#[command(name = "bookmem", version, about = "Measure verbatim book memorization in model generations")]
struct Cli {
    /// TOML key-value config; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel stages (outputs do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Word normalization: exact (case kept) or soft (casefolded, quotes unified).
    #[arg(long, global = true)]
    mode: Option<String>,

    #[command(subcommand)]
    command: Command,
}

/// A book on disk: the text plus its `{book_id, title, author}` sidecar.
#[derive(Args, Debug, Clone)]
pub struct BookArgs {
    #[arg(long)]
    pub book: PathBuf,
    /// Metadata sidecar; defaults to the book path with a `.json` extension.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Excerpt list; when absent the book is segmented with default bounds.
    #[arg(long)]
    pub excerpts: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct MatchArgs {
    /// Minimum match length in words.
    #[arg(long)]
    pub k: Option<usize>,
    /// Instruction-overlap window in words.
    #[arg(long)]
    pub m: Option<usize>,
    /// Spans strictly longer than this count toward the long-span statistic.
    #[arg(long)]
    pub threshold: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tokenize a book and write its word list.
    Ingest {
        #[arg(long)]
        book: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a book into excerpts along paragraph and sentence boundaries.
    Segment {
        #[arg(long)]
        book: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        min_words: Option<usize>,
        #[arg(long)]
        max_words: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize excerpts and build instruction prompts.
    Prepare {
        #[command(flatten)]
        book: BookArgs,
        /// `mock` (offline, deterministic) or `http`.
        #[arg(long, default_value = "mock")]
        provider: String,
        #[arg(long, env = "BOOKMEM_GENERATE_URL")]
        generate_url: Option<String>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write {input, output} finetuning pairs here.
        #[arg(long)]
        finetune_out: Option<PathBuf>,
    },
    /// Generate synthetic outputs from a model that memorized the book.
    Simulate {
        #[command(flatten)]
        book: BookArgs,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Probability that a sample replays book text.
        #[arg(long)]
        p: Option<f64>,
        /// `full` or a word count.
        #[arg(long)]
        replay: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute bmc@k and span statistics per model.
    Score {
        #[command(flatten)]
        book: BookArgs,
        #[arg(long)]
        generations: Vec<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[command(flatten)]
        matching: MatchArgs,
        /// Report path (single model); the mask goes to `<stem>.mask.json`.
        #[arg(long, conflicts_with = "out_dir")]
        out: Option<PathBuf>,
        /// One `<book>__<model>.report.json` (+ mask) per model.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also write per-excerpt coverage CSV next to each report.
        #[arg(long)]
        per_excerpt: bool,
    },
    /// Span statistics and the longest extracted spans per model.
    Stats {
        #[command(flatten)]
        book: BookArgs,
        #[arg(long)]
        generations: Vec<PathBuf>,
        #[command(flatten)]
        matching: MatchArgs,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-paragraph span ratio and semantic-rank analysis.
    Crosspara {
        #[command(flatten)]
        book: BookArgs,
        #[arg(long)]
        generations: Vec<PathBuf>,
        /// Needed for the rank analysis (summaries are embedded).
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Only spans strictly longer than this are attributed.
        #[arg(long)]
        min_span_words: Option<usize>,
        /// Free-form label for the finetuning setting.
        #[arg(long, default_value = "default")]
        setting: String,
        #[arg(long)]
        out: PathBuf,
        /// Write the semantic-rank table (CSV) here.
        #[arg(long)]
        rank_out: Option<PathBuf>,
        /// Also rank pairs whose source and target excerpt coincide.
        #[arg(long)]
        include_same_excerpt: bool,
        /// `hashing` (offline) or `http`.
        #[arg(long, default_value = "hashing")]
        embedder: String,
        #[arg(long, env = "BOOKMEM_EMBED_URL")]
        embed_url: Option<String>,
        #[arg(long, default_value_t = 256)]
        embed_dim: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-model mask agreement: Jaccard, shuffled baseline, split-half.
    Agree {
        #[command(flatten)]
        book: BookArgs,
        #[arg(long)]
        generations: Vec<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[command(flatten)]
        matching: MatchArgs,
        #[arg(long)]
        split_trials: Option<usize>,
        #[arg(long)]
        shuffle_trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query the longest spans against a corpus-count service.
    Provenance {
        /// Required unless serving.
        #[arg(long)]
        book: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        excerpts: Option<PathBuf>,
        #[arg(long)]
        generations: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, env = "BOOKMEM_CORPUS_URL")]
        corpus_url: Option<String>,
        /// Search a local directory of text files instead of a service.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
        /// Serve `--corpus-dir` over HTTP at this address and block.
        #[arg(long, requires = "corpus_dir")]
        serve: Option<String>,
        /// Comma-separated lower bin edges, e.g. 50,100,150.
        #[arg(long, value_delimiter = ',')]
        bins: Option<Vec<usize>>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Merge reports into metric tables, agreement matrices and charts.
    Report {
        /// Report files or directories containing `*.report.json`.
        #[arg(long, required = true)]
        reports: Vec<PathBuf>,
        /// Outputs of `agree`.
        #[arg(long)]
        agree: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Bad flag combinations or values detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[macro_export]
macro_rules! usage {
    ($($arg:tt)*) => {
        anyhow::Error::new($crate::UsageError(format!($($arg)*)))
    };
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<bookmem::Error>() {
            return if e.is_provider() { 3 } else { 2 };
        }
    }
    2
}

/// The error and its causes, skipping causes already spelled out by the
/// message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.is_empty() {
            msg = text;
        } else if !msg.contains(&text) {
            msg = format!("{msg}: {text}");
        }
    }
    msg
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    if let Some(n) = cfg.pick_opt(cli.threads, "threads")? {
        if n == 0 {
            return Err(usage!("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mode = commands::resolve_mode(&cfg, cli.mode.as_deref())?;
    commands::dispatch(cli.command, &cfg, mode)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

#[derive(Parser, Debug)]
#[command(name = "rctm", version, about = "Recurrent coupled topic model")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a sliced corpus directory from timestamped documents.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus from a known coupled chain.
    Synth(SynthArgs),
    /// Run the sampler and write checkpoint, summary and trace.
    Train(TrainArgs),
    /// Score a trained model on held-out documents.
    Eval(EvalArgs),
    /// Write topics, couplings and plot data.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// JSONL records `{id, timestamp, text}` or TSV `id<TAB>timestamp<TAB>text`.
    #[arg(long)]
    pub input: PathBuf,
    /// `jsonl` or `tsv`; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    /// Number of equal-width slices.
    #[arg(long, conflicts_with = "slice_seconds")]
    pub slices: Option<usize>,
    /// Slice width in seconds.
    #[arg(long)]
    pub slice_seconds: Option<i64>,
    #[arg(long, default_value_t = 1)]
    pub min_df: usize,
    #[arg(long, default_value_t = 1.0)]
    pub max_df: f64,
    #[arg(long, default_value_t = 1)]
    pub min_token_len: usize,
    /// Stopword list, one per line.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub docs: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab: usize,
    #[arg(long, default_value_t = 5)]
    pub topics: usize,
    #[arg(long, default_value_t = 3)]
    pub slices: usize,
    #[arg(long, default_value_t = 100)]
    pub doc_length: usize,
    /// `prior`, `banded`, or a JSON file holding one `K × K` matrix per transition.
    #[arg(long, default_value = "prior")]
    pub couplings: String,
    /// Scale of the banded pattern.
    #[arg(long, default_value_t = 100.0)]
    pub coupling_strength: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory from `ingest` or `synth`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// rctm, rctm-d or rctm-f.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub k_fixed: Option<usize>,
    #[arg(long)]
    pub k_init: Option<usize>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub a0: Option<f64>,
    #[arg(long)]
    pub b0: Option<f64>,
    #[arg(long)]
    pub e0: Option<f64>,
    #[arg(long)]
    pub d0: Option<f64>,
    #[arg(long)]
    pub r0: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hold out `1 - p` of every slice; the held-out part is written next to the model.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<usize>,
    /// Model directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model directory from `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Held-out corpus directory; defaults to the one written by `train --split`.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Split this corpus with the model's seed and score the held-out part.
    #[arg(long, requires = "corpus")]
    pub split: Option<f64>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Co-occurrence reference for coherence; defaults to the held-out corpus.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// perplexity, coherence, timestamp or all.
    #[arg(long, default_value = "all")]
    pub metric: String,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 50)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Results file; CSV traces are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Words per topic.
    #[arg(long, default_value_t = 8)]
    pub top_n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Export(a) => commands::export(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

//! `refilter`: synthetic data, indexing, training, evaluation and latency
//! benchmarks for token-filtered latent fusion.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "refilter", version, about = "Token-level filtering and latent fusion of retrieved evidence")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Flags {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Retrieved chunks per query.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Tokens per chunk.
    #[arg(long, global = true)]
    chunk_len: Option<usize>,
    /// Comma-separated 1-based backbone layers, e.g. `3,4`.
    #[arg(long, global = true, value_delimiter = ',')]
    fusion_layers: Option<Vec<usize>>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    noise_fraction: Option<f64>,
    #[arg(long, global = true)]
    shuffle: bool,
    /// Comma-separated batch sizes for `bench`.
    #[arg(long, global = true, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
    /// Output directory (default: `$REFILTER_OUT/<command>`, else `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-fact corpus, its questions and a noise pool.
    Synth,
    /// Chunk a corpus and build its BM25 index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Precompute context-encoder features for every chunk of a corpus.
    Cache {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the filter and fusion modules on a frozen backbone.
    Train,
    /// Evaluate a method or run a robustness experiment.
    Eval {
        /// refilter, s-rag, closed-book, noise or shuffle.
        #[arg(long, default_value = "refilter")]
        experiment: String,
        /// Required for every experiment except the two baselines.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Feature cache written by `cache`.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Per-query latency, time to first token and throughput by batch size.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump per-token gates and weights.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test question index; all questions when omitted.
        #[arg(long)]
        query: Option<usize>,
    },
    /// Train once per gate-sparsity weight and compare.
    Tune,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Index { .. } => "index",
            Command::Cache { .. } => "cache",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Visualize { .. } => "visualize",
            Command::Tune => "tune",
        }
    }

    fn checkpoint(&self) -> Option<&PathBuf> {
        match self {
            Command::Cache { checkpoint, .. } | Command::Bench { checkpoint } | Command::Visualize { checkpoint, .. } => {
                Some(checkpoint)
            }
            Command::Eval { checkpoint, .. } => checkpoint.as_ref(),
            _ => None,
        }
    }
}

fn resolve(cli: &Cli) -> Result<(RunConfig, PathBuf), refilter::Error> {
    let f = &cli.flags;
    // A checkpoint's run configuration stands in for `--config` when none is given.
    let file = f.config.clone().or_else(|| {
        cli.command.checkpoint().and_then(|c| c.parent()).map(|d| d.join("config.toml")).filter(|p| p.exists())
    });
    let mut cfg = RunConfig::load(file.as_deref())?;
    cfg.apply(&Overrides {
        seed: f.seed,
        k: f.k,
        chunk_len: f.chunk_len,
        fusion_layers: f.fusion_layers.clone(),
        lambda: f.lambda,
        noise_fraction: f.noise_fraction,
        shuffle: f.shuffle,
        batch_sizes: f.batch_sizes.clone(),
    });
    cfg.validate()?;
    let out = f.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os("REFILTER_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(cli.command.name())
    });
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), refilter::Error> {
    let (cfg, out) = resolve(&cli)?;
    cfg.echo(&out)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, &out),
        Command::Index { corpus } => commands::index(&cfg, &corpus, &out),
        Command::Cache { corpus, checkpoint } => commands::cache(&cfg, &corpus, &checkpoint, &out),
        Command::Train => commands::train(&cfg, &out),
        Command::Eval { experiment, checkpoint, features } => {
            commands::eval(&cfg, &experiment, checkpoint.as_deref(), features.as_deref(), &out)
        }
        Command::Bench { checkpoint } => commands::bench(&cfg, &checkpoint, &out),
        Command::Visualize { checkpoint, query } => commands::visualize(&cfg, &checkpoint, query, &out),
        Command::Tune => commands::tune(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

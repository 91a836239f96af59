//! `hindsight`: the chain-of-hindsight pipeline from the command line.
//!
//! Exit status: 0 on success, 2 for usage/config errors, 1 for data and runtime errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hindsight_core::chain::{LossPolicy, TrainingMode};
use hindsight_core::corpus::Task;

/// An error in how the tool was invoked rather than in the data.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "hindsight", version, about = "Chain-of-hindsight training toolkit")]
struct Cli {
    /// Worker threads for parallel parsing and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize a raw preference dataset to one record per line.
    Ingest {
        /// webgpt, hh, summarize or normalized.
        #[arg(long)]
        source: String,
        /// Keep tied comparisons (flagged) instead of skipping them.
        #[arg(long)]
        keep_ties: bool,
        input: PathBuf,
        output: PathBuf,
    },
    /// Render training examples with their loss masks for inspection.
    Build {
        #[arg(long, default_value = "coh", value_parser = parse_mode)]
        mode: TrainingMode,
        #[arg(long, default_value_t = 2)]
        chain_length: usize,
        #[arg(long)]
        natural_language: bool,
        #[arg(long)]
        last_output_only: bool,
        /// Extra feedback templates (JSONL).
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, env = "HF_SEED", default_value_t = 0)]
        seed: u64,
        /// Normalized corpus.
        input: PathBuf,
        output: PathBuf,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `section.key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample a continuation conditioned on a feedback marker.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "Good:")]
        condition: String,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Rewrite a previous output by marking it as bad.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        previous: String,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Score a checkpoint on a normalized corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Normalized corpus.
        #[arg(long)]
        data: PathBuf,
        /// Feedback marker used for generation/scoring; empty for none.
        #[arg(long, default_value = "Good:")]
        condition: String,
        /// Report path; the resolved options are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Run the labeling and generation HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// Pairs to label (JSONL of {pair_id, task, prompt, output_a, output_b}).
        #[arg(long, conflicts_with = "corpus")]
        pairs: Option<PathBuf>,
        /// Normalized corpus; the first two outputs of each record become a pair.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "labels.jsonl")]
        store: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, env = "HF_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic ascending/descending preference task.
    Synth {
        #[arg(long, default_value_t = 2000)]
        records: usize,
        /// Normalized corpus output.
        #[arg(long)]
        out: PathBuf,
        /// Also write a plain-text pretraining file.
        #[arg(long)]
        pretrain: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        pretrain_lines: usize,
        #[arg(long, env = "HF_SEED", default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct SamplingArgs {
    /// 0 for greedy.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Stop string, repeatable; replaces the defaults.
    #[arg(long = "stop")]
    stop: Vec<String>,
    /// Keep generating through EOS until max_new_tokens.
    #[arg(long)]
    ignore_eos: bool,
    #[arg(long, env = "HF_SEED", default_value_t = 0)]
    seed: u64,
}

fn parse_mode(s: &str) -> Result<TrainingMode, String> {
    s.parse()
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "summary" => Ok(Task::Summary),
        "dialogue" => Ok(Task::Dialogue),
        "qa" => Ok(Task::Qa),
        other => Err(format!("unknown task `{other}` (expected summary, dialogue or qa)")),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Ingest { source, keep_ties, input, output } => commands::ingest(&source, keep_ties, &input, &output),
        Command::Build { mode, chain_length, natural_language, last_output_only, templates, seed, input, output } => {
            let policy = if last_output_only { LossPolicy::LastOutputOnly } else { LossPolicy::AllOutputs };
            commands::build(mode, chain_length, natural_language, policy, templates.as_deref(), seed, &input, &output)
        }
        Command::Train { config, overrides, resume } => {
            let env_seed = std::env::var("HF_SEED").ok();
            let cfg = config::RunConfig::load(config.as_deref(), &overrides, env_seed.as_deref())?;
            commands::train(&cfg, resume.as_deref())
        }
        Command::Generate { ckpt, prompt, condition, sampling } => {
            commands::generate(&ckpt, &prompt, &condition, &sampling)
        }
        Command::Refine { ckpt, prompt, previous, rounds, sampling } => {
            commands::refine(&ckpt, &prompt, &previous, rounds, &sampling)
        }
        Command::Eval { ckpt, task, data, condition, out, sampling } => {
            commands::eval(&ckpt, task, &data, &condition, out.as_deref(), &sampling)
        }
        Command::Serve { addr, pairs, corpus, store, ckpt, static_dir, seed } => {
            commands::serve(addr, pairs.as_deref(), corpus.as_deref(), &store, ckpt.as_deref(), static_dir, seed)
        }
        Command::Synth { records, out, pretrain, pretrain_lines, seed } => {
            commands::synth(records, &out, pretrain.as_deref(), pretrain_lines, seed)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

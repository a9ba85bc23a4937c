//! The `slrkit` command line: config-driven corpus, training, pretraining,
//! evaluation, benchmarking and serving runs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::ConfigError;
use manifest::Recorder;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "slrkit", version, about = "Pose-based isolated sign recognition toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (YAML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack JSON-lines pose files into a corpus.
    Pack(RunArgs),
    /// Check every sample of a corpus.
    Validate(RunArgs),
    /// Self-supervised encoder pretraining.
    Pretrain(RunArgs),
    /// Train a classifier from scratch.
    Train(RunArgs),
    /// Train a classifier starting from a pretrained encoder.
    Finetune(RunArgs),
    /// Score a checkpoint on a corpus split.
    Evaluate(RunArgs),
    /// Serial batch-1 latency of a checkpoint.
    Benchmark(RunArgs),
    /// Serve sliding-window predictions.
    Serve(RunArgs),
    /// Generate a synthetic corpus.
    Synth(RunArgs),
    /// Replay corpus clips against a running server.
    Stream(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pack(_) => "pack",
            Command::Validate(_) => "validate",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Benchmark(_) => "benchmark",
            Command::Serve(_) => "serve",
            Command::Synth(_) => "synth",
            Command::Stream(_) => "stream",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Pack(a)
            | Command::Validate(a)
            | Command::Pretrain(a)
            | Command::Train(a)
            | Command::Finetune(a)
            | Command::Evaluate(a)
            | Command::Benchmark(a)
            | Command::Serve(a)
            | Command::Synth(a)
            | Command::Stream(a) => a,
        }
    }
}

/// `SLRKIT_THREADS`, when set.
pub fn thread_cap() -> Result<Option<usize>, ConfigError> {
    match std::env::var("SLRKIT_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ConfigError(format!(
                "SLRKIT_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// The error chain on one line, skipping causes already quoted by the
/// message above them.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

/// Runs one command and maps the outcome to an exit status.
pub fn run(command: &Command) -> i32 {
    match execute(command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<ConfigError>().is_some() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(command: &Command) -> Result<()> {
    let args = command.args();
    let threads = thread_cap()?;
    let cfg = config::load(&args.config, &args.overrides)?;
    let mut rec = Recorder::start(command.name(), &cfg)?;
    rec.input(&args.config)?;
    let outcome = match command {
        Command::Pack(_) => commands::pack_corpus(&cfg, &mut rec),
        Command::Validate(_) => commands::validate(&cfg, &mut rec),
        Command::Pretrain(_) => commands::pretrain(&cfg, &mut rec),
        Command::Train(_) => commands::train(&cfg, &mut rec, threads),
        Command::Finetune(_) => commands::finetune(&cfg, &mut rec, threads),
        Command::Evaluate(_) => commands::evaluate_cmd(&cfg, &mut rec),
        Command::Benchmark(_) => commands::benchmark(&cfg, &mut rec),
        Command::Serve(_) => commands::serve(&cfg, &mut rec, threads),
        Command::Synth(_) => commands::synth(&cfg, &mut rec),
        Command::Stream(_) => commands::stream(&cfg, &mut rec, threads),
    };
    rec.finish(&outcome)?;
    outcome
}

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit status plus message for a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CHECK: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: Self::CHECK,
            message: message.into(),
        }
    }
}

impl From<m2snet::Error> for Failure {
    fn from(e: m2snet::Error) -> Self {
        let code = match e {
            m2snet::Error::NonFinite { .. } => Self::NUMERIC,
            _ => Self::USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser)]
#[command(name = "m2snet", version, about = "Answer sentence selection with multi-modal similarity matching networks")]
struct Cli {
    /// Worker threads for parallel kernels.
    #[arg(long, global = true, env = "M2SNET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config; writes checkpoint, log and manifest.
    Train {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Score a split with a checkpoint; writes run file, qrels and report.
    Evaluate {
        checkpoint: PathBuf,
        split: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Keep questions whose candidates are all positive or all negative.
        #[arg(long)]
        no_filter: bool,
    },
    /// Score question/answer pairs from a TSV file and print them.
    Predict { checkpoint: PathBuf, pairs: PathBuf },
    /// Finite-difference check of every gradient on tiny models.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Question/pair/positive counts per split, before and after filtering.
    DataStats {
        #[arg(required = true)]
        splits: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train {
            config,
            output,
            seed,
            max_epochs,
            batch_size,
            patience,
        } => commands::train(
            &config,
            &output,
            commands::TrainOverrides {
                seed,
                max_epochs,
                batch_size,
                patience,
            },
        ),
        Command::Evaluate {
            checkpoint,
            split,
            output,
            no_filter,
        } => commands::evaluate(&checkpoint, &split, &output, !no_filter),
        Command::Predict { checkpoint, pairs } => commands::predict(&checkpoint, &pairs),
        Command::Gradcheck { seed, inject_fault } => commands::gradcheck(seed, inject_fault.as_deref()),
        Command::DataStats { splits } => commands::data_stats(&splits),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

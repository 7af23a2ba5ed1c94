//! `scformer` command line: train, eval, predict, inspect, verify.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scformer::data::Split;
use scformer::verify::Suite;

use crate::commands::{InspectOptions, InspectTarget};
use crate::config::{Overrides, RunConfig};
use crate::error::{write_error, CliError};

#[derive(Parser)]
#[command(
    name = "scformer",
    version,
    about = "Structured channel-wise forecasting transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset and evaluate the best checkpoint on test.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from `<out>/checkpoint/last`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint; writes metrics.json.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<out>/checkpoint/best`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write per-sample forecasts in raw units to predictions.csv.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Dump state trajectories, attention scores or parameter counts.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        what: InspectTarget,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Index of the sample within the split (attention).
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Keep every n-th prefix state (hippo).
        #[arg(long, default_value_t = 24)]
        stride: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the seeded property suites; writes report.json.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!(
            "unknown split {other:?} (expected train, val or test)"
        )),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::Predict { .. } => "predict",
            Self::Inspect { .. } => "inspect",
            Self::Verify { .. } => "verify",
        }
    }

    fn config_and_overrides(&self) -> Option<(&Path, &Overrides)> {
        match self {
            Self::Train {
                config, overrides, ..
            }
            | Self::Eval {
                config, overrides, ..
            }
            | Self::Predict {
                config, overrides, ..
            }
            | Self::Inspect {
                config, overrides, ..
            } => Some((config, overrides)),
            Self::Verify { .. } => None,
        }
    }

    /// Where error.json goes when the config itself cannot be read.
    fn fallback_out(&self) -> PathBuf {
        match self {
            Self::Verify { out, .. } => out.clone(),
            _ => self
                .config_and_overrides()
                .and_then(|(_, o)| o.out.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
        }
    }
}

fn run(cmd: &Command, cfg: Option<&RunConfig>) -> Result<(), CliError> {
    match (cmd, cfg) {
        (Command::Verify { suite, seed, out }, _) => commands::verify(*suite, *seed, out),
        (Command::Train { resume, .. }, Some(cfg)) => commands::train(cfg, *resume),
        (
            Command::Eval {
                checkpoint, split, ..
            },
            Some(cfg),
        ) => commands::eval(cfg, checkpoint.as_deref(), *split),
        (
            Command::Predict {
                checkpoint, split, ..
            },
            Some(cfg),
        ) => commands::predict(cfg, checkpoint.as_deref(), *split),
        (
            Command::Inspect {
                what,
                checkpoint,
                split,
                sample,
                stride,
                ..
            },
            Some(cfg),
        ) => commands::inspect(
            cfg,
            *what,
            &InspectOptions {
                checkpoint: checkpoint.as_deref(),
                split: *split,
                sample: *sample,
                stride: *stride,
            },
        ),
        (_, None) => unreachable!("config loaded for every command but verify"),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("SCFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "SCFORMER_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = &cli.command;
    let mut out = cmd.fallback_out();
    let mut seed = match cmd {
        Command::Verify { seed, .. } => Some(*seed),
        _ => cmd.config_and_overrides().and_then(|(_, o)| o.seed),
    };
    let result = configure_threads().and_then(|()| {
        let cfg = match cmd.config_and_overrides() {
            Some((path, overrides)) => {
                let cfg = RunConfig::load(path, overrides)?;
                out = cfg.out.clone();
                seed = Some(cfg.seed);
                Some(cfg)
            }
            None => None,
        };
        run(cmd, cfg.as_ref())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error [{}]: {err}", err.code());
            if let Err(e) = write_error(&out, cmd.name(), seed, &err) {
                eprintln!("could not write error.json to {}: {e}", out.display());
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

//! Configuration, orchestration and CSV output for `fedvar` experiments.

pub mod commands;
pub mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{Epsilon, ExperimentConfig};

/// Failure of a CLI invocation, split by exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run aborted: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Sigma,
    Bound,
    Train,
    Sweep,
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        None => Ok(Box::new(io::stdout().lock())),
        Some(p) => {
            let f = File::create(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

/// Runs one subcommand and writes its CSV to `out` (or the configured path,
/// or stdout). Diagnostics go to stderr.
pub fn run(command: Command, config: &ExperimentConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let data = commands::prepare(config)?;
    let path = out.or_else(|| config.output.path.clone());
    match command {
        Command::Sigma => commands::write_csv(&commands::cmd_sigma(config, &data)?, open_output(path.as_deref())?),
        Command::Bound => commands::write_csv(&commands::cmd_bound(config, &data)?, open_output(path.as_deref())?),
        Command::Train => {
            let (rows, outcome) = commands::cmd_train(config, &data)?;
            if let Some(check) = outcome.budget_check {
                eprintln!(
                    "achieved delta {:.6e} for target {} ({})",
                    check.achieved_delta,
                    config.privacy.delta,
                    if check.satisfied { "satisfied" } else { "NOT satisfied" }
                );
            }
            commands::write_csv(&rows, open_output(path.as_deref())?)
        }
        Command::Sweep if config.output.per_round => {
            let outcomes = commands::sweep_outcomes(config, &data)?;
            commands::write_csv(&commands::sweep_round_rows(&outcomes), open_output(path.as_deref())?)
        }
        Command::Sweep => commands::write_csv(&commands::cmd_sweep(config, &data)?, open_output(path.as_deref())?),
    }
}

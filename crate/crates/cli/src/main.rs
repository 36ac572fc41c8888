use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedvar_cli::{run, CliError, Command, ExperimentConfig};

/// Federated learning with geometrically scheduled differential-privacy noise.
#[derive(Parser)]
#[command(name = "fedvar", version)]
struct Args {
    #[command(subcommand)]
    command: Cmd,

    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `federation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// CSV destination; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Initial noise amplitude and per-round variances.
    Sigma,
    /// Convergence bound over M and the optimal M.
    Bound,
    /// One training run, one row per aggregation.
    Train,
    /// Final metrics over the sweep grid.
    Sweep,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("FEDVAR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("FEDVAR_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))
}

fn main_inner(args: Args) -> Result<(), CliError> {
    configure_threads()?;
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.federation.seed = seed;
    }
    let command = match args.command {
        Cmd::Sigma => Command::Sigma,
        Cmd::Bound => Command::Bound,
        Cmd::Train => Command::Train,
        Cmd::Sweep => Command::Sweep,
    };
    run(command, &config, args.out)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match main_inner(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedvar: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

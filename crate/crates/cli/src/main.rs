use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use qarrow_core::ensemble::with_workers;

mod commands;
mod config;

use config::{ExperimentKind, RawConfig, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<qarrow_core::Error> for CliError {
    fn from(e: qarrow_core::Error) -> Self {
        use qarrow_core::Error as E;
        match e {
            E::InvalidConfig(_)
            | E::DimensionMismatch { .. }
            | E::UnsupportedDimension(_)
            | E::NotHermitian { .. }
            | E::InvalidState(_)
            | E::Unsupported(_)
            | E::GridMismatch(_) => Self::Validation(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            _ => 3,
        }
    }
}

/// Simulations of continuously monitored qubits.
///
/// Config keys may also be set through QARROW_<KEY> environment variables
/// (e.g. QARROW_N_TRAJ=500). Precedence: config file, environment,
/// --set, --seed.
#[derive(Parser, Debug)]
#[command(name = "qarrow", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monitored trajectory and its Hamiltonian replica.
    Replicate(Common),
    /// ln R histograms for each chi.
    Arrow(Common),
    /// Monitored, replica-averaged and backward-averaged open dynamics.
    OpenReverse(Common),
    /// Measurement engine ledgers for each (eta, delay) case.
    Engine(Common),
    /// List the accepted config keys.
    Keys,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

fn resolve(kind: ExperimentKind, c: &Common) -> Result<(RunConfig, RawConfig), CliError> {
    let mut raw = match &c.config {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    raw.apply_env(std::env::vars())?;
    for s in &c.set {
        raw.apply_assignment(s)?;
    }
    if let Some(seed) = c.seed {
        raw.set("seed", &seed.to_string())?;
    }
    if c.workers == Some(0) {
        return Err(CliError::Validation("--workers must be at least 1".into()));
    }
    let cfg = RunConfig::resolve(kind, &raw, c.out.clone())?;
    Ok((cfg, raw))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (kind, common) = match &cli.command {
        Command::Replicate(c) => (ExperimentKind::Replicate, c),
        Command::Arrow(c) => (ExperimentKind::Arrow, c),
        Command::OpenReverse(c) => (ExperimentKind::OpenReverse, c),
        Command::Engine(c) => (ExperimentKind::Engine, c),
        Command::Keys => {
            for (k, desc) in config::KEYS {
                println!("{k:14} {desc}");
            }
            return Ok(());
        }
    };
    let (cfg, raw) = resolve(kind, common)?;
    std::fs::create_dir_all(&cfg.out)?;
    let start = Instant::now();
    let settings = raw.entries();
    let files = with_workers(common.workers, || match kind {
        ExperimentKind::Replicate => commands::replicate(&cfg, settings),
        ExperimentKind::Arrow => commands::arrow(&cfg, settings),
        ExperimentKind::OpenReverse => commands::open_reverse(&cfg, settings),
        ExperimentKind::Engine => commands::engine(&cfg, settings),
    })??;
    commands::write_timing(&cfg.out, &kind.to_string(), start.elapsed().as_secs_f64(), common.workers)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qarrow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

use output::Format;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure in {op}: {msg}")]
    Numerical { op: String, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn from_core(e: rpcglass::Error) -> Self {
        match e {
            rpcglass::Error::NonFinite { op } => CliError::Numerical {
                op: op.to_string(),
                msg: "non-finite value".into(),
            },
            other => CliError::Config(other.to_string()),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical { .. } => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rpcglass", version, about = "Cascades, the Mézard-Parisi functional and finite diluted spin systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the config. Without either, `RPCGLASS_SEED` or 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "jsonl", global = true)]
    format: Format,
    /// Output file (default: stdout).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// Sample truncated cascades and dump their weights.
    RpcSample,
    /// Check P(α∧β ≤ p) against ζ_p.
    OverlapLaw,
    /// Estimate the functional at one (ζ, h).
    MpEval,
    /// Minimize the functional over (ζ, h) for each configured depth.
    MpMin,
    /// Cascade average of log Σ v e^X against the recursion.
    RpcIdentity,
    /// Tilt-and-resort invariance statistics.
    InvarianceTest,
    /// Finite-size free energies.
    FiniteFe,
    /// Replicas from the Gibbs measure of one instance.
    Replicas,
    /// Ghirlanda-Guerra residuals.
    GgCheck,
    /// Ultrametricity violation frequency.
    UmCheck,
    /// Mass of negative overlaps.
    Positivity,
    /// Both sides of the cavity equations.
    CavityCheck,
    /// Finite-size free energies against the minimized functional.
    FlCompare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::RpcSample => "rpc-sample",
            Command::OverlapLaw => "overlap-law",
            Command::MpEval => "mp-eval",
            Command::MpMin => "mp-min",
            Command::RpcIdentity => "rpc-identity",
            Command::InvarianceTest => "invariance-test",
            Command::FiniteFe => "finite-fe",
            Command::Replicas => "replicas",
            Command::GgCheck => "gg-check",
            Command::UmCheck => "um-check",
            Command::Positivity => "positivity",
            Command::CavityCheck => "cavity-check",
            Command::FlCompare => "fl-compare",
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("RPCGLASS_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("RPCGLASS_SEED `{s}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let loaded = config::load(path)?;
    let seed = match cli.seed.or(loaded.config.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let mut em = output::Emitter::new(cli.out.as_deref(), cli.format, cli.command.name(), &loaded.hash, seed)?;
    commands::run(cli.command, &loaded, seed, &mut em)?;
    em.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rpcglass: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `aerolog` command-line front end.
//!
//! Exit status: 0 on success, 2 on user error (bad input, unknown channel,
//! invalid scenario), 1 on internal error. Diagnostics go to stderr and data
//! to stdout.

pub mod calibrate;
pub mod config;
pub mod export;
pub mod plot;
pub mod serve;
pub mod simulate;

use std::fmt;
use std::process::ExitCode;

use aerolog_core::storage::StorageError;
use clap::{Parser, Subcommand};

use crate::config::{CliConfig, GlobalArgs};

#[derive(Debug, Parser)]
#[command(
    name = "aerolog",
    about = "CO2 telemetry toolkit: ingestion server, device simulator, calibration, export and plotting",
    disable_version_flag = true,
    arg_required_else_help = true
)]
pub struct Cli {
    /// Print version information as JSON and exit
    #[arg(long, short = 'V')]
    pub version: bool,
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the ThingSpeak-compatible ingestion server
    Serve(serve::ServeArgs),
    /// Run a simulated device fleet over a scenario and emit a JSONL tick stream
    Simulate(simulate::SimulateArgs),
    /// Estimate R0 from fresh-air samples
    Calibrate(calibrate::CalibrateArgs),
    /// Write one field of a channel as CSV
    Export(export::ExportArgs),
    /// Render windowed means of one field as an SVG line chart
    Plot(plot::PlotArgs),
}

/// A command failure, classified for the exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad input from the caller; exit 2.
    Usage(anyhow::Error),
    /// Anything else; exit 1.
    Internal(anyhow::Error),
}

impl Failure {
    fn is_broken_pipe(&self) -> bool {
        let (Self::Usage(e) | Self::Internal(e)) = self;
        e.chain()
            .filter_map(|c| c.downcast_ref::<std::io::Error>())
            .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    }

    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self::Usage(e.into())
    }

    pub fn internal(e: impl Into<anyhow::Error>) -> Self {
        Self::Internal(e.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Internal(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Self::Usage(e) | Self::Internal(e)) = self;
        write!(f, "{e:#}")
    }
}

impl From<StorageError> for Failure {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::NotFound(_) | StorageError::BadRequest(_) => Self::usage(e),
            _ => Self::internal(e),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn version_json() -> String {
    serde_json::json!({
        "name": "aerolog",
        "version": env!("CARGO_PKG_VERSION"),
        "scenario_schema": aerolog_core::sim::scenario::SCHEMA_VERSION,
    })
    .to_string()
}

fn init_tracing(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(config::DEFAULT_LOG_LEVEL));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Runs a parsed command line with the process environment.
pub fn run(cli: Cli) -> CmdResult {
    if cli.version {
        println!("{}", version_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::usage(anyhow::anyhow!("no command given; see --help")));
    };
    let cfg = CliConfig::load(&cli.global, |k| std::env::var(k).ok()).map_err(Failure::usage)?;
    init_tracing(&cfg.log_level);
    match command {
        Command::Serve(args) => serve::run(&cfg, &args),
        Command::Simulate(args) => simulate::run(&cfg, &args),
        Command::Calibrate(args) => calibrate::run(&cfg, &args),
        Command::Export(args) => export::run(&cfg, &args),
        Command::Plot(args) => plot::run(&cfg, &args),
    }
}

pub fn main_with_exit_code() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // the reader went away, e.g. `aerolog simulate ... | head`
        Err(f) if f.is_broken_pipe() => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("aerolog: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

pub(crate) fn runtime() -> CmdResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Failure::internal)
}

pub(crate) fn parse_time(s: &str) -> Result<chrono::DateTime<chrono::Utc>, String> {
    aerolog_core::timefmt::parse_instant(s)
        .ok_or_else(|| format!("expected an ISO-8601 time such as 2023-06-01T09:00:00Z, got {s:?}"))
}

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aerolog_core::sim::scenario::Scenario;
use aerolog_core::sim::sink::{HttpSink, OfflineSink, UploadSink};
use aerolog_core::sim::{run_fleet, Clock, DeviceConfig, DeviceTickReport, RunSummary};
use anyhow::{anyhow, Context};
use clap::Args;
use serde::Deserialize;
use tokio::sync::mpsc;

use crate::config::CliConfig;
use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Scenario TOML
    pub scenario: PathBuf,
    /// Device fleet TOML with one `[[devices]]` table per device
    pub devices: Option<PathBuf>,
    /// Base URL of an ingestion server to upload to
    #[arg(long, value_name = "URL", required_unless_present = "offline")]
    pub target: Option<String>,
    /// Skip uploads
    #[arg(long, conflicts_with = "target")]
    pub offline: bool,
    /// Run on virtual time instead of the wall clock
    #[arg(long)]
    pub accelerated: bool,
    /// Noise seed; defaults to the scenario's `seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the tick stream here instead of stdout
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn load_scenario(path: &Path) -> CmdResult<Scenario> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::usage)?;
    Scenario::from_toml_str(&text).map_err(|e| Failure::usage(anyhow!("{}: {e}", path.display())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FleetFile {
    devices: Vec<toml::Table>,
}

/// Reads a fleet file. Devices without `params` or `firmware_r_zero` take
/// them from the CLI config.
pub fn load_devices(path: Option<&Path>, cfg: &CliConfig) -> CmdResult<Vec<DeviceConfig>> {
    let Some(path) = path else {
        let device = DeviceConfig {
            params: cfg.sensor,
            firmware_r_zero: cfg.r_zero,
            ..Default::default()
        };
        device
            .validate()
            .map_err(|e| Failure::usage(anyhow!("device config: {e}")))?;
        return Ok(vec![device]);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::usage)?;
    let fleet: FleetFile = toml::from_str(&text).map_err(|e| Failure::usage(anyhow!("{}: {e}", path.display())))?;
    if fleet.devices.is_empty() {
        return Err(Failure::usage(anyhow!("{}: no [[devices]] entries", path.display())));
    }
    let params = toml::Value::try_from(cfg.sensor).map_err(Failure::internal)?;
    let mut out = Vec::with_capacity(fleet.devices.len());
    for (i, mut table) in fleet.devices.into_iter().enumerate() {
        table.entry("params").or_insert_with(|| params.clone());
        if let Some(r) = cfg.r_zero {
            table.entry("firmware_r_zero").or_insert(toml::Value::Float(r));
        }
        let device: DeviceConfig = table
            .try_into()
            .map_err(|e| Failure::usage(anyhow!("{}: devices[{i}]: {e}", path.display())))?;
        device
            .validate()
            .map_err(|e| Failure::usage(anyhow!("{}: devices[{i}]: {e}", path.display())))?;
        out.push(device);
    }
    Ok(out)
}

/// Runs the fleet. In accelerated mode the whole stream is returned sorted
/// by `(at, device)`; in real-time mode reports go to `live` as they arrive
/// and the returned list is empty.
pub async fn run_to_completion<S: UploadSink + 'static>(
    scenario: Scenario,
    devices: Vec<DeviceConfig>,
    seed: u64,
    sink: Arc<S>,
    clock: Clock,
    mut live: impl FnMut(&DeviceTickReport) -> io::Result<()>,
) -> CmdResult<(Vec<DeviceTickReport>, RunSummary)> {
    let (tx, mut rx) = mpsc::unbounded_channel();
    let fleet = tokio::spawn(run_fleet(Arc::new(scenario), devices, seed, sink, clock, tx));
    let mut collected = Vec::new();
    while let Some(report) = rx.recv().await {
        match clock {
            Clock::Accelerated => collected.push(report),
            Clock::RealTime => live(&report).map_err(Failure::internal)?,
        }
    }
    let summaries = fleet
        .await
        .map_err(Failure::internal)?
        .map_err(|e| Failure::internal(anyhow!("simulation failed: {e}")))?;
    collected.sort_by_key(|r| (r.at, r.device, r.tick));
    let mut total = RunSummary::default();
    for s in &summaries {
        total.merge(s);
    }
    Ok((collected, total))
}

fn write_line(out: &mut dyn Write, report: &DeviceTickReport) -> io::Result<()> {
    serde_json::to_writer(&mut *out, report)?;
    out.write_all(b"\n")
}

pub fn run(cfg: &CliConfig, args: &SimulateArgs) -> CmdResult {
    let scenario = load_scenario(&args.scenario)?;
    let devices = load_devices(args.devices.as_deref(), cfg)?;
    let seed = args.seed.unwrap_or(scenario.seed);
    let clock = if args.accelerated {
        Clock::Accelerated
    } else {
        Clock::RealTime
    };
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .map_err(Failure::usage)?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let n_devices = devices.len();
    let rt = crate::runtime()?;
    let (ticks, summary) = rt.block_on(async {
        let live = |r: &DeviceTickReport| write_line(&mut *out, r).and_then(|_| out.flush());
        match &args.target {
            Some(url) => run_to_completion(scenario, devices, seed, Arc::new(HttpSink::new(url)), clock, live).await,
            None => run_to_completion(scenario, devices, seed, Arc::new(OfflineSink), clock, live).await,
        }
    })?;
    for t in &ticks {
        write_line(&mut *out, t).map_err(Failure::internal)?;
    }
    out.flush().map_err(Failure::internal)?;
    eprintln!(
        "summary: devices={n_devices} ticks={} uploads_attempted={} uploads_accepted={} alerts_raised={} alerts_cleared={}",
        summary.ticks, summary.uploads_attempted, summary.uploads_accepted, summary.alerts_raised, summary.alerts_cleared
    );
    Ok(())
}

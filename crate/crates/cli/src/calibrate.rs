use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aerolog_core::sensor::{calibrate, CalibrationEstimate, CalibrationSample, SensorParams};
use aerolog_core::sim::sink::OfflineSink;
use aerolog_core::sim::{Clock, DeviceConfig};
use aerolog_core::timefmt;
use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::Args;
use serde::Deserialize;

use crate::config::{CliConfig, ConfigFile};
use crate::simulate::{load_devices, load_scenario, run_to_completion};
use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// CSV with `at,adc,temperature_c,humidity_pct`, or a JSONL tick stream from `simulate`
    #[arg(required_unless_present = "from_simulation")]
    pub samples: Option<PathBuf>,
    /// Simulate the first device of a fleet over this scenario and calibrate from its readings
    #[arg(long, value_name = "SCENARIO", conflicts_with = "samples")]
    pub from_simulation: Option<PathBuf>,
    /// Fleet file for --from-simulation
    #[arg(long, value_name = "FILE", requires = "from_simulation")]
    pub devices: Option<PathBuf>,
    /// Noise seed for --from-simulation; defaults to the scenario's `seed`
    #[arg(long, requires = "from_simulation")]
    pub seed: Option<u64>,
    /// Also write a config file carrying the new `r-zero` and the sensor parameters used
    #[arg(long, value_name = "FILE")]
    pub write_config: Option<PathBuf>,
}

#[derive(Deserialize)]
struct CsvSample {
    at: String,
    adc: u32,
    temperature_c: f64,
    humidity_pct: f64,
}

#[derive(Deserialize)]
struct TickLine {
    reading: TickReading,
}

#[derive(Deserialize)]
struct TickReading {
    timestamp: DateTime<Utc>,
    adc: u32,
    temperature_c: f64,
    humidity_pct: f64,
}

fn looks_like_jsonl(path: &Path, bytes: &[u8]) -> bool {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "ndjson") => true,
        Some("csv") => false,
        _ => bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{'),
    }
}

pub fn parse_csv(bytes: &[u8]) -> anyhow::Result<Vec<CalibrationSample>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<CsvSample>().enumerate() {
        let line = i + 2;
        let row = row.with_context(|| format!("line {line}"))?;
        let at = timefmt::parse_instant(&row.at).ok_or_else(|| anyhow!("line {line}: bad time {:?}", row.at))?;
        out.push(CalibrationSample {
            at,
            adc: row.adc,
            temperature_c: row.temperature_c,
            humidity_pct: row.humidity_pct,
        });
    }
    Ok(out)
}

pub fn parse_ticks(bytes: &[u8]) -> anyhow::Result<Vec<CalibrationSample>> {
    let text = std::str::from_utf8(bytes).context("tick stream is not UTF-8")?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tick: TickLine = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
        out.push(CalibrationSample {
            at: tick.reading.timestamp,
            adc: tick.reading.adc,
            temperature_c: tick.reading.temperature_c,
            humidity_pct: tick.reading.humidity_pct,
        });
    }
    Ok(out)
}

fn read_samples(path: &Path) -> CmdResult<Vec<CalibrationSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::usage)?;
    let parsed = if looks_like_jsonl(path, &bytes) {
        parse_ticks(&bytes)
    } else {
        parse_csv(&bytes)
    };
    parsed
        .with_context(|| format!("{}", path.display()))
        .map_err(Failure::usage)
}

fn simulated_samples(
    cfg: &CliConfig,
    args: &CalibrateArgs,
    scenario: &Path,
) -> CmdResult<(Vec<CalibrationSample>, SensorParams)> {
    let scenario = load_scenario(scenario)?;
    let mut devices = load_devices(args.devices.as_deref(), cfg)?;
    let device: DeviceConfig = devices.remove(0);
    let params = device.params;
    let seed = args.seed.unwrap_or(scenario.seed);
    let rt = crate::runtime()?;
    let (ticks, _) = rt.block_on(run_to_completion(
        scenario,
        vec![device],
        seed,
        Arc::new(OfflineSink),
        Clock::Accelerated,
        |_| Ok(()),
    ))?;
    let samples = ticks
        .iter()
        .map(|t| CalibrationSample {
            at: t.reading.timestamp,
            adc: t.reading.adc,
            temperature_c: t.reading.temperature_c,
            humidity_pct: f64::from(t.reading.humidity_pct),
        })
        .collect();
    Ok((samples, params))
}

pub fn estimate(cfg: &CliConfig, args: &CalibrateArgs) -> CmdResult<(CalibrationEstimate, SensorParams)> {
    let (samples, params) = match (&args.samples, &args.from_simulation) {
        (_, Some(scenario)) => simulated_samples(cfg, args, scenario)?,
        (Some(path), None) => (read_samples(path)?, cfg.sensor),
        (None, None) => return Err(Failure::usage(anyhow!("give a samples file or --from-simulation"))),
    };
    if samples.is_empty() {
        return Err(Failure::usage(anyhow!("no samples in input")));
    }
    let est = calibrate(&samples, &params).map_err(|e| Failure::usage(anyhow!("calibration failed: {e}")))?;
    Ok((est, params))
}

pub fn run(cfg: &CliConfig, args: &CalibrateArgs) -> CmdResult {
    let (est, params) = estimate(cfg, args)?;
    println!("{}", serde_json::to_string(&est).map_err(Failure::internal)?);
    if let Some(path) = &args.write_config {
        let file = ConfigFile {
            r_zero: Some(est.r_zero),
            sensor: Some(params),
            ..Default::default()
        };
        std::fs::write(path, file.to_toml())
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::usage)?;
    }
    if est.skipped > 0 {
        eprintln!("warning: {} of {} samples skipped", est.skipped, est.sample_count);
    }
    Ok(())
}

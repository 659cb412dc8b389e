//! Layered configuration: flags, then environment, then config file, then defaults.

use std::path::{Path, PathBuf};

use aerolog_core::ingest::DEFAULT_RATE_WINDOW_SECS;
use aerolog_core::sensor::SensorParams;
use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

pub const ENV_ADDR: &str = "AEROLOG_ADDR";
pub const ENV_DATA_DIR: &str = "AEROLOG_DATA_DIR";
pub const ENV_CONFIG: &str = "AEROLOG_CONFIG";
pub const ENV_LOG: &str = "AEROLOG_LOG";

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "data";
pub const DEFAULT_LOG_LEVEL: &str = "info";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file [env: AEROLOG_CONFIG]
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Storage root [env: AEROLOG_DATA_DIR]
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Listen address for `serve` [env: AEROLOG_ADDR]
    #[arg(long, global = true, value_name = "HOST:PORT")]
    pub addr: Option<String>,
    /// Log filter, e.g. `info` or `aerolog_core=debug` [env: AEROLOG_LOG]
    #[arg(long, global = true, value_name = "FILTER")]
    pub log_level: Option<String>,
    /// Seconds between accepted writes per key; 0 disables limiting
    #[arg(long, global = true, value_name = "SECS")]
    pub rate_window: Option<u64>,
    /// Calibration resistance the firmware uses (ohm)
    #[arg(long, global = true, value_name = "OHM")]
    pub r_zero: Option<f64>,
}

/// On-disk config. Keys mirror the long flag names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub addr: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_level: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_window: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_zero: Option<f64>,
    /// Sensor model overrides; omitted keys keep their defaults.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensor: Option<SensorParams>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub data_dir: PathBuf,
    pub listen_addr: String,
    pub log_level: String,
    pub rate_window_secs: u64,
    pub r_zero: Option<f64>,
    pub sensor: SensorParams,
}

impl CliConfig {
    /// Merges the layers. `env` looks up an environment variable; `file` is
    /// the parsed config file, if any.
    pub fn resolve(flags: &GlobalArgs, env: impl Fn(&str) -> Option<String>, file: ConfigFile) -> Self {
        let env = |k: &str| env(k).filter(|v| !v.is_empty());
        Self {
            data_dir: flags
                .data_dir
                .clone()
                .or_else(|| env(ENV_DATA_DIR).map(PathBuf::from))
                .or(file.data_dir)
                .unwrap_or_else(|| DEFAULT_DATA_DIR.into()),
            listen_addr: flags
                .addr
                .clone()
                .or_else(|| env(ENV_ADDR))
                .or(file.addr)
                .unwrap_or_else(|| DEFAULT_ADDR.into()),
            log_level: flags
                .log_level
                .clone()
                .or_else(|| env(ENV_LOG))
                .or(file.log_level)
                .unwrap_or_else(|| DEFAULT_LOG_LEVEL.into()),
            rate_window_secs: flags
                .rate_window
                .or(file.rate_window)
                .unwrap_or(DEFAULT_RATE_WINDOW_SECS as u64),
            r_zero: flags.r_zero.or(file.r_zero),
            sensor: file.sensor.unwrap_or_default(),
        }
    }

    /// Reads the config file named by `--config` or `AEROLOG_CONFIG`, then resolves.
    pub fn load(flags: &GlobalArgs, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let path = flags
            .config
            .clone()
            .or_else(|| env(ENV_CONFIG).filter(|v| !v.is_empty()).map(PathBuf::from));
        let file = match path {
            Some(p) => ConfigFile::load(&p)?,
            None => ConfigFile::default(),
        };
        if let Some(r) = flags.r_zero.or(file.r_zero) {
            anyhow::ensure!(r.is_finite() && r > 0.0, "r-zero must be > 0, got {r}");
        }
        Ok(Self::resolve(flags, env, file))
    }
}

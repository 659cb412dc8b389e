//! Virtual NodeMCU: turns ground truth into ADC counts by inverting the
//! sensor model, then runs the firmware loop (sample, display, alarm,
//! upload) on a virtual or wall clock.

pub mod scenario;
pub mod sink;

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use crate::alerting::{
    format_fixed2, render_display, AlertConfig, AlertError, AlertEvent, AlertKind, AlertMode, AlertMonitor,
    DisplayFrame,
};
use crate::sensor::{correction_factor, quantize_dht11, GasReading, SensorError, SensorParams};

pub use scenario::{Scenario, ScenarioError, Truth};
pub use sink::{HttpSink, OfflineSink, ReportOutcome, ServiceSink, Upload, UploadOutcome, UploadSink};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("t = {at} s is past the scenario end ({duration} s)")]
    ScenarioEnded { at: f64, duration: f64 },
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Alert(#[from] AlertError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid device config: {0}")]
    InvalidConfig(String),
    #[error("device task failed: {0}")]
    Task(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    /// True `R0` of the simulated sensor element (ohm).
    pub device_r_zero: f64,
    /// `R0` the firmware was calibrated with; the true value when absent.
    pub firmware_r_zero: Option<f64>,
    pub params: SensorParams,
    /// Seconds between loop iterations.
    pub sample_period: f64,
    /// Seconds between uploads.
    pub upload_period: f64,
    pub channel_id: u64,
    pub write_key: String,
    pub alert: AlertConfig,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            device_r_zero: 15_568.0,
            firmware_r_zero: None,
            params: SensorParams::default(),
            sample_period: 2.0,
            upload_period: 15.0,
            channel_id: 1,
            write_key: String::new(),
            alert: AlertConfig::default(),
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.alert.validate()?;
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.device_r_zero.is_finite() && self.device_r_zero > 0.0) {
            return bad(format!("device_r_zero must be > 0, got {}", self.device_r_zero));
        }
        if let Some(r) = self.firmware_r_zero {
            if !(r.is_finite() && r > 0.0) {
                return bad(format!("firmware_r_zero must be > 0, got {r}"));
            }
        }
        if !(self.sample_period.is_finite() && self.sample_period > 0.0) {
            return bad(format!("sample_period must be > 0, got {}", self.sample_period));
        }
        if !(self.upload_period.is_finite() && self.upload_period >= self.sample_period) {
            return bad(format!(
                "upload_period must be >= sample_period ({}), got {}",
                self.sample_period, self.upload_period
            ));
        }
        Ok(())
    }

    pub fn firmware_r_zero(&self) -> f64 {
        self.firmware_r_zero.unwrap_or(self.device_r_zero)
    }
}

/// Real-valued ADC code the divider would produce for this ground truth.
pub fn adc_real_from_truth(
    co2: f64,
    temperature_c: f64,
    humidity_pct: f64,
    device_r_zero: f64,
    params: &SensorParams,
) -> Result<f64> {
    if !(co2.is_finite() && co2 > 0.0) {
        return Err(SimError::InvalidConfig(format!("co2 must be > 0, got {co2}")));
    }
    let f = correction_factor(temperature_c, humidity_pct, params)?;
    let rs_corrected = device_r_zero * (co2 / params.ppm_scale).powf(-1.0 / params.ppm_exponent);
    let rs = rs_corrected * f;
    Ok(params.adc_max as f64 * params.r_load / (rs + params.r_load))
}

/// Integer ADC code for this ground truth, rounded half away from zero and
/// clamped to `[1, adc_max - 1]`.
pub fn adc_from_truth(
    co2: f64,
    temperature_c: f64,
    humidity_pct: f64,
    device_r_zero: f64,
    params: &SensorParams,
) -> Result<u32> {
    let real = adc_real_from_truth(co2, temperature_c, humidity_pct, device_r_zero, params)?;
    Ok(clamp_adc(real.round(), params))
}

fn clamp_adc(code: f64, params: &SensorParams) -> u32 {
    code.clamp(1.0, (params.adc_max - 1) as f64) as u32
}

/// One loop iteration's sensor read. Draws exactly one normal variate from
/// `rng` when the scenario has noise.
pub fn sample<R: Rng + ?Sized>(scenario: &Scenario, at: f64, config: &DeviceConfig, rng: &mut R) -> Result<GasReading> {
    sample_with_truth(scenario, at, config, rng).map(|(r, _)| r)
}

fn sample_with_truth<R: Rng + ?Sized>(
    scenario: &Scenario,
    at: f64,
    config: &DeviceConfig,
    rng: &mut R,
) -> Result<(GasReading, Truth)> {
    let truth = scenario.truth_at(at).ok_or(SimError::ScenarioEnded {
        at,
        duration: scenario.duration(),
    })?;
    let (t, h) = quantize_dht11(truth.temperature_c, truth.humidity_pct);
    let params = &config.params;
    let clean = adc_from_truth(truth.co2, t, h as f64, config.device_r_zero, params)?;
    let sigma = scenario.noise.adc_sigma;
    let adc = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        clamp_adc((clean as f64 + normal.sample(rng)).round(), params)
    } else {
        clean
    };
    let reading = GasReading::derive(scenario.instant(at), adc, t, h, config.firmware_r_zero(), params)?;
    Ok((reading, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Virtual time; ticks are produced as fast as possible.
    Accelerated,
    /// Ticks are paced against the wall clock.
    RealTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadReport {
    pub fields: BTreeMap<String, String>,
    pub outcome: UploadOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTickReport {
    pub device: usize,
    pub channel_id: u64,
    pub tick: u64,
    pub at: DateTime<Utc>,
    pub truth: Truth,
    pub reading: GasReading,
    pub display: [DisplayFrame; 2],
    pub alert_mode: AlertMode,
    pub alert_event: Option<AlertEvent>,
    /// What the sink did with `alert_event`; absent on ticks without one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert_report: Option<ReportOutcome>,
    pub upload: Option<UploadReport>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ticks: u64,
    pub uploads_attempted: u64,
    pub uploads_accepted: u64,
    pub alerts_raised: u64,
    pub alerts_cleared: u64,
}

impl RunSummary {
    pub fn merge(&mut self, other: &RunSummary) {
        self.ticks += other.ticks;
        self.uploads_attempted += other.uploads_attempted;
        self.uploads_accepted += other.uploads_accepted;
        self.alerts_raised += other.alerts_raised;
        self.alerts_cleared += other.alerts_cleared;
    }
}

/// Fields the firmware sends: temperature, humidity, corrected ppm.
pub fn upload_fields(reading: &GasReading) -> Vec<(usize, String)> {
    vec![
        (1, format_fixed2(reading.temperature_c)),
        (2, reading.humidity_pct.to_string()),
        (3, format_fixed2(reading.corrected_ppm)),
    ]
}

/// Runs one device from scenario start to end. Ticks fall at
/// `k * sample_period` for every `k` with that offset strictly before the
/// scenario end. A tick uploads when at least `upload_period` seconds have
/// passed since the previous upload attempt, so consecutive uploads are never
/// closer than the period.
pub async fn run_device<S, F>(
    device: usize,
    scenario: &Scenario,
    config: &DeviceConfig,
    seed: u64,
    sink: &S,
    clock: Clock,
    mut emit: F,
) -> Result<RunSummary>
where
    S: UploadSink + ?Sized,
    F: FnMut(DeviceTickReport),
{
    scenario.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alarm = AlertMonitor::new(config.channel_id, config.alert, scenario.start);
    let mut summary = RunSummary::default();
    let duration = scenario.duration();
    let wall_origin = tokio::time::Instant::now();
    let mut last_upload: Option<f64> = None;
    // absorbs rounding in k * sample_period for fractional periods
    let slack = config.upload_period * 1e-9;
    let mut k: u64 = 0;
    loop {
        let offset = k as f64 * config.sample_period;
        if offset >= duration {
            break;
        }
        if clock == Clock::RealTime {
            tokio::time::sleep_until(wall_origin + std::time::Duration::from_secs_f64(offset)).await;
        }
        let (reading, truth) = sample_with_truth(scenario, offset, config, &mut rng)?;
        let at = reading.timestamp;
        let alert_event = alarm.observe(reading.corrected_ppm, at)?;
        // the CO2 frame is drawn after the alarm decision
        let display = render_display(&reading, &alarm.state);
        match alert_event.map(|e| e.kind) {
            Some(AlertKind::Raised) => summary.alerts_raised += 1,
            Some(AlertKind::Cleared) => summary.alerts_cleared += 1,
            None => {}
        }
        let alert_report = match &alert_event {
            Some(event) => Some(sink.report_alert(&config.write_key, event).await),
            None => None,
        };
        let upload_due = last_upload.is_none_or(|last| offset - last + slack >= config.upload_period);
        let upload = if upload_due {
            last_upload = Some(offset);
            let fields = upload_fields(&reading);
            let outcome = sink
                .upload(&Upload {
                    channel_id: config.channel_id,
                    write_key: config.write_key.clone(),
                    fields: fields.clone(),
                    created_at: at,
                })
                .await;
            summary.uploads_attempted += 1;
            if outcome.is_accepted() {
                summary.uploads_accepted += 1;
            }
            Some(UploadReport {
                fields: fields.into_iter().map(|(i, v)| (format!("field{i}"), v)).collect(),
                outcome,
            })
        } else {
            None
        };
        summary.ticks += 1;
        emit(DeviceTickReport {
            device,
            channel_id: config.channel_id,
            tick: k,
            at,
            truth,
            reading,
            display,
            alert_mode: alarm.state.mode,
            alert_event,
            alert_report,
            upload,
        });
        k += 1;
    }
    Ok(summary)
}

/// Convenience wrapper collecting one device's tick stream.
pub async fn collect_device<S: UploadSink + ?Sized>(
    scenario: &Scenario,
    config: &DeviceConfig,
    seed: u64,
    sink: &S,
    clock: Clock,
) -> Result<(Vec<DeviceTickReport>, RunSummary)> {
    let mut ticks = Vec::new();
    let summary = run_device(0, scenario, config, seed, sink, clock, |t| ticks.push(t)).await?;
    Ok((ticks, summary))
}

/// Runs every device as its own task; reports arrive on `tx` in completion
/// order. Device `i` draws noise from `seed + i`.
pub async fn run_fleet<S>(
    scenario: Arc<Scenario>,
    devices: Vec<DeviceConfig>,
    seed: u64,
    sink: Arc<S>,
    clock: Clock,
    tx: mpsc::UnboundedSender<DeviceTickReport>,
) -> Result<Vec<RunSummary>>
where
    S: UploadSink + 'static,
{
    let mut handles = Vec::with_capacity(devices.len());
    for (i, config) in devices.into_iter().enumerate() {
        let scenario = scenario.clone();
        let sink = sink.clone();
        let tx = tx.clone();
        handles.push(tokio::spawn(async move {
            run_device(i, &scenario, &config, seed.wrapping_add(i as u64), &*sink, clock, |t| {
                let _ = tx.send(t);
            })
            .await
        }));
    }
    drop(tx);
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        out.push(h.await.map_err(|e| SimError::Task(e.to_string()))??);
    }
    Ok(out)
}

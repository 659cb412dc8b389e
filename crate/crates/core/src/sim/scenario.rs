//! Ground-truth trajectories for the simulator.
//!
//! A scenario file is TOML:
//!
//! ```toml
//! schema = 1
//! name = "meeting room"
//! seed = 42
//! start = "2023-06-01T09:00:00Z"   # optional
//!
//! [noise]
//! adc_sigma = 2.0
//!
//! [[segments]]
//! duration = 600
//! co2 = [420, 900]        # linear ramp start -> end
//! temperature = 24        # a scalar holds constant
//! humidity = [45, 50]
//! ```

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Default origin for virtual time when a scenario names none.
pub fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap()
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("{}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// A value that moves linearly from `start` to `end` over a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RampRepr", into = "RampRepr")]
pub struct Ramp {
    pub start: f64,
    pub end: f64,
}

impl Ramp {
    pub fn constant(v: f64) -> Self {
        Self { start: v, end: v }
    }

    pub fn linear(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn at(&self, frac: f64) -> f64 {
        if self.start == self.end {
            self.start
        } else {
            self.start + (self.end - self.start) * frac
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RampRepr {
    Const(f64),
    Linear([f64; 2]),
}

impl From<RampRepr> for Ramp {
    fn from(r: RampRepr) -> Self {
        match r {
            RampRepr::Const(v) => Ramp::constant(v),
            RampRepr::Linear([a, b]) => Ramp::linear(a, b),
        }
    }
}

impl From<Ramp> for RampRepr {
    fn from(r: Ramp) -> Self {
        if r.start == r.end {
            RampRepr::Const(r.start)
        } else {
            RampRepr::Linear([r.start, r.end])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    /// Seconds.
    pub duration: f64,
    pub co2: Ramp,
    pub temperature: Ramp,
    pub humidity: Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Noise {
    /// Standard deviation of additive Gaussian noise on ADC counts.
    #[serde(default)]
    pub adc_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    #[serde(default = "default_start", with = "crate::timefmt::wire")]
    pub start: DateTime<Utc>,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default)]
    pub seed: u64,
}

/// Ground truth at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub co2: f64,
    pub temperature_c: f64,
    pub humidity_pct: f64,
}

impl Scenario {
    /// A single segment holding all three quantities constant.
    pub fn constant(name: &str, duration: f64, co2: f64, temperature_c: f64, humidity_pct: f64) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            name: name.into(),
            start: default_start(),
            segments: vec![Segment {
                duration,
                co2: Ramp::constant(co2),
                temperature: Ramp::constant(temperature_c),
                humidity: Ramp::constant(humidity_pct),
            }],
            noise: Noise::default(),
            seed: 0,
        }
    }

    pub fn from_toml_str(src: &str) -> Result<Self, ScenarioError> {
        #[derive(Deserialize)]
        struct Probe {
            schema: Option<u32>,
        }
        let probe: Probe = toml::from_str(src).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        match probe.schema {
            Some(SCHEMA_VERSION) => {}
            Some(found) => return Err(ScenarioError::Schema { found }),
            None => return Err(ScenarioError::Parse("missing required field `schema`".into())),
        }
        let scenario: Scenario = toml::from_str(src).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();
        if self.schema != SCHEMA_VERSION {
            return Err(ScenarioError::Schema { found: self.schema });
        }
        if self.segments.is_empty() {
            problems.push("segments: at least one segment required".to_string());
        }
        if !(self.noise.adc_sigma.is_finite() && self.noise.adc_sigma >= 0.0) {
            problems.push(format!("noise.adc_sigma: must be >= 0, got {}", self.noise.adc_sigma));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration.is_finite() && s.duration > 0.0) {
                problems.push(format!("segments[{i}].duration: must be > 0, got {}", s.duration));
            }
            for (what, v) in [("start", s.co2.start), ("end", s.co2.end)] {
                if !(v.is_finite() && v > 0.0) {
                    problems.push(format!("segments[{i}].co2 {what}: must be > 0 ppm, got {v}"));
                }
            }
            for (what, v) in [("start", s.humidity.start), ("end", s.humidity.end)] {
                if !(0.0..=100.0).contains(&v) {
                    problems.push(format!("segments[{i}].humidity {what}: must lie in [0, 100], got {v}"));
                }
            }
            for (what, v) in [("start", s.temperature.start), ("end", s.temperature.end)] {
                if !v.is_finite() {
                    problems.push(format!("segments[{i}].temperature {what}: must be finite"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(problems))
        }
    }

    /// Total length in seconds.
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Linear interpolation inside the segment containing `at` (seconds from
    /// start). Each segment covers `[begin, end)`; the final instant belongs
    /// to the last segment.
    pub fn truth_at(&self, at: f64) -> Option<Truth> {
        if at.is_nan() || at < 0.0 {
            return None;
        }
        let mut begin = 0.0;
        let last = self.segments.len().checked_sub(1)?;
        for (i, s) in self.segments.iter().enumerate() {
            let end = begin + s.duration;
            if at < end || (i == last && at <= end) {
                let frac = ((at - begin) / s.duration).clamp(0.0, 1.0);
                return Some(Truth {
                    co2: s.co2.at(frac),
                    temperature_c: s.temperature.at(frac),
                    humidity_pct: s.humidity.at(frac),
                });
            }
            begin = end;
        }
        None
    }

    pub fn instant(&self, at: f64) -> DateTime<Utc> {
        self.start + Duration::nanoseconds((at * 1e9).round() as i64)
    }
}

//! MQ135 gas sensor transfer model and DHT11 quantization.
//!
//! The MQ135 is read through a voltage divider: the sensor resistance `Rs`
//! sits on the supply side and a load resistor feeds the ADC pin. The
//! concentration follows a power law in `Rs / R0`, where `R0` is the sensor
//! resistance at the atmospheric CO2 baseline. Temperature and humidity
//! shift `Rs`; the correction polynomial divides that shift out before the
//! power law is applied.
//!
//! Every function here is pure. All model constants live in [`SensorParams`].

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reference humidity (%RH) at which the humidity correction term vanishes.
pub const NEUTRAL_HUMIDITY: f64 = 33.0;

/// Temperature domain (°C) over which the correction polynomial is trusted.
pub const CORRECTION_TEMP_RANGE: (f64, f64) = (-20.0, 60.0);

/// DHT11 measurement range, temperature in °C.
pub const DHT11_TEMP_RANGE: (i32, i32) = (0, 50);
/// DHT11 measurement range, relative humidity in %.
pub const DHT11_HUMIDITY_RANGE: (u8, u8) = (20, 90);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("ADC reads 0: sensor line open or saturated low")]
    SensorSaturatedLow,
    #[error("ADC count {adc} exceeds full scale {adc_max}")]
    OutOfRange { adc: u32, adc_max: u32 },
    #[error("sensor resistance is zero: concentration saturates high")]
    SaturatedHigh,
    #[error("invalid sensor resistance {0} ohm")]
    InvalidResistance(f64),
    #[error("invalid calibration resistance R0 = {0} ohm")]
    InvalidCalibration(f64),
    #[error("correction model invalid at t={temperature_c} °C, h={humidity_pct} %RH (factor {factor})")]
    CorrectionDomainError {
        temperature_c: f64,
        humidity_pct: f64,
        factor: f64,
    },
    #[error("calibration window has no usable samples ({skipped} skipped)")]
    EmptyWindow { skipped: usize },
    #[error("invalid sensor parameter: {0}")]
    InvalidParams(String),
}

pub type Result<T, E = SensorError> = std::result::Result<T, E>;

/// Constants of the MQ135 model. Every field is overridable at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSensorParams", into = "RawSensorParams")]
pub struct SensorParams {
    /// Power-law scale ("PARA"): ppm at `Rs == R0`.
    pub ppm_scale: f64,
    /// Power-law exponent magnitude ("PARB").
    pub ppm_exponent: f64,
    pub cor_a: f64,
    pub cor_b: f64,
    pub cor_c: f64,
    pub cor_d: f64,
    /// Load resistor in ohms.
    pub r_load: f64,
    /// Full-scale ADC code.
    pub adc_max: u32,
    /// Atmospheric CO2 baseline in ppm used to define `R0`.
    pub atmospheric_co2: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            ppm_scale: 116.6020682,
            ppm_exponent: 2.769034857,
            cor_a: 0.00035,
            cor_b: 0.02718,
            cor_c: 1.39538,
            cor_d: 0.0018,
            r_load: 10_000.0,
            adc_max: 1023,
            atmospheric_co2: 397.13,
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ppm_scale", self.ppm_scale),
            ("ppm_exponent", self.ppm_exponent),
            ("r_load", self.r_load),
            ("atmospheric_co2", self.atmospheric_co2),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SensorError::InvalidParams(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("cor_a", self.cor_a),
            ("cor_b", self.cor_b),
            ("cor_c", self.cor_c),
            ("cor_d", self.cor_d),
        ] {
            if !v.is_finite() {
                return Err(SensorError::InvalidParams(format!("{name} must be finite")));
            }
        }
        if self.adc_max < 2 {
            return Err(SensorError::InvalidParams(format!(
                "adc_max must be >= 2, got {}",
                self.adc_max
            )));
        }
        Ok(())
    }

    /// `Rs / R0` ratio at which the power law yields the atmospheric baseline.
    pub fn baseline_ratio(&self) -> f64 {
        (self.atmospheric_co2 / self.ppm_scale).powf(-1.0 / self.ppm_exponent)
    }
}

/// Serde shadow of [`SensorParams`]; missing keys fall back to the defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSensorParams {
    ppm_scale: f64,
    ppm_exponent: f64,
    cor_a: f64,
    cor_b: f64,
    cor_c: f64,
    cor_d: f64,
    r_load: f64,
    adc_max: u32,
    atmospheric_co2: f64,
}

impl Default for RawSensorParams {
    fn default() -> Self {
        SensorParams::default().into()
    }
}

impl From<SensorParams> for RawSensorParams {
    fn from(p: SensorParams) -> Self {
        Self {
            ppm_scale: p.ppm_scale,
            ppm_exponent: p.ppm_exponent,
            cor_a: p.cor_a,
            cor_b: p.cor_b,
            cor_c: p.cor_c,
            cor_d: p.cor_d,
            r_load: p.r_load,
            adc_max: p.adc_max,
            atmospheric_co2: p.atmospheric_co2,
        }
    }
}

impl TryFrom<RawSensorParams> for SensorParams {
    type Error = SensorError;

    fn try_from(r: RawSensorParams) -> Result<Self> {
        let p = SensorParams {
            ppm_scale: r.ppm_scale,
            ppm_exponent: r.ppm_exponent,
            cor_a: r.cor_a,
            cor_b: r.cor_b,
            cor_c: r.cor_c,
            cor_d: r.cor_d,
            r_load: r.r_load,
            adc_max: r.adc_max,
            atmospheric_co2: r.atmospheric_co2,
        };
        p.validate()?;
        Ok(p)
    }
}

/// One firmware sample: raw ADC count plus everything derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasReading {
    pub timestamp: DateTime<Utc>,
    pub adc: u32,
    /// Sensor resistance (ohm), uncorrected.
    pub rs: f64,
    /// Calibration resistance the firmware used (ohm).
    pub r_zero: f64,
    pub raw_ppm: f64,
    pub corrected_ppm: f64,
    pub temperature_c: f64,
    pub humidity_pct: u8,
}

impl GasReading {
    /// Runs the firmware pipeline on one ADC count.
    pub fn derive(
        timestamp: DateTime<Utc>,
        adc: u32,
        temperature_c: f64,
        humidity_pct: u8,
        r_zero: f64,
        params: &SensorParams,
    ) -> Result<Self> {
        let rs = resistance_from_adc(adc, params)?;
        let raw_ppm = ppm_from_resistance(rs, r_zero, params)?;
        let corrected = corrected_ppm(adc, temperature_c, humidity_pct as f64, r_zero, params)?;
        Ok(Self {
            timestamp,
            adc,
            rs,
            r_zero,
            raw_ppm,
            corrected_ppm: corrected,
            temperature_c,
            humidity_pct,
        })
    }
}

/// Voltage-divider inversion: `rs = (adc_max / adc - 1) * r_load`.
pub fn resistance_from_adc(adc: u32, params: &SensorParams) -> Result<f64> {
    if adc == 0 {
        return Err(SensorError::SensorSaturatedLow);
    }
    if adc > params.adc_max {
        return Err(SensorError::OutOfRange {
            adc,
            adc_max: params.adc_max,
        });
    }
    // integer difference first: no cancellation near full scale
    Ok(f64::from(params.adc_max - adc) / f64::from(adc) * params.r_load)
}

/// Temperature/humidity divisor applied to `Rs` before the power law.
pub fn correction_factor(temperature_c: f64, humidity_pct: f64, params: &SensorParams) -> Result<f64> {
    let domain_err = |factor| SensorError::CorrectionDomainError {
        temperature_c,
        humidity_pct,
        factor,
    };
    let (t_lo, t_hi) = CORRECTION_TEMP_RANGE;
    if !(t_lo..=t_hi).contains(&temperature_c) || !(0.0..=100.0).contains(&humidity_pct) {
        return Err(domain_err(f64::NAN));
    }
    let t = temperature_c;
    let f = params.cor_a * t * t - params.cor_b * t + params.cor_c - (humidity_pct - NEUTRAL_HUMIDITY) * params.cor_d;
    if f.is_finite() && f > 0.0 {
        Ok(f)
    } else {
        Err(domain_err(f))
    }
}

/// Power law `ppm = ppm_scale * (rs / r_zero)^(-ppm_exponent)`.
pub fn ppm_from_resistance(rs: f64, r_zero: f64, params: &SensorParams) -> Result<f64> {
    if !(r_zero.is_finite() && r_zero > 0.0) {
        return Err(SensorError::InvalidCalibration(r_zero));
    }
    if rs == 0.0 {
        return Err(SensorError::SaturatedHigh);
    }
    if !(rs.is_finite() && rs > 0.0) {
        return Err(SensorError::InvalidResistance(rs));
    }
    let ppm = params.ppm_scale * (rs / r_zero).powf(-params.ppm_exponent);
    if ppm.is_finite() {
        Ok(ppm)
    } else {
        Err(SensorError::SaturatedHigh)
    }
}

/// `Rs / f(t, h)`: the resistance the sensor would show at the reference conditions.
pub fn corrected_resistance(adc: u32, temperature_c: f64, humidity_pct: f64, params: &SensorParams) -> Result<f64> {
    let rs = resistance_from_adc(adc, params)?;
    let f = correction_factor(temperature_c, humidity_pct, params)?;
    Ok(rs / f)
}

/// Temperature/humidity-corrected CO2 concentration for one ADC count.
pub fn corrected_ppm(
    adc: u32,
    temperature_c: f64,
    humidity_pct: f64,
    r_zero: f64,
    params: &SensorParams,
) -> Result<f64> {
    let rs = corrected_resistance(adc, temperature_c, humidity_pct, params)?;
    ppm_from_resistance(rs, r_zero, params)
}

/// The `R0` that makes this reading report exactly the atmospheric baseline.
pub fn r_zero_from_reading(adc: u32, temperature_c: f64, humidity_pct: f64, params: &SensorParams) -> Result<f64> {
    let rs = corrected_resistance(adc, temperature_c, humidity_pct, params)?;
    if rs == 0.0 {
        return Err(SensorError::SaturatedHigh);
    }
    let r0 = rs / params.baseline_ratio();
    if r0.is_finite() && r0 > 0.0 {
        Ok(r0)
    } else {
        Err(SensorError::InvalidCalibration(r0))
    }
}

/// One fresh-air sample fed to [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub at: DateTime<Utc>,
    pub adc: u32,
    pub temperature_c: f64,
    pub humidity_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEstimate {
    /// Median of the per-sample `R0` estimates (ohm).
    pub r_zero: f64,
    /// Number of samples in the input window.
    pub sample_count: usize,
    /// Samples whose `R0` estimate failed and were left out of the median.
    pub skipped: usize,
    pub window: TimeWindow,
    /// Interquartile range of the per-sample estimates (ohm).
    pub dispersion: f64,
}

/// Fresh-air calibration: median `R0` over a window of readings taken while
/// ambient CO2 sits at `params.atmospheric_co2`.
pub fn calibrate(samples: &[CalibrationSample], params: &SensorParams) -> Result<CalibrationEstimate> {
    let first = samples.first().ok_or(SensorError::EmptyWindow { skipped: 0 })?;
    let mut window = TimeWindow {
        start: first.at,
        end: first.at,
    };
    let mut estimates = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        window.start = window.start.min(s.at);
        window.end = window.end.max(s.at);
        match r_zero_from_reading(s.adc, s.temperature_c, s.humidity_pct, params) {
            Ok(r0) => estimates.push(r0),
            Err(_) => skipped += 1,
        }
    }
    if estimates.is_empty() {
        return Err(SensorError::EmptyWindow { skipped });
    }
    estimates.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&estimates, 0.25);
    let q3 = quantile_sorted(&estimates, 0.75);
    Ok(CalibrationEstimate {
        r_zero: quantile_sorted(&estimates, 0.5),
        sample_count: samples.len(),
        skipped,
        window,
        dispersion: q3 - q1,
    })
}

/// Linear-interpolation quantile of sorted, non-empty data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

/// Reduces a real temperature/humidity pair to what a DHT11 reports:
/// whole °C in [0, 50] and whole %RH in [20, 90], rounding half away from zero.
pub fn quantize_dht11(temperature_c: f64, humidity_pct: f64) -> (f64, u8) {
    let (t_lo, t_hi) = DHT11_TEMP_RANGE;
    let (h_lo, h_hi) = DHT11_HUMIDITY_RANGE;
    let t = if temperature_c.is_nan() {
        t_lo as f64
    } else {
        temperature_c.round().clamp(t_lo as f64, t_hi as f64)
    };
    let h = if humidity_pct.is_nan() {
        h_lo
    } else {
        humidity_pct.round().clamp(h_lo as f64, h_hi as f64) as u8
    };
    (t, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn p() -> SensorParams {
        SensorParams::default()
    }

    fn at(s: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + s, 0).unwrap()
    }

    #[test]
    fn resistance_examples() {
        assert_eq!(resistance_from_adc(512, &p()).unwrap(), 9980.46875);
        assert_eq!(resistance_from_adc(1023, &p()).unwrap(), 0.0);
        assert_eq!(resistance_from_adc(0, &p()), Err(SensorError::SensorSaturatedLow));
        assert!(matches!(
            resistance_from_adc(1024, &p()),
            Err(SensorError::OutOfRange {
                adc: 1024,
                adc_max: 1023
            })
        ));
    }

    #[test]
    fn resistance_strictly_decreasing() {
        let params = p();
        let mut prev = f64::INFINITY;
        for adc in 1..=params.adc_max {
            let rs = resistance_from_adc(adc, &params).unwrap();
            assert!(rs < prev, "adc {adc}");
            prev = rs;
        }
    }

    #[test]
    fn correction_examples() {
        assert_eq!(correction_factor(0.0, 33.0, &p()).unwrap(), 1.39538);
        assert!((correction_factor(20.0, 33.0, &p()).unwrap() - 0.99178).abs() < 1e-12);
        assert!((correction_factor(20.0, 65.0, &p()).unwrap() - 0.93418).abs() < 1e-12);
    }

    #[test]
    fn correction_rejects_nonpositive_factor() {
        let params = SensorParams { cor_c: -1.0, ..p() };
        assert!(matches!(
            correction_factor(20.0, 33.0, &params),
            Err(SensorError::CorrectionDomainError { .. })
        ));
        assert!(correction_factor(61.0, 33.0, &p()).is_err());
        assert!(correction_factor(20.0, 100.5, &p()).is_err());
        assert!(correction_factor(f64::NAN, 33.0, &p()).is_err());
    }

    #[test]
    fn correction_positive_on_grid() {
        // brute-force minimum over t in [-10, 50] step 0.5, h in [0, 100] step 1
        let params = p();
        let mut min = f64::INFINITY;
        for ti in -20..=100 {
            for h in 0..=100 {
                let f = correction_factor(ti as f64 * 0.5, h as f64, &params).unwrap();
                min = min.min(f);
            }
        }
        assert!((min - 0.74711).abs() < 1e-9, "grid minimum {min}");
        assert!(min > 0.7);
    }

    #[test]
    fn humidity_neutral_axis() {
        let params = p();
        let zero_h = SensorParams { cor_d: 0.0, ..params };
        for ti in -20..=60 {
            let t = ti as f64;
            assert_eq!(
                correction_factor(t, NEUTRAL_HUMIDITY, &params).unwrap(),
                correction_factor(t, NEUTRAL_HUMIDITY, &zero_h).unwrap()
            );
        }
    }

    #[test]
    fn ppm_examples() {
        let params = p();
        assert_eq!(ppm_from_resistance(15_000.0, 15_000.0, &params).unwrap(), 116.6020682);
        let two = ppm_from_resistance(20_000.0, 10_000.0, &params).unwrap();
        assert!((two - 17.105812316786826).abs() < 1e-9, "{two}");
        let rs = 12_345.0 * params.baseline_ratio();
        let atm = ppm_from_resistance(rs, 12_345.0, &params).unwrap();
        assert!((atm - 397.13).abs() / 397.13 < 1e-12);
    }

    #[test]
    fn ppm_errors() {
        assert_eq!(ppm_from_resistance(0.0, 1.0, &p()), Err(SensorError::SaturatedHigh));
        assert_eq!(
            ppm_from_resistance(1.0, 0.0, &p()),
            Err(SensorError::InvalidCalibration(0.0))
        );
        assert!(ppm_from_resistance(1.0, -3.0, &p()).is_err());
        assert!(matches!(
            ppm_from_resistance(-1.0, 1.0, &p()),
            Err(SensorError::InvalidResistance(_))
        ));
    }

    #[test]
    fn corrected_ppm_composition() {
        let params = p();
        // at (t=0, h=33) the factor is cor_c; dividing it out by hand must agree
        for adc in [1, 100, 512, 900, 1022] {
            let manual =
                ppm_from_resistance(resistance_from_adc(adc, &params).unwrap() / 1.39538, 15_568.0, &params).unwrap();
            assert_eq!(corrected_ppm(adc, 0.0, 33.0, 15_568.0, &params).unwrap(), manual);
        }
        let composed = corrected_ppm(512, 20.0, 33.0, 15_568.0, &params).unwrap();
        assert!((composed - 390.32888289790806).abs() < 1e-9, "{composed}");
        assert_eq!(
            corrected_ppm(1023, 20.0, 33.0, 15_568.0, &params),
            Err(SensorError::SaturatedHigh)
        );
    }

    #[test]
    fn r_zero_examples() {
        let params = p();
        // rs_corrected = 10000 ohm at neutral conditions: adc that yields it is not
        // integral, so go through the ratio directly.
        let r0 = 10_000.0 / params.baseline_ratio();
        assert!((r0 - 15_567.055713361722).abs() < 1e-6, "{r0}");

        let r0 = r_zero_from_reading(512, 20.0, 33.0, &params).unwrap();
        let back = corrected_ppm(512, 20.0, 33.0, r0, &params).unwrap();
        assert!((back - 397.13).abs() / 397.13 <= 1e-9);

        assert!(r_zero_from_reading(1023, 20.0, 33.0, &params).is_err());
        assert_eq!(
            r_zero_from_reading(0, 20.0, 33.0, &params),
            Err(SensorError::SensorSaturatedLow)
        );
    }

    fn sample(s: i64, adc: u32) -> CalibrationSample {
        CalibrationSample {
            at: at(s),
            adc,
            temperature_c: 20.0,
            humidity_pct: 33.0,
        }
    }

    #[test]
    fn calibrate_constant_window() {
        let params = p();
        let samples: Vec<_> = (0..100).map(|i| sample(i, 600)).collect();
        let est = calibrate(&samples, &params).unwrap();
        assert_eq!(est.r_zero, r_zero_from_reading(600, 20.0, 33.0, &params).unwrap());
        assert_eq!(est.dispersion, 0.0);
        assert_eq!(est.sample_count, 100);
        assert_eq!(est.window.start, at(0));
        assert_eq!(est.window.end, at(99));
    }

    #[test]
    fn calibrate_median_of_three() {
        // adc_max = 4080 with unit baseline ratio and unit correction makes the
        // per-sample estimates exactly 14k, 15k and 16k ohm.
        let params = SensorParams {
            atmospheric_co2: 116.6020682,
            cor_a: 0.0,
            cor_b: 0.0,
            cor_c: 1.0,
            r_load: 1_000.0,
            adc_max: 4080,
            ..p()
        };
        let mk = |s, adc| CalibrationSample {
            at: at(s),
            adc,
            temperature_c: 0.0,
            humidity_pct: 33.0,
        };
        let samples = vec![mk(0, 272), mk(1, 240), mk(2, 255)];
        let per_sample: Vec<f64> = samples
            .iter()
            .map(|s| r_zero_from_reading(s.adc, s.temperature_c, s.humidity_pct, &params).unwrap())
            .collect();
        assert_eq!(per_sample, vec![14_000.0, 16_000.0, 15_000.0]);
        let est = calibrate(&samples, &params).unwrap();
        assert_eq!(est.r_zero, 15_000.0);
        assert_eq!(est.dispersion, 1_000.0);
        assert_eq!(est.sample_count, 3);
    }

    #[test]
    fn calibrate_skips_bad_samples() {
        let params = p();
        let samples = vec![sample(0, 0), sample(1, 600), sample(2, 1023)];
        let est = calibrate(&samples, &params).unwrap();
        assert_eq!(est.skipped, 2);
        assert_eq!(est.sample_count, 3);

        assert_eq!(calibrate(&[], &params), Err(SensorError::EmptyWindow { skipped: 0 }));
        assert_eq!(
            calibrate(&[sample(0, 0), sample(1, 1023)], &params),
            Err(SensorError::EmptyWindow { skipped: 2 })
        );
    }

    #[test]
    fn quantile_even_length_interpolates() {
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
    }

    #[test]
    fn dht11_examples() {
        assert_eq!(quantize_dht11(25.0, 60.0), (25.0, 60));
        assert_eq!(quantize_dht11(25.6, 60.4), (26.0, 60));
        assert_eq!(quantize_dht11(-3.0, 95.0), (0.0, 90));
        assert_eq!(quantize_dht11(24.5, 60.5), (25.0, 61));
        assert_eq!(quantize_dht11(f64::NAN, f64::NAN), (0.0, 20));
    }

    #[test]
    fn params_serde_defaults_and_validation() {
        let parsed: SensorParams = serde_json::from_str(r#"{"r_load": 20000.0}"#).unwrap();
        assert_eq!(
            parsed,
            SensorParams {
                r_load: 20_000.0,
                ..p()
            }
        );
        assert!(serde_json::from_str::<SensorParams>(r#"{"adc_max": 1}"#).is_err());
        assert!(serde_json::from_str::<SensorParams>(r#"{"ppm_scale": -1.0}"#).is_err());
        assert!(serde_json::from_str::<SensorParams>(r#"{"bogus": 1.0}"#).is_err());
    }

    #[test]
    fn reading_derivation_is_reproducible() {
        let params = p();
        let r = GasReading::derive(at(0), 700, 24.0, 55, 15_000.0, &params).unwrap();
        assert_eq!(
            r.corrected_ppm,
            corrected_ppm(r.adc, r.temperature_c, r.humidity_pct as f64, r.r_zero, &params).unwrap()
        );
        assert!(r.rs >= 0.0 && r.corrected_ppm > 0.0);
    }
}

//! High-CO2 alarm: a two-state machine driving the buzzer line and the
//! "air OK" LED line, plus the 16x2 LCD frames the firmware shows each loop.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensor::GasReading;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlertError {
    #[error("invalid ppm sample {0}")]
    InvalidSample(f64),
    #[error("sample at {at} precedes last transition at {since}")]
    TimeReversed { at: DateTime<Utc>, since: DateTime<Utc> },
    #[error("invalid alert config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlertConfig {
    pub threshold: f64,
    /// Clear only once ppm falls to `threshold - hysteresis`.
    pub hysteresis: f64,
    /// Trigger on `ppm > threshold` when true, `ppm >= threshold` otherwise.
    pub strict: bool,
}

impl Default for AlertConfig {
    fn default() -> Self {
        Self {
            threshold: 500.0,
            hysteresis: 0.0,
            strict: true,
        }
    }
}

impl AlertConfig {
    pub fn validate(&self) -> Result<(), AlertError> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(AlertError::InvalidConfig(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if !(self.hysteresis.is_finite() && self.hysteresis >= 0.0) {
            return Err(AlertError::InvalidConfig(format!(
                "hysteresis must be >= 0, got {}",
                self.hysteresis
            )));
        }
        Ok(())
    }

    fn raises(&self, ppm: f64) -> bool {
        if self.strict {
            ppm > self.threshold
        } else {
            ppm >= self.threshold
        }
    }

    fn clears(&self, ppm: f64) -> bool {
        let floor = self.threshold - self.hysteresis;
        if self.strict {
            ppm <= floor
        } else {
            ppm < floor
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertMode {
    Normal,
    Alert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertState {
    pub mode: AlertMode,
    /// Buzzer and red LED, wired to the same pin.
    pub buzzer_line: Level,
    /// Green LED.
    pub ok_line: Level,
    pub since: DateTime<Utc>,
}

impl AlertState {
    /// Power-on state: green LED lit, buzzer silent.
    pub fn new(since: DateTime<Utc>) -> Self {
        Self::with_mode(AlertMode::Normal, since)
    }

    fn with_mode(mode: AlertMode, since: DateTime<Utc>) -> Self {
        let (buzzer_line, ok_line) = lines_for(mode);
        Self {
            mode,
            buzzer_line,
            ok_line,
            since,
        }
    }
}

/// Output line levels as a function of mode alone.
pub fn lines_for(mode: AlertMode) -> (Level, Level) {
    match mode {
        AlertMode::Alert => (Level::High, Level::Low),
        AlertMode::Normal => (Level::Low, Level::High),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    Raised,
    Cleared,
}

/// A mode change produced by [`step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub kind: AlertKind,
    pub ppm: f64,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub kind: AlertKind,
    pub ppm: f64,
    pub at: DateTime<Utc>,
    pub channel_id: u64,
}

impl AlertEvent {
    pub fn new(transition: Transition, channel_id: u64) -> Self {
        Self {
            kind: transition.kind,
            ppm: transition.ppm,
            at: transition.at,
            channel_id,
        }
    }
}

/// Advances the alarm by one sample. The input state is left untouched on error.
pub fn step(
    state: &AlertState,
    ppm: f64,
    at: DateTime<Utc>,
    config: &AlertConfig,
) -> Result<(AlertState, Option<Transition>), AlertError> {
    if !(ppm.is_finite() && ppm > 0.0) {
        return Err(AlertError::InvalidSample(ppm));
    }
    if at < state.since {
        return Err(AlertError::TimeReversed { at, since: state.since });
    }
    let next = match state.mode {
        AlertMode::Normal if config.raises(ppm) => Some((AlertMode::Alert, AlertKind::Raised)),
        AlertMode::Alert if config.clears(ppm) => Some((AlertMode::Normal, AlertKind::Cleared)),
        _ => None,
    };
    Ok(match next {
        Some((mode, kind)) => (AlertState::with_mode(mode, at), Some(Transition { kind, ppm, at })),
        None => (*state, None),
    })
}

/// Alarm bound to one device channel.
#[derive(Debug, Clone)]
pub struct AlertMonitor {
    pub channel_id: u64,
    pub config: AlertConfig,
    pub state: AlertState,
}

impl AlertMonitor {
    pub fn new(channel_id: u64, config: AlertConfig, start: DateTime<Utc>) -> Self {
        Self {
            channel_id,
            config,
            state: AlertState::new(start),
        }
    }

    pub fn observe(&mut self, ppm: f64, at: DateTime<Utc>) -> Result<Option<AlertEvent>, AlertError> {
        let (next, transition) = step(&self.state, ppm, at, &self.config)?;
        self.state = next;
        Ok(transition.map(|t| AlertEvent::new(t, self.channel_id)))
    }
}

pub const LCD_COLS: usize = 16;
pub const LCD_ROWS: usize = 2;

/// Character LCD with cursor semantics: prints past the last column are dropped.
#[derive(Debug, Clone)]
struct Lcd {
    cells: [[char; LCD_COLS]; LCD_ROWS],
    col: usize,
    row: usize,
}

impl Lcd {
    fn new() -> Self {
        Self {
            cells: [[' '; LCD_COLS]; LCD_ROWS],
            col: 0,
            row: 0,
        }
    }

    fn set_cursor(&mut self, col: usize, row: usize) {
        self.col = col;
        self.row = row.min(LCD_ROWS - 1);
    }

    fn print(&mut self, s: &str) {
        for c in s.chars() {
            if self.col < LCD_COLS {
                self.cells[self.row][self.col] = c;
            }
            self.col += 1;
        }
    }

    fn frame(&self) -> DisplayFrame {
        let line = |r: usize| self.cells[r].iter().collect::<String>().trim_end().to_string();
        DisplayFrame {
            line1: line(0),
            line2: line(1),
        }
    }
}

/// One 16x2 screen, trailing blanks trimmed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayFrame {
    pub line1: String,
    pub line2: String,
}

/// Fixed-point rendering with two decimals, rounding half away from zero.
pub fn format_fixed2(value: f64) -> String {
    if !value.is_finite() {
        return if value.is_nan() {
            "nan".into()
        } else if value > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let scaled = (value * 100.0).round();
    let sign = if scaled < 0.0 { "-" } else { "" };
    let abs = scaled.abs() as u64;
    format!("{sign}{}.{:02}", abs / 100, abs % 100)
}

/// The two screens the firmware cycles through each loop: climate, then CO2.
pub fn render_display(reading: &GasReading, state: &AlertState) -> [DisplayFrame; 2] {
    let mut lcd = Lcd::new();
    lcd.set_cursor(0, 0);
    lcd.print("Temp=");
    lcd.print(&format_fixed2(reading.temperature_c));
    lcd.set_cursor(10, 0);
    lcd.print("C");
    lcd.set_cursor(0, 1);
    lcd.print("Humidity=");
    lcd.print(&reading.humidity_pct.to_string());
    lcd.set_cursor(12, 1);
    lcd.print("%");
    let climate = lcd.frame();

    let mut lcd = Lcd::new();
    lcd.set_cursor(0, 0);
    lcd.print("CO2 PPM-");
    lcd.print(&format_fixed2(reading.corrected_ppm));
    if state.mode == AlertMode::Alert {
        lcd.set_cursor(0, 1);
        lcd.print("HIGH PPM ALERT");
    }
    [climate, lcd.frame()]
}

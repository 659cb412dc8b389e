//! ThingSpeak-compatible channel service: write-key auth, per-key rate
//! limiting, field writes and JSON feed reads, plus a log of the alarm
//! transitions each device reports.
//!
//! The HTTP binding lives in [`http`]; everything here is callable directly
//! with an explicit `now`, which is how the tests drive timelines.

pub mod http;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::alerting::{AlertEvent, AlertKind};
use crate::storage::{Channel, ChannelEntry, Fields, NewChannel, StorageError, Store, FIELD_COUNT};
use crate::timefmt;

pub const MAX_FIELD_LEN: usize = 255;
pub const DEFAULT_RESULTS: usize = 100;
pub const MAX_RESULTS: usize = 8000;
pub const WRITE_KEY_LEN: usize = 16;
pub const DEFAULT_RATE_WINDOW_SECS: i64 = 15;
/// Key-generator seed used in test mode when none is given.
pub const TEST_KEY_SEED: u64 = 2_097_285;

const KEY_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unknown or missing api key")]
    Unauthorized,
    #[error("rate limited")]
    RateLimited,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("channel {0} not found")]
    NotFound(u64),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error(transparent)]
    Storage(StorageError),
}

impl From<StorageError> for IngestError {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::NotFound(id) => Self::NotFound(id),
            StorageError::BadRequest(m) => Self::BadRequest(m),
            StorageError::Conflict(m) => Self::Conflict(m),
            other => Self::Storage(other),
        }
    }
}

impl IngestError {
    pub fn status(&self) -> u16 {
        match self {
            Self::Unauthorized => 401,
            Self::RateLimited => 429,
            Self::BadRequest(_) => 400,
            Self::NotFound(_) => 404,
            Self::Conflict(_) => 409,
            Self::Storage(_) => 500,
        }
    }
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct IngestConfig {
    /// Minimum spacing between accepted writes per key; zero disables limiting.
    pub rate_window: Duration,
    /// Honors client-supplied `created_at` and seeds key generation deterministically.
    pub test_mode: bool,
    pub key_seed: Option<u64>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            rate_window: Duration::seconds(DEFAULT_RATE_WINDOW_SECS),
            test_mode: false,
            key_seed: None,
        }
    }
}

/// A parsed `/update` call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateRequest {
    pub api_key: String,
    /// `fieldN` values exactly as received, index 1..=8.
    pub fields: Vec<(usize, String)>,
    pub created_at: Option<DateTime<Utc>>,
}

impl UpdateRequest {
    /// Builds a request from query/form pairs. Unknown parameters are ignored,
    /// as the public service does.
    pub fn from_params<I, K, V>(params: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: Into<String>,
    {
        let mut req = UpdateRequest::default();
        for (k, v) in params {
            let k = k.as_ref();
            let v = v.into();
            match k {
                "api_key" | "key" => req.api_key = v,
                "created_at" => {
                    req.created_at = Some(
                        timefmt::parse_instant(&v)
                            .ok_or_else(|| IngestError::BadRequest(format!("bad created_at {v:?}")))?,
                    )
                }
                _ => {
                    if let Some(idx) = k.strip_prefix("field").and_then(|n| n.parse::<usize>().ok()) {
                        if !(1..=FIELD_COUNT).contains(&idx) {
                            return Err(IngestError::BadRequest(format!("no such field {k}")));
                        }
                        req.fields.retain(|(i, _)| *i != idx);
                        req.fields.push((idx, v));
                    }
                }
            }
        }
        Ok(req)
    }

    fn validated_fields(&self) -> Result<Fields> {
        let mut out: Fields = Default::default();
        for (idx, raw) in &self.fields {
            if raw.is_empty() {
                continue;
            }
            if raw.len() > MAX_FIELD_LEN {
                return Err(IngestError::BadRequest(format!(
                    "field{idx} longer than {MAX_FIELD_LEN}"
                )));
            }
            if !is_finite_decimal(raw) {
                return Err(IngestError::BadRequest(format!("field{idx} is not a finite decimal")));
            }
            out[idx - 1] = Some(raw.clone());
        }
        if out.iter().all(Option::is_none) {
            return Err(IngestError::BadRequest("no fields".into()));
        }
        Ok(out)
    }
}

/// Plain decimal text: optional sign, digits with optional fraction, optional exponent.
pub fn is_finite_decimal(s: &str) -> bool {
    let allowed = |c: char| c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E');
    s.chars().any(|c| c.is_ascii_digit()) && s.chars().all(allowed) && s.parse::<f64>().is_ok_and(f64::is_finite)
}

/// One accepted write per key per window.
#[derive(Debug)]
pub struct RateLimiter {
    window: Duration,
    last_accepted: Mutex<HashMap<String, DateTime<Utc>>>,
}

impl RateLimiter {
    pub fn new(window: Duration) -> Self {
        Self {
            window,
            last_accepted: Mutex::new(HashMap::new()),
        }
    }

    pub fn window(&self) -> Duration {
        self.window
    }

    /// Records an acceptance at `now` if the key is outside its window.
    /// `None` means rate limited.
    pub fn try_acquire(&self, key: &str, now: DateTime<Utc>) -> Option<Permit> {
        let mut map = self.last_accepted.lock().unwrap_or_else(|p| p.into_inner());
        let previous = map.get(key).copied();
        let allowed = self.window.is_zero() || previous.is_none_or(|last| now - last >= self.window);
        if !allowed {
            return None;
        }
        map.insert(key.to_string(), now);
        Some(Permit { previous })
    }

    /// Undoes an acceptance whose write failed.
    pub fn restore(&self, key: &str, permit: Permit) {
        let mut map = self.last_accepted.lock().unwrap_or_else(|p| p.into_inner());
        match permit.previous {
            Some(t) => map.insert(key.to_string(), t),
            None => map.remove(key),
        };
    }
}

/// Proof of an accepted slot; carries the previous acceptance time.
#[derive(Debug, Clone, Copy)]
pub struct Permit {
    previous: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Default)]
pub struct FeedQuery {
    pub results: Option<usize>,
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
    pub api_key: Option<String>,
}

/// Channel metadata as shown in feed documents.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInfo(pub Channel);

impl Serialize for ChannelInfo {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let c = &self.0;
        let mut m = s.serialize_map(None)?;
        m.serialize_entry("id", &c.channel_id)?;
        m.serialize_entry("name", &c.name)?;
        for (i, label) in c.field_labels.iter().enumerate() {
            if let Some(label) = label {
                m.serialize_entry(&format!("field{}", i + 1), label)?;
            }
        }
        m.serialize_entry("created_at", &timefmt::format_seconds(&c.created_at))?;
        m.serialize_entry("last_entry_id", &c.last_entry_id)?;
        m.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedDocument {
    pub channel: ChannelInfo,
    pub feeds: Vec<ChannelEntry>,
}

impl FeedDocument {
    /// The single-field variant: each feed item keeps only `fieldN`.
    pub fn single_field(&self, index: usize) -> Value {
        let key = format!("field{index}");
        let feeds = self
            .feeds
            .iter()
            .map(|e| {
                let mut m = Map::new();
                m.insert("created_at".into(), timefmt::format_seconds(&e.created_at).into());
                m.insert("entry_id".into(), e.entry_id.into());
                m.insert(key.clone(), e.field(index).map_or(Value::Null, |v| v.into()));
                Value::Object(m)
            })
            .collect();
        serde_json::json!({ "channel": self.channel, "feeds": Value::Array(feeds) })
    }
}

/// A device's report of one alarm transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlertReport {
    pub kind: AlertKind,
    pub ppm: f64,
    /// Transition time; honored only in test mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlertsDocument {
    pub channel: ChannelInfo,
    pub alerts: Vec<AlertEvent>,
}

pub struct Service {
    store: Arc<Store>,
    limiter: RateLimiter,
    config: IngestConfig,
    keygen: Mutex<ChaCha8Rng>,
}

impl Service {
    pub fn new(store: Arc<Store>, config: IngestConfig) -> Self {
        let rng = match (config.key_seed, config.test_mode) {
            (Some(seed), _) => ChaCha8Rng::seed_from_u64(seed),
            (None, true) => ChaCha8Rng::seed_from_u64(TEST_KEY_SEED),
            (None, false) => ChaCha8Rng::from_os_rng(),
        };
        Self {
            store,
            limiter: RateLimiter::new(config.rate_window),
            config,
            keygen: Mutex::new(rng),
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn config(&self) -> &IngestConfig {
        &self.config
    }

    fn next_key(&self) -> String {
        let mut rng = self.keygen.lock().unwrap_or_else(|p| p.into_inner());
        generate_key(&mut *rng)
    }

    pub fn create_channel(
        &self,
        name: &str,
        field_labels: [Option<String>; FIELD_COUNT],
        private: bool,
        now: DateTime<Utc>,
    ) -> Result<Channel> {
        if name.trim().is_empty() {
            return Err(IngestError::BadRequest("channel name must not be empty".into()));
        }
        loop {
            let write_key = self.next_key();
            if self.store.channel_for_write_key(&write_key).is_some() {
                continue;
            }
            let read_key = private.then(|| self.next_key());
            match self.store.create_channel(NewChannel {
                name: name.to_string(),
                write_key,
                read_key,
                field_labels: field_labels.clone(),
                created_at: now,
            }) {
                Err(StorageError::DuplicateWriteKey) => continue,
                other => return Ok(other?),
            }
        }
    }

    /// Validates, rate-limits and stores one write; returns the new entry id.
    pub fn handle_update(&self, req: &UpdateRequest, now: DateTime<Utc>) -> Result<u64> {
        let channel_id = self
            .store
            .channel_for_write_key(&req.api_key)
            .ok_or(IngestError::Unauthorized)?;
        let fields = req.validated_fields()?;
        let at = match (self.config.test_mode, req.created_at) {
            (true, Some(t)) => t,
            _ => now,
        };
        let at = timefmt::truncate_seconds(at);
        let permit = self
            .limiter
            .try_acquire(&req.api_key, at)
            .ok_or(IngestError::RateLimited)?;
        match self.store.append(channel_id, fields, at) {
            Ok(entry) => Ok(entry.entry_id),
            Err(e) => {
                self.limiter.restore(&req.api_key, permit);
                Err(e.into())
            }
        }
    }

    /// Channel metadata, after checking the read key of a private channel.
    fn readable_channel(&self, channel_id: u64, api_key: Option<&str>) -> Result<Channel> {
        let channel = self.store.channel(channel_id)?;
        if let Some(read_key) = &channel.read_key {
            if api_key != Some(read_key.as_str()) && api_key != Some(channel.write_key.as_str()) {
                return Err(IngestError::Unauthorized);
            }
        }
        Ok(channel)
    }

    pub fn handle_feed(&self, channel_id: u64, q: &FeedQuery) -> Result<FeedDocument> {
        let channel = self.readable_channel(channel_id, q.api_key.as_deref())?;
        let limit = q.results.unwrap_or(DEFAULT_RESULTS).min(MAX_RESULTS);
        let feeds = self.store.query(channel_id, q.start, q.end, limit)?;
        Ok(FeedDocument {
            channel: ChannelInfo(channel),
            feeds,
        })
    }

    /// Stores one alarm transition reported with the channel's write key.
    /// Not rate limited.
    pub fn handle_alert(
        &self,
        channel_id: u64,
        api_key: &str,
        report: &AlertReport,
        now: DateTime<Utc>,
    ) -> Result<AlertEvent> {
        let channel = self.store.channel(channel_id)?;
        if api_key != channel.write_key {
            return Err(IngestError::Unauthorized);
        }
        if !(report.ppm.is_finite() && report.ppm > 0.0) {
            return Err(IngestError::BadRequest(format!("ppm must be > 0, got {}", report.ppm)));
        }
        let at = match (self.config.test_mode, report.at) {
            (true, Some(t)) => t,
            _ => timefmt::truncate_seconds(now),
        };
        Ok(self.store.append_alert(AlertEvent {
            kind: report.kind,
            ppm: report.ppm,
            at,
            channel_id,
        })?)
    }

    pub fn handle_alerts(&self, channel_id: u64, q: &FeedQuery) -> Result<AlertsDocument> {
        let channel = self.readable_channel(channel_id, q.api_key.as_deref())?;
        let limit = q.results.unwrap_or(DEFAULT_RESULTS).min(MAX_RESULTS);
        let alerts = self.store.alerts(channel_id, q.start, q.end, limit)?;
        Ok(AlertsDocument {
            channel: ChannelInfo(channel),
            alerts,
        })
    }
}

/// 16 characters drawn uniformly from `A-Z0-9`.
pub fn generate_key<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..WRITE_KEY_LEN)
        .map(|_| KEY_ALPHABET[rng.random_range(0..KEY_ALPHABET.len())] as char)
        .collect()
}

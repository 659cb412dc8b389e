//! Append-only per-channel time-series store.
//!
//! Layout under the data root:
//!
//! ```text
//! channels/<id>.json    channel metadata, rewritten atomically on create
//! channels/<id>.jsonl   one entry per line, append-only
//! channels/<id>.alerts.jsonl   alert events reported by the channel's device
//! ```
//!
//! A record is durable once its terminating newline has been written and
//! synced. On open every log is scanned once; a final line without its
//! newline is a torn write and is cut off.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::alerting::{AlertEvent, AlertKind};
use crate::timefmt;

pub const FIELD_COUNT: usize = 8;

pub type Fields = [Option<String>; FIELD_COUNT];

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("channel {0} not found")]
    NotFound(u64),
    #[error("write key already in use")]
    DuplicateWriteKey,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("store is open read-only")]
    ReadOnly,
    #[error("{path}: line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = StorageError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One stored write. Field values are kept as the exact strings received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "EntryRecord", into = "EntryRecord")]
pub struct ChannelEntry {
    pub entry_id: u64,
    pub created_at: DateTime<Utc>,
    pub fields: Fields,
}

impl ChannelEntry {
    /// `index` is 1-based, matching `fieldN`.
    pub fn field(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.fields.get(i))
            .and_then(|f| f.as_deref())
    }
}

/// On-disk and on-wire shape of an entry; identical to a feed item.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    #[serde(with = "timefmt::wire")]
    created_at: DateTime<Utc>,
    entry_id: u64,
    field1: Option<String>,
    field2: Option<String>,
    field3: Option<String>,
    field4: Option<String>,
    field5: Option<String>,
    field6: Option<String>,
    field7: Option<String>,
    field8: Option<String>,
}

impl From<EntryRecord> for ChannelEntry {
    fn from(r: EntryRecord) -> Self {
        Self {
            entry_id: r.entry_id,
            created_at: r.created_at,
            fields: [
                r.field1, r.field2, r.field3, r.field4, r.field5, r.field6, r.field7, r.field8,
            ],
        }
    }
}

impl From<ChannelEntry> for EntryRecord {
    fn from(e: ChannelEntry) -> Self {
        let [field1, field2, field3, field4, field5, field6, field7, field8] = e.fields;
        Self {
            created_at: e.created_at,
            entry_id: e.entry_id,
            field1,
            field2,
            field3,
            field4,
            field5,
            field6,
            field7,
            field8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    #[serde(rename = "id")]
    pub channel_id: u64,
    pub name: String,
    pub write_key: String,
    #[serde(default)]
    pub read_key: Option<String>,
    pub field_labels: [Option<String>; FIELD_COUNT],
    #[serde(with = "timefmt::wire")]
    pub created_at: DateTime<Utc>,
    /// Derived from the log on open; never persisted.
    #[serde(skip)]
    pub last_entry_id: u64,
}

/// Result of scanning a JSON-lines file.
#[derive(Debug)]
pub struct Recovered<T> {
    pub records: Vec<T>,
    /// Length of the clean prefix in bytes.
    pub clean_len: u64,
    /// Bytes of torn tail that were discarded.
    pub discarded: u64,
}

/// Parses every newline-terminated record of `bytes`. A trailing fragment
/// without a newline is reported as discarded, never parsed.
pub fn parse_jsonl<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<Recovered<T>> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while let Some(pos) = bytes[offset..].iter().position(|&b| b == b'\n') {
        line_no += 1;
        let line = &bytes[offset..offset + pos];
        offset += pos + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record = serde_json::from_slice(line).map_err(|e| StorageError::Corrupt {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(Recovered {
        records,
        clean_len: offset as u64,
        discarded: (bytes.len() - offset) as u64,
    })
}

/// Parses a JSON-lines file without modifying it; a missing file is empty.
pub fn scan_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Recovered<T>> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes).map_err(io_err(path))?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_err(path)(e)),
    }
    parse_jsonl(&bytes, path)
}

/// Reads a JSON-lines file, cutting a torn final line off the file itself.
pub fn recover_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Recovered<T>> {
    let recovered = scan_jsonl::<T>(path)?;
    if recovered.discarded > 0 {
        warn!(
            path = %path.display(),
            discarded_bytes = recovered.discarded,
            "discarding torn final record"
        );
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(recovered.clean_len).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
    }
    Ok(recovered)
}

struct LogWriter {
    file: File,
    len: u64,
}

/// Append-only JSON-lines log with an in-memory copy of every record.
/// Appends are serialized; readers see a consistent prefix.
pub struct JsonlLog<T> {
    path: PathBuf,
    writer: Option<Mutex<LogWriter>>,
    records: RwLock<Vec<T>>,
}

impl<T> JsonlLog<T>
where
    T: Serialize + DeserializeOwned + Clone,
{
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let recovered = recover_jsonl::<T>(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            writer: Some(Mutex::new(LogWriter {
                file,
                len: recovered.clean_len,
            })),
            records: RwLock::new(recovered.records),
            path,
        })
    }

    /// Loads the complete records without touching the file. A torn tail,
    /// such as a write still in flight elsewhere, is ignored. Appends fail
    /// with [`StorageError::ReadOnly`].
    pub fn open_read_only(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let recovered = scan_jsonl::<T>(&path)?;
        Ok(Self {
            writer: None,
            records: RwLock::new(recovered.records),
            path,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: T) -> Result<T> {
        self.append_with(|_| Ok(record))
    }

    /// Builds the next record from the current last one while holding the
    /// writer lock, then writes and syncs it.
    pub fn append_with<F>(&self, build: F) -> Result<T>
    where
        F: FnOnce(Option<&T>) -> Result<T>,
    {
        let writer = self.writer.as_ref().ok_or(StorageError::ReadOnly)?;
        let mut w = writer.lock().unwrap_or_else(|p| p.into_inner());
        let record = {
            let records = self.records.read().unwrap_or_else(|p| p.into_inner());
            build(records.last())?
        };
        let mut line = serde_json::to_vec(&record).map_err(|e| StorageError::BadRequest(e.to_string()))?;
        line.push(b'\n');
        let written = w.file.write_all(&line).and_then(|_| w.file.sync_data());
        if let Err(e) = written {
            // leave no partial line behind for the next append
            let _ = w.file.set_len(w.len);
            return Err(io_err(&self.path)(e));
        }
        w.len += line.len() as u64;
        self.records
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .push(record.clone());
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.records.read().unwrap_or_else(|p| p.into_inner()))
    }
}

struct ChannelLog {
    meta: Channel,
    log: JsonlLog<ChannelEntry>,
    alerts: JsonlLog<AlertEvent>,
}

#[derive(Default)]
struct Index {
    channels: BTreeMap<u64, Arc<ChannelLog>>,
    by_write_key: HashMap<String, u64>,
}

/// Channel store rooted at a data directory.
pub struct Store {
    root: PathBuf,
    index: RwLock<Index>,
    read_only: bool,
}

/// Parameters for a new channel; the store assigns the id.
#[derive(Debug, Clone)]
pub struct NewChannel {
    pub name: String,
    pub write_key: String,
    pub read_key: Option<String>,
    pub field_labels: [Option<String>; FIELD_COUNT],
    pub created_at: DateTime<Utc>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let dir = root.join("channels");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Self::load(root, false)
    }

    /// Opens an existing store for reading while another process may be
    /// appending. Nothing on disk is created or truncated.
    pub fn open_read_only(root: impl Into<PathBuf>) -> Result<Self> {
        Self::load(root.into(), true)
    }

    fn load(root: PathBuf, read_only: bool) -> Result<Self> {
        let dir = root.join("channels");
        let mut index = Index::default();
        let mut metas = Vec::new();
        for item in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = item.map_err(io_err(&dir))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                metas.push(path);
            }
        }
        metas.sort();
        for path in metas {
            let raw = fs::read(&path).map_err(io_err(&path))?;
            let meta: Channel = serde_json::from_slice(&raw).map_err(|e| StorageError::Corrupt {
                path: path.clone(),
                line: 1,
                reason: e.to_string(),
            })?;
            let log_path = Self::log_path(&root, meta.channel_id);
            let alerts_path = Self::alerts_path(&root, meta.channel_id);
            let (log, alerts) = if read_only {
                (
                    JsonlLog::open_read_only(log_path)?,
                    JsonlLog::open_read_only(alerts_path)?,
                )
            } else {
                (JsonlLog::open(log_path)?, JsonlLog::open(alerts_path)?)
            };
            check_entries(&log)?;
            check_alerts(&alerts, meta.channel_id)?;
            index.by_write_key.insert(meta.write_key.clone(), meta.channel_id);
            index
                .channels
                .insert(meta.channel_id, Arc::new(ChannelLog { meta, log, alerts }));
        }
        Ok(Self {
            root,
            index: RwLock::new(index),
            read_only,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn log_path(root: &Path, id: u64) -> PathBuf {
        root.join("channels").join(format!("{id}.jsonl"))
    }

    fn alerts_path(root: &Path, id: u64) -> PathBuf {
        root.join("channels").join(format!("{id}.alerts.jsonl"))
    }

    fn meta_path(&self, id: u64) -> PathBuf {
        self.root.join("channels").join(format!("{id}.json"))
    }

    fn get(&self, id: u64) -> Result<Arc<ChannelLog>> {
        self.index
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .channels
            .get(&id)
            .cloned()
            .ok_or(StorageError::NotFound(id))
    }

    pub fn create_channel(&self, new: NewChannel) -> Result<Channel> {
        if self.read_only {
            return Err(StorageError::ReadOnly);
        }
        let mut index = self.index.write().unwrap_or_else(|p| p.into_inner());
        if index.by_write_key.contains_key(&new.write_key) {
            return Err(StorageError::DuplicateWriteKey);
        }
        let id = index.channels.keys().next_back().map_or(1, |last| last + 1);
        let meta = Channel {
            channel_id: id,
            name: new.name,
            write_key: new.write_key,
            read_key: new.read_key,
            field_labels: new.field_labels,
            created_at: timefmt::truncate_seconds(new.created_at),
            last_entry_id: 0,
        };
        let path = self.meta_path(id);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(&meta).map_err(|e| StorageError::BadRequest(e.to_string()))?;
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&body).and_then(|_| f.sync_all()).map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        if let Some(dir) = path.parent() {
            // make the rename itself durable
            File::open(dir).and_then(|d| d.sync_all()).map_err(io_err(dir))?;
        }
        let log = JsonlLog::open(Self::log_path(&self.root, id))?;
        let alerts = JsonlLog::open(Self::alerts_path(&self.root, id))?;
        index.by_write_key.insert(meta.write_key.clone(), id);
        index.channels.insert(
            id,
            Arc::new(ChannelLog {
                meta: meta.clone(),
                log,
                alerts,
            }),
        );
        Ok(meta)
    }

    pub fn channel(&self, id: u64) -> Result<Channel> {
        let c = self.get(id)?;
        Ok(Channel {
            last_entry_id: c.log.len() as u64,
            ..c.meta.clone()
        })
    }

    pub fn channel_ids(&self) -> Vec<u64> {
        self.index
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .channels
            .keys()
            .copied()
            .collect()
    }

    pub fn channel_for_write_key(&self, key: &str) -> Option<u64> {
        self.index
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .by_write_key
            .get(key)
            .copied()
    }

    /// Appends one entry and returns it with its assigned id. `created_at` is
    /// truncated to the second and never moves before the previous entry.
    pub fn append(&self, channel_id: u64, fields: Fields, created_at: DateTime<Utc>) -> Result<ChannelEntry> {
        let c = self.get(channel_id)?;
        let created_at = timefmt::truncate_seconds(created_at);
        c.log.append_with(|last| {
            let (entry_id, created_at) = match last {
                Some(prev) => (prev.entry_id + 1, created_at.max(prev.created_at)),
                None => (1, created_at),
            };
            Ok(ChannelEntry {
                entry_id,
                created_at,
                fields,
            })
        })
    }

    /// The last `limit` entries with `start <= created_at <= end`, ascending.
    pub fn query(
        &self,
        channel_id: u64,
        start: Option<DateTime<Utc>>,
        end: Option<DateTime<Utc>>,
        limit: usize,
    ) -> Result<Vec<ChannelEntry>> {
        let c = self.get(channel_id)?;
        Ok(c.log.read(|entries| {
            let range = time_range(entries, start, end);
            let slice = &entries[range];
            slice[slice.len().saturating_sub(limit)..].to_vec()
        }))
    }

    /// Appends an alert event to the log of `event.channel_id`. Events must
    /// start with `Raised`, alternate in kind, and never go back in time.
    pub fn append_alert(&self, event: AlertEvent) -> Result<AlertEvent> {
        let c = self.get(event.channel_id)?;
        c.alerts.append_with(|last| {
            alert_follows(last, &event).map_err(StorageError::Conflict)?;
            Ok(event)
        })
    }

    /// The last `limit` alert events with `start <= at <= end`, oldest first.
    pub fn alerts(
        &self,
        channel_id: u64,
        start: Option<DateTime<Utc>>,
        end: Option<DateTime<Utc>>,
        limit: usize,
    ) -> Result<Vec<AlertEvent>> {
        let c = self.get(channel_id)?;
        Ok(c.alerts.read(|events| {
            let lo = start.map_or(0, |s| events.partition_point(|e| e.at < s));
            let hi = end.map_or(events.len(), |t| events.partition_point(|e| e.at <= t));
            let slice = &events[lo..hi.max(lo)];
            slice[slice.len().saturating_sub(limit)..].to_vec()
        }))
    }

    /// Tumbling-window statistics of one field, windows aligned to `start`
    /// (or to the first entry in range when `start` is absent).
    pub fn aggregate(
        &self,
        channel_id: u64,
        field_index: usize,
        window: Duration,
        start: Option<DateTime<Utc>>,
        end: Option<DateTime<Utc>>,
        func: AggregateFn,
    ) -> Result<Aggregation> {
        if !(1..=FIELD_COUNT).contains(&field_index) {
            return Err(StorageError::BadRequest(format!(
                "field index must be 1..={FIELD_COUNT}, got {field_index}"
            )));
        }
        if window <= Duration::zero() {
            return Err(StorageError::BadRequest("window must be positive".into()));
        }
        let c = self.get(channel_id)?;
        Ok(c.log.read(|entries| {
            let selected = &entries[time_range(entries, start, end)];
            aggregate_entries(selected, field_index, window, start, func)
        }))
    }
}

fn check_entries(log: &JsonlLog<ChannelEntry>) -> Result<()> {
    log.read(|entries| {
        for (i, e) in entries.iter().enumerate() {
            let reason = if e.entry_id != i as u64 + 1 {
                Some(format!("entry id {} out of sequence", e.entry_id))
            } else if i > 0 && e.created_at < entries[i - 1].created_at {
                Some("created_at decreases".to_string())
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(StorageError::Corrupt {
                    path: log.path().to_path_buf(),
                    line: i + 1,
                    reason,
                });
            }
        }
        Ok(())
    })
}

fn alert_follows(last: Option<&AlertEvent>, next: &AlertEvent) -> Result<(), String> {
    match last {
        None if next.kind == AlertKind::Cleared => Err("first alert event must be raised".into()),
        Some(prev) if prev.kind == next.kind => Err(format!("alert already {:?}", prev.kind).to_lowercase()),
        Some(prev) if next.at < prev.at => Err("alert event older than the previous one".into()),
        _ => Ok(()),
    }
}

fn check_alerts(log: &JsonlLog<AlertEvent>, channel_id: u64) -> Result<()> {
    log.read(|events| {
        for (i, e) in events.iter().enumerate() {
            let reason = if e.channel_id != channel_id {
                Some(format!("alert for channel {}", e.channel_id))
            } else {
                alert_follows(i.checked_sub(1).map(|j| &events[j]), e).err()
            };
            if let Some(reason) = reason {
                return Err(StorageError::Corrupt {
                    path: log.path().to_path_buf(),
                    line: i + 1,
                    reason,
                });
            }
        }
        Ok(())
    })
}

fn time_range(
    entries: &[ChannelEntry],
    start: Option<DateTime<Utc>>,
    end: Option<DateTime<Utc>>,
) -> std::ops::Range<usize> {
    let lo = start.map_or(0, |s| entries.partition_point(|e| e.created_at < s));
    let hi = end.map_or(entries.len(), |t| entries.partition_point(|e| e.created_at <= t));
    lo..hi.max(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateFn {
    Min,
    Max,
    Mean,
}

impl FromStr for AggregateFn {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown aggregate {other:?} (min|max|mean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    #[serde(with = "timefmt::wire")]
    pub window_start: DateTime<Utc>,
    #[serde(with = "timefmt::wire")]
    pub window_end: DateTime<Utc>,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// The statistic selected by the requested [`AggregateFn`].
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub points: Vec<AggregatePoint>,
    /// Present values that did not parse as finite numbers.
    pub skipped: usize,
}

/// Window arithmetic over entries already restricted to the query range.
pub fn aggregate_entries(
    entries: &[ChannelEntry],
    field_index: usize,
    window: Duration,
    start: Option<DateTime<Utc>>,
    func: AggregateFn,
) -> Aggregation {
    let mut skipped = 0;
    let Some(origin) = start.or_else(|| entries.first().map(|e| e.created_at)) else {
        return Aggregation {
            points: Vec::new(),
            skipped,
        };
    };
    let width = window.num_milliseconds();
    // (count, sum, min, max) per window index
    let mut buckets: BTreeMap<i64, (usize, f64, f64, f64)> = BTreeMap::new();
    for e in entries {
        let Some(raw) = e.field(field_index) else { continue };
        let v = match raw.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                skipped += 1;
                continue;
            }
        };
        let idx = (e.created_at - origin).num_milliseconds().div_euclid(width);
        let b = buckets.entry(idx).or_insert((0, 0.0, f64::INFINITY, f64::NEG_INFINITY));
        b.0 += 1;
        b.1 += v;
        b.2 = b.2.min(v);
        b.3 = b.3.max(v);
    }
    let points = buckets
        .into_iter()
        .map(|(idx, (count, sum, min, max))| {
            let mean = (sum / count as f64).clamp(min, max);
            let window_start = origin + Duration::milliseconds(idx * width);
            AggregatePoint {
                window_start,
                window_end: window_start + window,
                count,
                min,
                max,
                mean,
                value: match func {
                    AggregateFn::Min => min,
                    AggregateFn::Max => max,
                    AggregateFn::Mean => mean,
                },
            }
        })
        .collect();
    Aggregation { points, skipped }
}

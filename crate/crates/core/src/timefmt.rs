//! Wire format for instants: ISO-8601 UTC at second precision, `YYYY-MM-DDTHH:MM:SSZ`.

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Timelike, Utc};

pub const WIRE_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

pub fn format_seconds(at: &DateTime<Utc>) -> String {
    at.format(WIRE_FORMAT).to_string()
}

/// Sub-second precision only when the instant has a fractional part.
pub fn format_auto(at: &DateTime<Utc>) -> String {
    at.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn truncate_seconds(at: DateTime<Utc>) -> DateTime<Utc> {
    at.with_nanosecond(0).unwrap_or(at)
}

/// Accepts RFC 3339, `YYYY-MM-DD HH:MM:SS` (taken as UTC) and bare `YYYY-MM-DD`.
pub fn parse_instant(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(naive.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|n| n.and_utc())
}

/// Serde adapter for the wire format.
pub mod wire {
    use super::*;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(at: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_seconds(at))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        parse_instant(&raw).ok_or_else(|| D::Error::custom(format!("invalid timestamp {raw:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn formats_and_parses() {
        let at = Utc.with_ymd_and_hms(2023, 6, 1, 12, 30, 5).unwrap();
        assert_eq!(format_seconds(&at), "2023-06-01T12:30:05Z");
        assert_eq!(parse_instant("2023-06-01T12:30:05Z"), Some(at));
        assert_eq!(parse_instant("2023-06-01 12:30:05"), Some(at));
        assert_eq!(parse_instant("2023-06-01T17:00:05+04:30"), Some(at));
        assert_eq!(
            parse_instant("2023-06-01"),
            Some(Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap())
        );
        assert_eq!(parse_instant("yesterday"), None);
    }

    #[test]
    fn auto_precision() {
        let at = Utc.timestamp_opt(1_685_620_800, 500_000_000).unwrap();
        assert_eq!(format_auto(&at), "2023-06-01T12:00:00.500Z");
        assert_eq!(format_auto(&truncate_seconds(at)), "2023-06-01T12:00:00Z");
    }
}

//! Graph time. All timestamps are hours since the Unix epoch.
//!
//! Telemetry files carry RFC 3339 strings; everything internal works in
//! fractional hours so decay math stays in the units the edge policies use.

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};

const SECONDS_PER_HOUR: f64 = 3600.0;

/// A point in time, in hours since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub fn from_hours(hours: f64) -> Self {
        Timestamp(hours)
    }

    pub fn hours(self) -> f64 {
        self.0
    }

    /// Parses an RFC 3339 string such as `2025-06-01T00:15:00Z`.
    pub fn parse_rfc3339(s: &str) -> Result<Self, TimeError> {
        let dt = DateTime::parse_from_rfc3339(s.trim())
            .map_err(|e| TimeError::Parse(s.to_string(), e.to_string()))?;
        Ok(Self::from_datetime(dt.with_timezone(&Utc)))
    }

    /// Parses with an explicit strftime format (used by CSV adapters whose
    /// exports are not RFC 3339). Naive datetimes are taken as UTC.
    pub fn parse_with_format(s: &str, fmt: &str) -> Result<Self, TimeError> {
        let naive = chrono::NaiveDateTime::parse_from_str(s.trim(), fmt)
            .map_err(|e| TimeError::Parse(s.to_string(), e.to_string()))?;
        Ok(Self::from_datetime(Utc.from_utc_datetime(&naive)))
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        let micros = dt.timestamp_micros();
        Timestamp(micros as f64 / (SECONDS_PER_HOUR * 1e6))
    }

    pub fn to_rfc3339(self) -> String {
        let micros = (self.0 * SECONDS_PER_HOUR * 1e6).round() as i64;
        Utc.timestamp_micros(micros)
            .single()
            .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
            .unwrap_or_else(|| format!("{}h", self.0))
    }

    /// Hours elapsed since `earlier`. Negative when `earlier` is in the future.
    pub fn since(self, earlier: Timestamp) -> f64 {
        self.0 - earlier.0
    }

    pub fn plus_hours(self, hours: f64) -> Timestamp {
        Timestamp(self.0 + hours)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TimeError {
    #[error("invalid timestamp '{0}': {1}")]
    Parse(String, String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfc3339_round_trip() {
        let ts = Timestamp::parse_rfc3339("2025-06-01T12:30:00Z").unwrap();
        assert_eq!(ts.to_rfc3339(), "2025-06-01T12:30:00Z");
    }

    #[test]
    fn hour_arithmetic() {
        let a = Timestamp::parse_rfc3339("2025-06-01T00:00:00Z").unwrap();
        let b = Timestamp::parse_rfc3339("2025-06-01T06:00:00Z").unwrap();
        assert!((b.since(a) - 6.0).abs() < 1e-9);
        assert!((a.plus_hours(6.0).hours() - b.hours()).abs() < 1e-9);
    }

    #[test]
    fn offset_zones_normalize_to_utc() {
        let a = Timestamp::parse_rfc3339("2025-06-01T02:00:00+02:00").unwrap();
        let b = Timestamp::parse_rfc3339("2025-06-01T00:00:00Z").unwrap();
        assert!((a.since(b)).abs() < 1e-9);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Timestamp::parse_rfc3339("yesterday").is_err());
    }
}

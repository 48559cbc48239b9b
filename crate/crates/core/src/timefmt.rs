//! Timestamp text format shared by every file and wire format.
//!
//! Output is RFC 3339 in UTC (`2014-11-16T23:19:16Z`, fractional seconds
//! only when present). Input additionally accepts a space separator,
//! a missing zone (taken as UTC) and explicit offsets.

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serializer};

use crate::domain::Timestamp;

pub fn format(ts: &Timestamp) -> String {
    ts.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse(s: &str) -> Result<Timestamp, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("empty timestamp".into());
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.with_timezone(&Utc));
    }
    let swapped;
    let candidate = if s.len() > 10 && s.as_bytes()[10] == b' ' {
        swapped = format!("{}T{}", &s[..10], &s[11..]);
        swapped.as_str()
    } else {
        s
    };
    if let Ok(dt) = DateTime::parse_from_rfc3339(candidate) {
        return Ok(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(candidate, fmt) {
            return Ok(naive.and_utc());
        }
    }
    Err(format!("bad timestamp {s:?}"))
}

pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format(ts))
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
    let raw = <std::borrow::Cow<'de, str>>::deserialize(d)?;
    parse(&raw).map_err(serde::de::Error::custom)
}

//! `key = value` configuration files.
//!
//! One setting per line. Blank lines and lines starting with `#` are
//! ignored. Keys are case-sensitive; values are trimmed and may be wrapped
//! in double quotes.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { key: String, line: usize },
    #[error("line {line}: bad value for {key}: {reason}")]
    Value { key: String, line: usize, reason: String },
    #[error("line {line}: unknown key {key:?}")]
    Unknown { key: String, line: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(KvError::Syntax { line: line_no })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(KvError::Syntax { line: line_no });
            }
            let mut value = v.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            if entries.insert(key.to_string(), (value.to_string(), line_no)).is_some() {
                return Err(KvError::Duplicate {
                    key: key.to_string(),
                    line: line_no,
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, KvError> {
        let text = std::fs::read_to_string(path).map_err(|e| KvError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries
            .iter()
            .filter_map(move |(k, (v, _))| k.strip_prefix(prefix).map(|rest| (rest, v.as_str())))
    }

    fn value_err(&self, key: &str, reason: String) -> KvError {
        KvError::Value {
            key: key.to_string(),
            line: self.entries.get(key).map_or(0, |(_, l)| *l),
            reason,
        }
    }

    pub fn parsed<T>(&self, key: &str) -> Result<Option<T>, KvError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| self.value_err(key, e.to_string())))
            .transpose()
    }

    pub fn duration(&self, key: &str) -> Result<Option<Duration>, KvError> {
        self.get(key)
            .map(|v| crate::durfmt::parse(v).map_err(|e| self.value_err(key, e)))
            .transpose()
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>, KvError> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                other => Err(self.value_err(key, format!("expected a boolean, got {other:?}"))),
            })
            .transpose()
    }

    /// Fails on the first key that is neither listed nor under one of the
    /// prefixes.
    pub fn check_known(&self, known: &[&str], prefixes: &[&str]) -> Result<(), KvError> {
        for (k, (_, line)) in &self.entries {
            if !known.contains(&k.as_str()) && !prefixes.iter().any(|p| k.starts_with(p)) {
                return Err(KvError::Unknown {
                    key: k.clone(),
                    line: *line,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_quotes_and_types() {
        let c = KvConfig::parse("# c\n\nlisten = 127.0.0.1:8080\ntoken=\"a b\"\nwait = 5m\nflag = yes\nwebhook.h1 = http://x\n").unwrap();
        assert_eq!(c.get("token"), Some("a b"));
        assert_eq!(c.duration("wait").unwrap(), Some(Duration::from_secs(300)));
        assert_eq!(c.bool("flag").unwrap(), Some(true));
        assert_eq!(c.parsed::<u32>("missing").unwrap(), None);
        assert_eq!(c.with_prefix("webhook.").collect::<Vec<_>>(), vec![("h1", "http://x")]);
        assert!(c.check_known(&["listen", "token", "wait", "flag"], &["webhook."]).is_ok());
        assert_eq!(
            c.check_known(&["listen"], &[]).unwrap_err(),
            KvError::Unknown { key: "flag".into(), line: 6 }
        );
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(KvConfig::parse("a = 1\nnonsense\n").unwrap_err(), KvError::Syntax { line: 2 });
        assert_eq!(
            KvConfig::parse("a = 1\na = 2\n").unwrap_err(),
            KvError::Duplicate { key: "a".into(), line: 2 }
        );
        let c = KvConfig::parse("n = x").unwrap();
        assert!(matches!(c.parsed::<u32>("n"), Err(KvError::Value { line: 1, .. })));
    }
}

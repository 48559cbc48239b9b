//! Flag, file and default resolution.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use ecohabit_core::durfmt;
use ecohabit_core::feedback::FeedbackConfig;
use ecohabit_core::kvconf::KvConfig;
use ecohabit_core::matcher::MatcherConfig;
use ecohabit_core::miner::{Algorithm, MiningConfig, SupportBase};
use ecohabit_service::config::KEYS as SERVICE_KEYS;

use crate::args::{MatcherFlags, MiningFlags};
use crate::error::CliError;

/// Keys the command line reads besides the service keys.
pub const CLI_KEYS: [&str; 8] = [
    "min_support",
    "min_len",
    "max_len",
    "support_base",
    "allow_overlap",
    "algo",
    "log",
    "format",
];

#[derive(Debug, Default)]
pub struct Settings {
    file: Option<KvConfig>,
}

fn parse_duration(key: &str, s: &str) -> Result<Duration, CliError> {
    durfmt::parse(s).map_err(|e| CliError::invalid(format!("{key}: {e}")))
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let kv = KvConfig::load(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let known: Vec<&str> = SERVICE_KEYS.iter().chain(CLI_KEYS.iter()).copied().collect();
        kv.check_known(&known, &["webhook."])
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(Self { file: Some(kv) })
    }

    pub fn file(&self) -> Option<&KvConfig> {
        self.file.as_ref()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.file.as_ref().and_then(|kv| kv.get(key))
    }

    fn value<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| CliError::config(format!("{key} = {s:?}: {e}"))),
        }
    }

    fn duration(&self, flag: Option<&str>, key: &str) -> Result<Option<Duration>, CliError> {
        match flag.or_else(|| self.get(key)) {
            None => Ok(None),
            Some(s) => parse_duration(key, s).map(Some),
        }
    }

    fn flag_bool(&self, flag: bool, key: &str) -> Result<Option<bool>, CliError> {
        if flag {
            return Ok(Some(true));
        }
        match &self.file {
            None => Ok(None),
            Some(kv) => kv.bool(key).map_err(CliError::config),
        }
    }

    pub fn path(&self, flag: Option<&Path>, key: &str) -> Option<PathBuf> {
        flag.map(Path::to_path_buf).or_else(|| self.get(key).map(PathBuf::from))
    }

    pub fn require_path(&self, flag: Option<&Path>, key: &str, flag_name: &str) -> Result<PathBuf, CliError> {
        self.path(flag, key)
            .ok_or_else(|| CliError::invalid(format!("missing {flag_name} (or `{key}` in the config file)")))
    }

    pub fn mining(&self, f: &MiningFlags) -> Result<MiningConfig, CliError> {
        let mut cfg = MiningConfig::default();
        if let Some(v) = self.value(f.min_support, "min_support")? {
            cfg.min_support = v;
        }
        if let Some(v) = self.value(f.min_len, "min_len")? {
            cfg.min_length = v;
        }
        if let Some(v) = self.value(f.max_len, "max_len")? {
            cfg.max_length = v;
        }
        if let Some(d) = self.duration(f.max_gap.as_deref(), "max_gap")? {
            cfg.max_gap = d;
        }
        let base = f.support_base.clone().or_else(|| self.get("support_base").map(str::to_string));
        if let Some(b) = base {
            cfg.support_base = SupportBase::from_str(&b).map_err(CliError::invalid)?;
        }
        if f.no_overlap {
            cfg.allow_overlap = false;
        } else if let Some(b) = self.flag_bool(false, "allow_overlap")? {
            cfg.allow_overlap = b;
        }
        cfg.validate().map_err(CliError::invalid)?;
        Ok(cfg)
    }

    pub fn algorithm(&self, flag: Option<&str>) -> Result<Algorithm, CliError> {
        match flag.or_else(|| self.get("algo")) {
            None => Ok(Algorithm::Growth),
            Some(s) => Algorithm::from_str(s).map_err(CliError::invalid),
        }
    }

    pub fn matcher(&self, f: &MatcherFlags) -> Result<MatcherConfig, CliError> {
        let mut cfg = MatcherConfig::default();
        if let Some(d) = self.duration(f.action_wait.as_deref(), "action_wait")? {
            cfg.action_wait = d;
        }
        if let Some(d) = self.duration(f.max_gap.as_deref(), "max_gap")? {
            cfg.max_gap = d;
        }
        if let Some(d) = self.duration(f.cooldown.as_deref(), "cooldown")? {
            cfg.cooldown = d;
        }
        if let Some(b) = self.flag_bool(f.order_insensitive, "order_insensitive")? {
            cfg.order_insensitive = b;
        }
        Ok(cfg)
    }

    pub fn feedback(&self) -> Result<FeedbackConfig, CliError> {
        let mut cfg = FeedbackConfig::default();
        if let Some(n) = self.value::<u32>(None, "streak_limit")? {
            if n == 0 {
                return Err(CliError::config("streak_limit must be at least 1"));
            }
            cfg.streak_limit = n;
        }
        if let Some(d) = self.duration(None, "expiry")? {
            cfg.expiry = d;
        }
        Ok(cfg)
    }
}

pub fn duration_flag(name: &str, s: &str) -> Result<Duration, CliError> {
    parse_duration(name, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(text: &str) -> Settings {
        Settings {
            file: Some(KvConfig::parse(text).unwrap()),
        }
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let s = with("min_support = 0.01\nmax_len = 5\n");
        let flags = MiningFlags {
            min_support: Some(0.2),
            ..Default::default()
        };
        let cfg = s.mining(&flags).unwrap();
        assert_eq!(cfg.min_support, 0.2);
        assert_eq!(cfg.max_length, 5);
        assert_eq!(cfg.min_length, MiningConfig::default().min_length);
    }

    #[test]
    fn out_of_range_support_is_a_validation_error() {
        let flags = MiningFlags {
            min_support: Some(2.0),
            ..Default::default()
        };
        let e = Settings::default().mining(&flags).unwrap_err();
        assert_eq!((e.kind, e.code), ("validation", CliError::USAGE));
    }

    #[test]
    fn matcher_durations_from_file() {
        let s = with("cooldown = 30m\norder_insensitive = true\n");
        let cfg = s.matcher(&MatcherFlags::default()).unwrap();
        assert_eq!(cfg.cooldown, Duration::from_secs(1800));
        assert!(cfg.order_insensitive);
    }
}

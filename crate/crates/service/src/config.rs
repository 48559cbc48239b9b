use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ecohabit_core::feedback::FeedbackConfig;
use ecohabit_core::kvconf::{KvConfig, KvError};
use ecohabit_core::matcher::MatcherConfig;

use crate::error::ServiceError;

/// Settings of a running service.
///
/// File keys: `listen`, `store`, `ruledb`, `state_dir`, `topology`,
/// `token`, `action_wait`, `max_gap`, `cooldown`, `order_insensitive`,
/// `exclude_absent`, `reorder_tolerance`, `streak_limit`, `expiry`, and
/// `webhook.<home_id> = <url>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Event store directory.
    pub store: PathBuf,
    pub ruledb: PathBuf,
    /// Where recommendations and verdicts are kept; defaults to `store`.
    pub state_dir: Option<PathBuf>,
    pub topology: Option<PathBuf>,
    /// Static bearer token.
    pub token: String,
    pub matcher: MatcherConfig,
    pub feedback: FeedbackConfig,
    /// Overrides the absent-action policy stored in the rule file.
    pub exclude_absent: Option<bool>,
    pub reorder_tolerance: Duration,
    pub webhooks: BTreeMap<String, String>,
}

pub const KEYS: [&str; 14] = [
    "listen",
    "store",
    "ruledb",
    "state_dir",
    "topology",
    "token",
    "action_wait",
    "max_gap",
    "cooldown",
    "order_insensitive",
    "exclude_absent",
    "reorder_tolerance",
    "streak_limit",
    "expiry",
];

impl ServiceConfig {
    pub fn new(store: impl Into<PathBuf>, ruledb: impl Into<PathBuf>, token: impl Into<String>) -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            store: store.into(),
            ruledb: ruledb.into(),
            state_dir: None,
            topology: None,
            token: token.into(),
            matcher: MatcherConfig::default(),
            feedback: FeedbackConfig::default(),
            exclude_absent: None,
            reorder_tolerance: Duration::from_secs(60),
            webhooks: BTreeMap::new(),
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, ServiceError> {
        Self::from_kv_with(kv, &[])
    }

    /// Like [`ServiceConfig::from_kv`], also accepting the `extra` keys of a
    /// file shared with other tools.
    pub fn from_kv_with(kv: &KvConfig, extra: &[&str]) -> Result<Self, ServiceError> {
        let known: Vec<&str> = KEYS.iter().chain(extra).copied().collect();
        kv.check_known(&known, &["webhook."])?;
        let required = |key: &str| {
            kv.get(key)
                .map(str::to_string)
                .ok_or_else(|| ServiceError::Config(format!("missing required key {key:?}")))
        };
        let mut cfg = Self::new(required("store")?, required("ruledb")?, required("token")?);
        if let Some(addr) = kv.parsed::<SocketAddr>("listen")? {
            cfg.listen = addr;
        }
        cfg.state_dir = kv.get("state_dir").map(PathBuf::from);
        cfg.topology = kv.get("topology").map(PathBuf::from);
        if let Some(d) = kv.duration("action_wait")? {
            cfg.matcher.action_wait = d;
        }
        if let Some(d) = kv.duration("max_gap")? {
            cfg.matcher.max_gap = d;
        }
        if let Some(d) = kv.duration("cooldown")? {
            cfg.matcher.cooldown = d;
        }
        if let Some(b) = kv.bool("order_insensitive")? {
            cfg.matcher.order_insensitive = b;
        }
        cfg.exclude_absent = kv.bool("exclude_absent")?;
        if let Some(d) = kv.duration("reorder_tolerance")? {
            cfg.reorder_tolerance = d;
        }
        if let Some(n) = kv.parsed::<u32>("streak_limit")? {
            cfg.feedback.streak_limit = n;
        }
        if let Some(d) = kv.duration("expiry")? {
            cfg.feedback.expiry = d;
        }
        cfg.webhooks = kv
            .with_prefix("webhook.")
            .map(|(home, url)| (home.to_string(), url.to_string()))
            .collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        Self::from_kv(&KvConfig::load(path)?)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.token.is_empty() {
            return Err(ServiceError::Config("token must not be empty".into()));
        }
        if self.feedback.streak_limit == 0 {
            return Err(ServiceError::Config("streak_limit must be at least 1".into()));
        }
        for (home, url) in &self.webhooks {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(ServiceError::Config(format!("webhook for {home} is not an http url: {url}")));
            }
        }
        Ok(())
    }

    pub fn state_dir(&self) -> &Path {
        self.state_dir.as_deref().unwrap_or(&self.store)
    }
}

impl From<KvError> for ServiceError {
    fn from(e: KvError) -> Self {
        ServiceError::Config(e.to_string())
    }
}

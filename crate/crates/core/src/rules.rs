//! Association rules `X -> Y`, their confidence and priority, and the rule
//! database file.
//!
//! Rule file layout: the first line is a header object carrying the format
//! tag, version, weights, threshold and policy flags; every further line is
//! one rule, ordered by rule id.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{ActionCategory, AssociationRule, EventClass, EventIdentity, Pattern, RuleState};
use crate::miner::{condition_without_action, count_support, HomeSequence, MiningConfig};

pub const RULEDB_FORMAT: &str = "ecohabit-ruledb";
pub const RULEDB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("rule {0} has no occurrence of its source pattern")]
    Undefined(String),
    #[error("rule {rule_id} belongs to home {rule_home}, not {home}")]
    WrongHome {
        rule_id: String,
        rule_home: String,
        home: String,
    },
    #[error("invalid weights: {0}")]
    Weights(String),
}

/// Linear priority coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleWeights {
    pub beta_confidence: f64,
    pub beta_length: f64,
}

impl Default for RuleWeights {
    fn default() -> Self {
        Self {
            beta_confidence: 1.0,
            beta_length: 0.0,
        }
    }
}

impl RuleWeights {
    pub fn validate(&self) -> Result<(), RuleError> {
        if self.beta_confidence.is_finite() && self.beta_length.is_finite() {
            Ok(())
        } else {
            Err(RuleError::Weights(format!(
                "weights must be finite, got ({}, {})",
                self.beta_confidence, self.beta_length
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyFlags {
    pub exclude_absent_actions: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeriveOptions {
    /// Keep the pattern's other actions in the condition.
    pub keep_other_actions: bool,
}

fn rule_id(home_id: &str, condition: &[EventIdentity], pattern: &[EventIdentity], position: usize) -> String {
    let mut h = Sha256::new();
    h.update(home_id.as_bytes());
    for part in [condition, pattern] {
        h.update([0xff]);
        for id in part {
            for s in [&id.zone_id, &id.subject_id, &id.event_name] {
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
    }
    h.update((position as u64).to_le_bytes());
    format!("r{}", hex::encode(&h.finalize()[..8]))
}

/// One rule per action occurrence of `pattern`. Confidence is left at 0 and
/// the state at active; see [`build_rules`] for the full pipeline.
pub fn derive_rules(pattern: &Pattern, opts: &DeriveOptions) -> Vec<AssociationRule> {
    let source: Vec<EventIdentity> = pattern.items.iter().map(|i| i.identity.clone()).collect();
    let mut out = Vec::new();
    for (pos, item) in pattern.items.iter().enumerate() {
        let EventClass::Action(category) = item.class else {
            continue;
        };
        let condition: Vec<EventIdentity> = pattern
            .items
            .iter()
            .enumerate()
            .filter(|&(j, other)| {
                j != pos && other.identity != item.identity && (opts.keep_other_actions || !other.class.is_action())
            })
            .map(|(_, other)| other.identity.clone())
            .collect();
        if condition.len() < 2 {
            continue;
        }
        out.push(AssociationRule {
            rule_id: rule_id(&pattern.home_id, &condition, &source, pos),
            home_id: pattern.home_id.clone(),
            condition,
            action: item.identity.clone(),
            action_category: category,
            action_position: pos,
            source_pattern: source.clone(),
            confidence: 0.0,
            pattern_support: pattern.support,
            pattern_support_count: pattern.support_count,
            pattern_length: pattern.len(),
            mined_date: pattern.first_mined,
            priority: 0.0,
            state: RuleState::Active,
        });
    }
    out
}

/// `s_with / (s_with + s_without)`, exactly 1.0 when `s_without` is 0.
pub fn confidence_ratio(s_with: u64, s_without: u64) -> Option<f64> {
    match (s_with, s_without) {
        (0, _) => None,
        (_, 0) => Some(1.0),
        (w, wo) => Some(w as f64 / (w + wo) as f64),
    }
}

/// Both supports behind a rule's confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfidenceCounts {
    pub with_action: u64,
    pub without_action: u64,
}

pub fn confidence_counts(rule: &AssociationRule, seq: &HomeSequence, cfg: &MiningConfig) -> ConfidenceCounts {
    let (with_action, _) = count_support(&rule.source_pattern, seq, cfg);
    let cond: Option<Vec<u32>> = rule.condition.iter().map(|c| seq.id_of(c)).collect();
    let without_action = match cond {
        Some(ids) => condition_without_action(seq, &ids, seq.id_of(&rule.action), cfg),
        None => 0,
    };
    ConfidenceCounts {
        with_action,
        without_action,
    }
}

pub fn compute_confidence(rule: &AssociationRule, seq: &HomeSequence, cfg: &MiningConfig) -> Result<f64, RuleError> {
    if rule.home_id != seq.home_id {
        return Err(RuleError::WrongHome {
            rule_id: rule.rule_id.clone(),
            rule_home: rule.home_id.clone(),
            home: seq.home_id.clone(),
        });
    }
    let c = confidence_counts(rule, seq, cfg);
    confidence_ratio(c.with_action, c.without_action).ok_or_else(|| RuleError::Undefined(rule.rule_id.clone()))
}

pub fn compute_priority(rule: &AssociationRule, weights: &RuleWeights) -> f64 {
    weights.beta_confidence * rule.confidence + weights.beta_length * rule.pattern_length as f64
}

/// Ranking used for listings and conflict resolution: priority, then
/// support count, newer mined date, earlier action position, rule id.
pub fn rank_cmp(a: &AssociationRule, b: &AssociationRule) -> Ordering {
    b.priority
        .total_cmp(&a.priority)
        .then_with(|| b.pattern_support_count.cmp(&a.pattern_support_count))
        .then_with(|| b.mined_date.cmp(&a.mined_date))
        .then_with(|| a.action_position.cmp(&b.action_position))
        .then_with(|| a.rule_id.cmp(&b.rule_id))
}

/// Derives rules for every relevant pattern of one home and computes their
/// confidence. Rules whose source pattern no longer occurs are skipped.
pub fn build_rules(
    patterns: &[Pattern],
    seq: &HomeSequence,
    cfg: &MiningConfig,
    opts: &DeriveOptions,
) -> Result<Vec<AssociationRule>, RuleError> {
    let mut out = Vec::new();
    for p in patterns.iter().filter(|p| p.home_id == seq.home_id && p.is_relevant()) {
        for mut rule in derive_rules(p, opts) {
            match compute_confidence(&rule, seq, cfg) {
                Ok(c) => {
                    rule.confidence = c;
                    out.push(rule);
                }
                Err(RuleError::Undefined(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    weights: RuleWeights,
    threshold: Option<f64>,
    policy: PolicyFlags,
}

/// Census of rule states.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub total: usize,
    pub active: usize,
    pub below_threshold: usize,
    pub excluded_by_feedback: usize,
    pub excluded_by_policy: usize,
}

impl StateCounts {
    pub fn add(&mut self, state: RuleState) {
        self.total += 1;
        match state {
            RuleState::Active => self.active += 1,
            RuleState::BelowThreshold => self.below_threshold += 1,
            RuleState::ExcludedByFeedback => self.excluded_by_feedback += 1,
            RuleState::ExcludedByPolicy => self.excluded_by_policy += 1,
        }
    }
}

/// The rule database: rules keyed by id plus the settings that decide
/// their priority and state.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleDb {
    pub weights: RuleWeights,
    /// Rules with priority strictly below are `below_threshold`; `None`
    /// disables the cut.
    pub threshold: Option<f64>,
    pub policy: PolicyFlags,
    rules: BTreeMap<String, AssociationRule>,
}

impl Default for RuleDb {
    fn default() -> Self {
        Self {
            weights: RuleWeights::default(),
            threshold: Some(0.0),
            policy: PolicyFlags::default(),
            rules: BTreeMap::new(),
        }
    }
}

impl RuleDb {
    pub fn new(weights: RuleWeights, threshold: Option<f64>, policy: PolicyFlags) -> Self {
        Self {
            weights,
            threshold,
            policy,
            rules: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Inserts or replaces rules by id, then recomputes.
    pub fn insert_all(&mut self, rules: impl IntoIterator<Item = AssociationRule>) {
        for r in rules {
            self.rules.insert(r.rule_id.clone(), r);
        }
        self.recompute();
    }

    pub fn get(&self, rule_id: &str) -> Option<&AssociationRule> {
        self.rules.get(rule_id)
    }

    /// Rules in id order.
    pub fn rules(&self) -> impl Iterator<Item = &AssociationRule> {
        self.rules.values()
    }

    pub fn remove(&mut self, rule_id: &str) -> Option<AssociationRule> {
        self.rules.remove(rule_id)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&AssociationRule) -> bool) {
        self.rules.retain(|_, r| keep(r));
    }

    /// Rules in rank order.
    pub fn ranked(&self) -> Vec<&AssociationRule> {
        let mut v: Vec<&AssociationRule> = self.rules.values().collect();
        v.sort_by(|a, b| rank_cmp(a, b));
        v
    }

    pub fn homes(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rules.values().map(|r| r.home_id.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn active_for_home<'a>(&'a self, home_id: &'a str) -> impl Iterator<Item = &'a AssociationRule> + 'a {
        self.rules
            .values()
            .filter(move |r| r.home_id == home_id && r.state == RuleState::Active)
    }

    /// Marks a rule excluded by feedback. The state survives recomputes.
    pub fn exclude_by_feedback(&mut self, rule_id: &str) -> bool {
        match self.rules.get_mut(rule_id) {
            Some(r) => {
                r.state = RuleState::ExcludedByFeedback;
                true
            }
            None => false,
        }
    }

    fn below(&self, priority: f64) -> bool {
        self.threshold.is_some_and(|t| priority < t)
    }

    /// Recomputes every priority and every state that is not a feedback
    /// exclusion.
    pub fn recompute(&mut self) {
        let weights = self.weights;
        let policy = self.policy;
        let threshold = self.threshold;
        for r in self.rules.values_mut() {
            r.priority = compute_priority(r, &weights);
            if r.state == RuleState::ExcludedByFeedback {
                continue;
            }
            r.state = if policy.exclude_absent_actions && r.action_category == ActionCategory::Absent {
                RuleState::ExcludedByPolicy
            } else if threshold.is_some_and(|t| r.priority < t) {
                RuleState::BelowThreshold
            } else {
                RuleState::Active
            };
        }
    }

    /// Rules that are neither feedback-excluded nor below the threshold,
    /// ignoring the absent policy.
    pub fn count_passing_threshold(&self) -> usize {
        self.rules
            .values()
            .filter(|r| r.state != RuleState::ExcludedByFeedback && !self.below(r.priority))
            .count()
    }

    pub fn census(&self) -> StateCounts {
        let mut c = StateCounts::default();
        for r in self.rules.values() {
            c.add(r.state);
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<(), RuleError> {
        let io = |source| RuleError::Io {
            path: path.to_path_buf(),
            source,
        };
        let header = Header {
            format: RULEDB_FORMAT.to_string(),
            version: RULEDB_VERSION,
            weights: self.weights,
            threshold: self.threshold,
            policy: self.policy,
        };
        let mut buf = serde_json::to_string(&header).expect("header serializes");
        buf.push('\n');
        for r in self.rules.values() {
            buf.push_str(&serde_json::to_string(r).expect("rule serializes"));
            buf.push('\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp).map_err(io)?;
            f.write_all(buf.as_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, RuleError> {
        let io = |source| RuleError::Io {
            path: path.to_path_buf(),
            source,
        };
        let fmt_err = |line: usize, reason: String| RuleError::Format {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut lines = reader.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, l)) => serde_json::from_str(&l.map_err(io)?).map_err(|e| fmt_err(1, e.to_string()))?,
            None => return Err(fmt_err(1, "empty rule file".into())),
        };
        if header.format != RULEDB_FORMAT {
            return Err(fmt_err(1, format!("unknown format tag {:?}", header.format)));
        }
        if header.version != RULEDB_VERSION {
            return Err(fmt_err(1, format!("unsupported version {}", header.version)));
        }
        let mut db = RuleDb::new(header.weights, header.threshold, header.policy);
        for (i, l) in lines {
            let l = l.map_err(io)?;
            if l.trim().is_empty() {
                continue;
            }
            let r: AssociationRule = serde_json::from_str(&l).map_err(|e| fmt_err(i + 1, e.to_string()))?;
            if db.rules.insert(r.rule_id.clone(), r).is_some() {
                return Err(fmt_err(i + 1, "duplicate rule id".into()));
            }
        }
        Ok(db)
    }
}

//! Frequent sequential pattern mining over one home's event sequence.
//!
//! Counting discipline: an occurrence of a pattern is a strictly increasing
//! index tuple whose identities spell the pattern and whose consecutive
//! items are at most `max_gap` apart. Occurrences are deduplicated by their
//! first index, so the support count is the number of events that start at
//! least one occurrence. With `allow_overlap = false` the count is instead
//! the largest number of occurrences whose index spans are disjoint.
//! Both counts are anti-monotone under appending an item.

mod bench;
mod growth;
mod levelwise;
mod oracle;
mod support;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ActionCatalog, EventIdentity, EventRecord, Pattern, PatternItem, Timestamp};

pub use bench::{pattern_set_hash, run_benchmark, synthetic_sequence, BenchEntry, BenchError, BenchReport};
pub use support::{count_support, Occurrence};

pub(crate) use support::condition_without_action;

const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Error, PartialEq)]
pub enum MineError {
    #[error("invalid mining config: {0}")]
    Config(String),
    #[error("events of home {home} are not time-ordered at index {index}")]
    Unordered { home: String, index: usize },
    #[error("events from several homes in one sequence: {0} and {1}")]
    MixedHomes(String, String),
}

/// Denominator of the support fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportBase {
    /// count / number of events of the home
    #[default]
    Events,
    /// days with an occurrence / number of calendar days spanned
    Days,
}

impl std::str::FromStr for SupportBase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "events" => Ok(SupportBase::Events),
            "days" => Ok(SupportBase::Days),
            other => Err(format!("unknown support base {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub min_length: usize,
    pub max_length: usize,
    pub min_support: f64,
    #[serde(with = "crate::durfmt")]
    pub max_gap: Duration,
    pub allow_overlap: bool,
    pub support_base: SupportBase,
    /// Report only patterns with no reported one-item-longer supersequence
    /// of equal support count.
    pub closed_only: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            min_length: 3,
            max_length: 7,
            min_support: 0.001,
            max_gap: Duration::from_secs(600),
            allow_overlap: true,
            support_base: SupportBase::Events,
            closed_only: false,
        }
    }
}

impl MiningConfig {
    pub const MAX_LENGTH_LIMIT: usize = 32;

    pub fn validate(&self) -> Result<(), MineError> {
        if self.min_length < 3 {
            return Err(MineError::Config(format!(
                "min length must be at least 3, got {}",
                self.min_length
            )));
        }
        if self.max_length < self.min_length {
            return Err(MineError::Config(format!(
                "max length {} below min length {}",
                self.max_length, self.min_length
            )));
        }
        if self.max_length > Self::MAX_LENGTH_LIMIT {
            return Err(MineError::Config(format!(
                "max length must be at most {}",
                Self::MAX_LENGTH_LIMIT
            )));
        }
        if !(self.min_support > 0.0 && self.min_support <= 1.0) {
            return Err(MineError::Config(format!(
                "min support must be in (0, 1], got {}",
                self.min_support
            )));
        }
        Ok(())
    }

    pub(crate) fn gap_ms(&self) -> i64 {
        self.max_gap.as_millis().min(i64::MAX as u128) as i64
    }

    /// Smallest support value that passes `min_support` for a denominator.
    pub fn min_count(&self, denominator: u64) -> u64 {
        let raw = (self.min_support * denominator as f64 - 1e-9).ceil();
        (raw.max(1.0)) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Depth-first prefix projection.
    Growth,
    /// Breadth-first vertical id-list joins.
    Levelwise,
    /// Per-start enumeration of every index tuple.
    Oracle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Growth, Algorithm::Levelwise, Algorithm::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Growth => "growth",
            Algorithm::Levelwise => "levelwise",
            Algorithm::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?} (expected growth, levelwise or oracle)"))
    }
}

/// One home's events reduced to interned identities and millisecond times.
#[derive(Debug, Clone)]
pub struct HomeSequence {
    pub home_id: String,
    /// Identity id per event; ids index `alphabet`, which is sorted.
    pub ids: Vec<u32>,
    pub times: Vec<i64>,
    pub alphabet: Vec<EventIdentity>,
    /// Event indices per identity id, ascending.
    pub positions: Vec<Vec<u32>>,
    pub last_timestamp: Option<Timestamp>,
}

impl HomeSequence {
    pub fn from_events(home_id: &str, events: &[EventRecord]) -> Result<Self, MineError> {
        for (i, w) in events.windows(2).enumerate() {
            if w[1].timestamp < w[0].timestamp {
                return Err(MineError::Unordered {
                    home: home_id.to_string(),
                    index: i + 1,
                });
            }
        }
        if let Some(e) = events.iter().find(|e| &*e.home_id != home_id) {
            return Err(MineError::MixedHomes(home_id.to_string(), e.home_id.to_string()));
        }
        let set: BTreeSet<EventIdentity> = events.iter().map(|e| e.identity()).collect();
        let alphabet: Vec<EventIdentity> = set.into_iter().collect();
        let lookup: std::collections::HashMap<&EventIdentity, u32> = alphabet
            .iter()
            .enumerate()
            .map(|(i, id)| (id, i as u32))
            .collect();
        let mut ids = Vec::with_capacity(events.len());
        let mut positions = vec![Vec::new(); alphabet.len()];
        for (i, e) in events.iter().enumerate() {
            let id = lookup[&e.identity()];
            ids.push(id);
            positions[id as usize].push(i as u32);
        }
        Ok(Self {
            home_id: home_id.to_string(),
            ids,
            times: events.iter().map(|e| e.timestamp.timestamp_millis()).collect(),
            alphabet,
            positions,
            last_timestamp: events.last().map(|e| e.timestamp),
        })
    }

    /// Builds a sequence straight from identity ids and times, for tests
    /// and synthetic benchmarks. Identity `k` becomes zone `z`, subject
    /// `k`, name `e{k}`.
    pub fn from_ids(home_id: &str, ids: &[u32], times_ms: &[i64]) -> Self {
        assert_eq!(ids.len(), times_ms.len());
        assert!(times_ms.windows(2).all(|w| w[0] <= w[1]), "times must be sorted");
        let events: Vec<EventRecord> = ids
            .iter()
            .zip(times_ms)
            .map(|(&k, &t)| {
                EventRecord::new(
                    chrono::DateTime::from_timestamp_millis(t).expect("time in range"),
                    home_id,
                    "z",
                    &format!("{k:05}"),
                    &format!("e{k}"),
                    crate::domain::EventSource::ButtonClick,
                )
            })
            .collect();
        Self::from_events(home_id, &events).expect("ordered single-home events")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id_of(&self, identity: &EventIdentity) -> Option<u32> {
        self.alphabet.binary_search(identity).ok().map(|i| i as u32)
    }

    pub(crate) fn day(&self, index: u32) -> i64 {
        self.times[index as usize].div_euclid(DAY_MS)
    }

    pub(crate) fn day_span(&self) -> u64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => (b.div_euclid(DAY_MS) - a.div_euclid(DAY_MS) + 1) as u64,
            _ => 0,
        }
    }

    pub fn support_denominator(&self, base: SupportBase) -> u64 {
        match base {
            SupportBase::Events => self.len() as u64,
            SupportBase::Days => self.day_span(),
        }
    }
}

/// A mined pattern before classification: identity ids plus counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrequentSequence {
    pub ids: Vec<u32>,
    /// Support count under the configured counting discipline.
    pub count: u64,
    /// Value compared against the threshold (equals `count` for the
    /// events base, number of days for the days base).
    pub value: u64,
}

/// Support measured from the occurrence spans of one pattern.
///
/// `spans` holds one `(start, earliest end)` per start index, ascending by
/// start.
pub(crate) fn measure(seq: &HomeSequence, cfg: &MiningConfig, spans: &[(u32, u32)]) -> (u64, u64) {
    let count = if cfg.allow_overlap {
        spans.len() as u64
    } else {
        disjoint_spans(spans)
    };
    let value = match cfg.support_base {
        SupportBase::Events => count,
        SupportBase::Days => {
            let mut days: Vec<i64> = spans.iter().map(|&(s, _)| seq.day(s)).collect();
            days.dedup();
            days.len() as u64
        }
    };
    (count, value)
}

/// Largest set of pairwise disjoint `[start, end]` spans (earliest-end
/// greedy).
pub(crate) fn disjoint_spans(spans: &[(u32, u32)]) -> u64 {
    let mut by_end: Vec<(u32, u32)> = spans.iter().map(|&(s, e)| (e, s)).collect();
    by_end.sort_unstable();
    let mut taken = 0;
    let mut last_end: Option<u32> = None;
    for (e, s) in by_end {
        if last_end.is_none_or(|l| s > l) {
            taken += 1;
            last_end = Some(e);
        }
    }
    taken
}

/// Mines frequent sequences (all lengths in `[min_length, max_length]`).
pub fn mine_sequences(
    seq: &HomeSequence,
    cfg: &MiningConfig,
    algo: Algorithm,
) -> Result<Vec<FrequentSequence>, MineError> {
    cfg.validate()?;
    if seq.is_empty() {
        return Ok(Vec::new());
    }
    let mut found = match algo {
        Algorithm::Growth => growth::mine(seq, cfg),
        Algorithm::Levelwise => levelwise::mine(seq, cfg),
        Algorithm::Oracle => oracle::mine(seq, cfg),
    };
    found.sort_by(|a, b| a.ids.cmp(&b.ids));
    if cfg.closed_only {
        found = closed_reduction(found);
    }
    Ok(found)
}

fn is_subsequence(short: &[u32], long: &[u32]) -> bool {
    let mut it = long.iter();
    short.iter().all(|x| it.any(|y| y == x))
}

/// Drops every sequence that has a reported supersequence one item longer
/// with the same support count.
pub fn closed_reduction(found: Vec<FrequentSequence>) -> Vec<FrequentSequence> {
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, f) in found.iter().enumerate() {
        by_len.entry(f.ids.len()).or_default().push(i);
    }
    let keep: Vec<bool> = found
        .iter()
        .map(|f| {
            by_len.get(&(f.ids.len() + 1)).is_none_or(|longer| {
                !longer
                    .iter()
                    .any(|&j| found[j].count == f.count && is_subsequence(&f.ids, &found[j].ids))
            })
        })
        .collect();
    found
        .into_iter()
        .zip(keep)
        .filter_map(|(f, k)| k.then_some(f))
        .collect()
}

/// Mines one home and classifies every item. `first_mined` is the time of
/// the last mined event so results are reproducible.
pub fn mine_patterns(
    seq: &HomeSequence,
    cfg: &MiningConfig,
    algo: Algorithm,
    catalog: &ActionCatalog,
) -> Result<Vec<Pattern>, MineError> {
    let found = mine_sequences(seq, cfg, algo)?;
    let denominator = seq.support_denominator(cfg.support_base).max(1);
    let mined = seq
        .last_timestamp
        .unwrap_or(chrono::DateTime::UNIX_EPOCH);
    let mut patterns: Vec<Pattern> = found
        .into_iter()
        .map(|f| Pattern {
            home_id: seq.home_id.clone(),
            items: f
                .ids
                .iter()
                .map(|&id| {
                    let identity = seq.alphabet[id as usize].clone();
                    let class = catalog.classify_name(&identity.event_name);
                    PatternItem { identity, class }
                })
                .collect(),
            support_count: f.count,
            support: f.value as f64 / denominator as f64,
            first_mined: mined,
        })
        .collect();
    patterns.sort_by(|a, b| {
        b.support_count
            .cmp(&a.support_count)
            .then_with(|| a.items.iter().map(|i| &i.identity).cmp(b.items.iter().map(|i| &i.identity)))
    });
    Ok(patterns)
}

/// Keeps patterns with at least three events, one action and two normal
/// events.
pub fn filter_relevant(patterns: Vec<Pattern>) -> Vec<Pattern> {
    patterns.into_iter().filter(Pattern::is_relevant).collect()
}

/// Re-classifies items with `catalog`, then filters.
pub fn filter_relevant_with(patterns: Vec<Pattern>, catalog: &ActionCatalog) -> Vec<Pattern> {
    patterns
        .into_iter()
        .map(|mut p| {
            for item in &mut p.items {
                item.class = catalog.classify_name(&item.identity.event_name);
            }
            p
        })
        .filter(Pattern::is_relevant)
        .collect()
}

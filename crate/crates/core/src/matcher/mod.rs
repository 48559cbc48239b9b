//! Per-event rule matching.
//!
//! Every active rule owns a set of automaton instances, at most one per
//! matched-position mask. For one incoming event at time `t` the engine:
//!
//! 0. fires completed instances whose action-wait deadline lies before `t`
//!    (grouped by deadline) and drops partial instances idle for more than
//!    `max_gap`;
//! 1. resolves the remaining completed instances with this event: the
//!    action suppresses them, anything else turns them into candidates;
//! 2. advances partial instances, most advanced first, a moved instance
//!    replacing whatever occupied its new slot;
//! 3. spawns a fresh instance when the event matches a first item;
//! 4. reduces each candidate group to one recommendation: rules in
//!    cooldown are skipped and the best ranked rule wins.

mod naive;

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    recommendation_text, AssociationRule, EventIdentity, EventRecord, Recommendation, RecommendationStatus,
    Resolution, Timestamp, Topologies,
};
use crate::rules::{rank_cmp, RuleDb};

pub use naive::naive_replay;

/// Longest condition the mask representation supports.
pub const MAX_CONDITION: usize = 63;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("unknown home {0}")]
    UnknownHome(String),
    #[error("event at {at} is older than the last event of home {home}")]
    Unordered { home: String, at: String },
    #[error("rule {0} has a condition longer than {MAX_CONDITION} items")]
    ConditionTooLong(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    #[serde(with = "crate::durfmt")]
    pub action_wait: Duration,
    #[serde(with = "crate::durfmt")]
    pub max_gap: Duration,
    #[serde(with = "crate::durfmt")]
    pub cooldown: Duration,
    /// Condition items may arrive in any order.
    pub order_insensitive: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            action_wait: Duration::from_secs(300),
            max_gap: Duration::from_secs(600),
            cooldown: Duration::from_secs(3600),
            order_insensitive: false,
        }
    }
}

fn ms(d: Duration) -> i64 {
    d.as_millis().min(i64::MAX as u128) as i64
}

pub(crate) fn to_ts(ms: i64) -> Timestamp {
    chrono::DateTime::from_timestamp_millis(ms).expect("time in range")
}

/// Recommendation id for the `seq`-th recommendation of a home.
pub fn recommendation_id(home_id: &str, seq: u64) -> String {
    format!("{home_id}-{seq:06}")
}

/// Builds the delivered recommendation for a winning rule.
pub(crate) fn build_recommendation(
    rule: &AssociationRule,
    id: String,
    created_ms: i64,
    resolution: Resolution,
    trigger_events: Vec<EventRecord>,
    topologies: &Topologies,
) -> Recommendation {
    let created_at = to_ts(created_ms);
    let (subject, room) = topologies.names(&rule.home_id, &rule.action);
    Recommendation {
        recommendation_id: id,
        home_id: rule.home_id.clone(),
        rule_id: rule.rule_id.clone(),
        action: rule.action.clone(),
        text: recommendation_text(&rule.action, subject, room, created_at),
        trigger_events,
        created_at,
        resolution,
        status: RecommendationStatus::Pending,
    }
}

struct CompiledRule {
    rule: AssociationRule,
    condition: Vec<u32>,
    action: u32,
    full: u64,
    enabled: bool,
}

#[derive(Debug, Clone)]
struct Instance {
    mask: u64,
    last_ms: i64,
    complete_ms: Option<i64>,
    matched: Vec<EventRecord>,
}

struct Candidate {
    rule: usize,
    matched: Vec<EventRecord>,
}

struct HomeState {
    rules: Vec<CompiledRule>,
    idents: HashMap<EventIdentity, u32>,
    /// Live instances per rule, keyed by mask.
    live: Vec<BTreeMap<u64, Instance>>,
    /// Rule id -> time of its last recommendation.
    cooldown: HashMap<String, i64>,
    next_seq: u64,
    last_ms: Option<i64>,
}

impl HomeState {
    fn new(rules: Vec<&AssociationRule>, next_seq: u64) -> Result<Self, MatchError> {
        let mut idents: HashMap<EventIdentity, u32> = HashMap::new();
        let mut intern = |id: &EventIdentity| {
            let n = idents.len() as u32;
            *idents.entry(id.clone()).or_insert(n)
        };
        let mut compiled = Vec::new();
        for r in rules {
            if r.condition.len() > MAX_CONDITION {
                return Err(MatchError::ConditionTooLong(r.rule_id.clone()));
            }
            let condition: Vec<u32> = r.condition.iter().map(&mut intern).collect();
            compiled.push(CompiledRule {
                condition,
                action: intern(&r.action),
                full: (1u64 << r.condition.len()) - 1,
                enabled: true,
                rule: r.clone(),
            });
        }
        Ok(Self {
            live: (0..compiled.len()).map(|_| BTreeMap::new()).collect(),
            rules: compiled,
            idents,
            cooldown: HashMap::new(),
            next_seq,
            last_ms: None,
        })
    }
}

/// Live matching state for any number of homes.
pub struct Matcher {
    cfg: MatcherConfig,
    topologies: Topologies,
    homes: BTreeMap<String, HomeState>,
}

impl Matcher {
    /// Registers every home that has rules in `db`, with its active rules.
    pub fn new(db: &RuleDb, cfg: MatcherConfig, topologies: Topologies) -> Result<Self, MatchError> {
        let mut m = Self {
            cfg,
            topologies,
            homes: BTreeMap::new(),
        };
        for home in db.homes() {
            m.add_home(&home, db, 1)?;
        }
        Ok(m)
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.cfg
    }

    pub fn has_home(&self, home_id: &str) -> bool {
        self.homes.contains_key(home_id)
    }

    /// (Re)registers a home with the active rules of `db`, dropping its
    /// live instances. Cooldowns and the id counter are kept.
    pub fn add_home(&mut self, home_id: &str, db: &RuleDb, next_seq: u64) -> Result<(), MatchError> {
        let mut state = HomeState::new(db.active_for_home(home_id).collect(), next_seq)?;
        if let Some(old) = self.homes.remove(home_id) {
            state.cooldown = old.cooldown;
            state.next_seq = old.next_seq.max(next_seq);
            state.last_ms = old.last_ms;
        }
        self.homes.insert(home_id.to_string(), state);
        Ok(())
    }

    /// Re-reads active rules for every registered home and every home of
    /// `db`.
    pub fn reload(&mut self, db: &RuleDb) -> Result<(), MatchError> {
        let mut homes: Vec<String> = self.homes.keys().cloned().collect();
        homes.extend(db.homes());
        homes.sort();
        homes.dedup();
        for h in homes {
            self.add_home(&h, db, 1)?;
        }
        Ok(())
    }

    /// Stops matching a rule immediately and drops its instances.
    pub fn disable_rule(&mut self, rule_id: &str) -> bool {
        for home in self.homes.values_mut() {
            if let Some(i) = home.rules.iter().position(|r| r.rule.rule_id == rule_id) {
                home.rules[i].enabled = false;
                home.live[i].clear();
                return true;
            }
        }
        false
    }

    pub fn live_instances(&self, home_id: &str) -> usize {
        self.homes.get(home_id).map_or(0, |h| h.live.iter().map(BTreeMap::len).sum())
    }

    pub fn active_rules(&self, home_id: &str) -> usize {
        self.homes
            .get(home_id)
            .map_or(0, |h| h.rules.iter().filter(|r| r.enabled).count())
    }

    /// Feeds one event and returns the recommendations it releases.
    pub fn on_event(&mut self, e: &EventRecord) -> Result<Vec<Recommendation>, MatchError> {
        let t = e.timestamp.timestamp_millis();
        let (gap, wait, cooldown, unordered) = (
            ms(self.cfg.max_gap),
            ms(self.cfg.action_wait),
            ms(self.cfg.cooldown),
            self.cfg.order_insensitive,
        );
        let topologies = &self.topologies;
        let home = self
            .homes
            .get_mut(&*e.home_id)
            .ok_or_else(|| MatchError::UnknownHome(e.home_id.to_string()))?;
        if home.last_ms.is_some_and(|l| t < l) {
            return Err(MatchError::Unordered {
                home: e.home_id.to_string(),
                at: crate::timefmt::format(&e.timestamp),
            });
        }
        home.last_ms = Some(t);

        let mut out = expire_home(home, t, gap, wait, cooldown, false, topologies);

        let ident = home.idents.get(&e.identity()).copied();
        let mut candidates = Vec::new();
        for (r, rule) in home.rules.iter().enumerate() {
            let live = &mut home.live[r];
            if !rule.enabled || live.is_empty() {
                continue;
            }
            if let Some(done) = live.remove(&rule.full) {
                if ident != Some(rule.action) {
                    candidates.push(Candidate {
                        rule: r,
                        matched: done.matched,
                    });
                }
            }
            let Some(k) = ident else {
                continue;
            };
            if live.is_empty() {
                continue;
            }
            let mut order: Vec<u64> = live.keys().copied().collect();
            order.sort_by(|a, b| b.count_ones().cmp(&a.count_ones()).then(a.cmp(b)));
            for mask in order {
                let Some(bit) = next_bit(&rule.condition, mask, k, unordered) else {
                    continue;
                };
                let mut inst = live.remove(&mask).expect("listed mask is live");
                inst.mask = mask | bit;
                inst.last_ms = t;
                inst.matched.push(e.clone());
                if inst.mask == rule.full {
                    inst.complete_ms = Some(t);
                }
                live.insert(inst.mask, inst);
            }
        }
        if let Some(k) = ident {
            for (r, rule) in home.rules.iter().enumerate() {
                if !rule.enabled {
                    continue;
                }
                if let Some(bit) = spawn_bit(&rule.condition, k, unordered) {
                    home.live[r].insert(
                        bit,
                        Instance {
                            mask: bit,
                            last_ms: t,
                            complete_ms: None,
                            matched: vec![e.clone()],
                        },
                    );
                }
            }
        }
        out.extend(select(home, candidates, t, Resolution::NextEvent, cooldown, topologies));
        Ok(out)
    }

    /// Applies the clock: completed instances whose deadline is before
    /// `now` fire, partial instances idle longer than `max_gap` are
    /// dropped.
    pub fn expire(&mut self, home_id: &str, now: Timestamp) -> Result<Vec<Recommendation>, MatchError> {
        let (gap, wait, cooldown) = (ms(self.cfg.max_gap), ms(self.cfg.action_wait), ms(self.cfg.cooldown));
        let topologies = &self.topologies;
        let home = self
            .homes
            .get_mut(home_id)
            .ok_or_else(|| MatchError::UnknownHome(home_id.to_string()))?;
        Ok(expire_home(home, now.timestamp_millis(), gap, wait, cooldown, false, topologies))
    }

    /// End of stream: every completed instance fires at its deadline and
    /// partial instances are dropped.
    pub fn finish(&mut self, home_id: &str) -> Result<Vec<Recommendation>, MatchError> {
        let (gap, wait, cooldown) = (ms(self.cfg.max_gap), ms(self.cfg.action_wait), ms(self.cfg.cooldown));
        let topologies = &self.topologies;
        let home = self
            .homes
            .get_mut(home_id)
            .ok_or_else(|| MatchError::UnknownHome(home_id.to_string()))?;
        Ok(expire_home(home, i64::MAX, gap, wait, cooldown, true, topologies))
    }

    pub fn finish_all(&mut self) -> Vec<Recommendation> {
        let homes: Vec<String> = self.homes.keys().cloned().collect();
        homes
            .iter()
            .flat_map(|h| self.finish(h).expect("registered home"))
            .collect()
    }
}

fn next_bit(condition: &[u32], mask: u64, k: u32, unordered: bool) -> Option<u64> {
    if unordered {
        condition
            .iter()
            .enumerate()
            .find(|&(i, &c)| c == k && mask & (1 << i) == 0)
            .map(|(i, _)| 1 << i)
    } else {
        let pos = mask.count_ones() as usize;
        (condition.get(pos) == Some(&k)).then_some(1 << pos)
    }
}

fn spawn_bit(condition: &[u32], k: u32, unordered: bool) -> Option<u64> {
    if unordered {
        condition.iter().position(|&c| c == k).map(|i| 1 << i)
    } else {
        (condition[0] == k).then_some(1)
    }
}

fn expire_home(
    home: &mut HomeState,
    now: i64,
    gap: i64,
    wait: i64,
    cooldown: i64,
    flush: bool,
    topologies: &Topologies,
) -> Vec<Recommendation> {
    let mut due: BTreeMap<i64, Vec<Candidate>> = BTreeMap::new();
    for (r, rule) in home.rules.iter().enumerate() {
        let live = &mut home.live[r];
        if !rule.enabled || live.is_empty() {
            continue;
        }
        live.retain(|_, inst| match inst.complete_ms {
            Some(c) => {
                let deadline = c.saturating_add(wait);
                if flush || deadline < now {
                    due.entry(deadline).or_default().push(Candidate {
                        rule: r,
                        matched: std::mem::take(&mut inst.matched),
                    });
                    false
                } else {
                    true
                }
            }
            None => !flush && now - inst.last_ms <= gap,
        });
    }
    let mut out = Vec::new();
    for (deadline, group) in due {
        out.extend(select(home, group, deadline, Resolution::Timeout, cooldown, topologies));
    }
    out
}

fn select(
    home: &mut HomeState,
    candidates: Vec<Candidate>,
    at: i64,
    resolution: Resolution,
    cooldown: i64,
    topologies: &Topologies,
) -> Option<Recommendation> {
    let rules = &home.rules;
    let cool = &home.cooldown;
    let winner = candidates
        .into_iter()
        .filter(|c| {
            cool.get(&rules[c.rule].rule.rule_id)
                .is_none_or(|&last| at - last >= cooldown)
        })
        .min_by(|a, b| rank_cmp(&rules[a.rule].rule, &rules[b.rule].rule))?;
    let rule = &home.rules[winner.rule].rule;
    home.cooldown.insert(rule.rule_id.clone(), at);
    let id = recommendation_id(&rule.home_id, home.next_seq);
    home.next_seq += 1;
    Some(build_recommendation(rule, id, at, resolution, winner.matched, topologies))
}

/// Replays a time-ordered stream from scratch and flushes at the end.
pub fn replay(
    events: &[EventRecord],
    db: &RuleDb,
    cfg: MatcherConfig,
    topologies: &Topologies,
) -> Result<Vec<Recommendation>, MatchError> {
    let mut m = Matcher::new(db, cfg, topologies.clone())?;
    let mut out = Vec::new();
    for e in events {
        out.extend(m.on_event(e)?);
    }
    out.extend(m.finish_all());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionCategory, EventSource, RuleState};

    fn ident(n: &str) -> EventIdentity {
        EventIdentity::new("z", n, n)
    }

    fn rule(id: &str, cond: &[&str], action: &str, priority: f64) -> AssociationRule {
        AssociationRule {
            rule_id: id.into(),
            home_id: "h".into(),
            condition: cond.iter().map(|c| ident(c)).collect(),
            action: ident(action),
            action_category: ActionCategory::Off,
            action_position: cond.len(),
            source_pattern: vec![],
            confidence: priority,
            pattern_support: 0.1,
            pattern_support_count: 3,
            pattern_length: cond.len() + 1,
            mined_date: chrono::DateTime::UNIX_EPOCH,
            priority,
            state: RuleState::Active,
        }
    }

    fn db(rules: Vec<AssociationRule>) -> RuleDb {
        let mut db = RuleDb::default();
        db.insert_all(rules);
        db
    }

    fn ev(secs: i64, n: &str) -> EventRecord {
        EventRecord::new(
            chrono::DateTime::from_timestamp(secs, 0).unwrap(),
            "h",
            "z",
            n,
            n,
            EventSource::ButtonClick,
        )
    }

    fn run(db: &RuleDb, events: &[EventRecord], cfg: MatcherConfig) -> Vec<Recommendation> {
        let out = replay(events, db, cfg, &Topologies::default()).unwrap();
        let naive = naive_replay(events, db, cfg, &Topologies::default());
        assert_eq!(out, naive);
        out
    }

    #[test]
    fn action_suppresses() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        let recs = run(&db, &[ev(0, "a"), ev(10, "b"), ev(20, "c")], MatcherConfig::default());
        assert!(recs.is_empty());
    }

    #[test]
    fn other_event_recommends() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        let recs = run(&db, &[ev(0, "a"), ev(10, "b"), ev(20, "d")], MatcherConfig::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].rule_id, "r1");
        assert_eq!(recs[0].resolution, Resolution::NextEvent);
        assert_eq!(recs[0].created_at.timestamp(), 20);
        assert_eq!(recs[0].recommendation_id, "h-000001");
        assert_eq!(recs[0].trigger_events.len(), 2);
    }

    #[test]
    fn empty_stream() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        assert!(run(&db, &[], MatcherConfig::default()).is_empty());
    }

    #[test]
    fn timeout_fires_at_deadline() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        let recs = run(&db, &[ev(0, "a"), ev(10, "b"), ev(5000, "c")], MatcherConfig::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].resolution, Resolution::Timeout);
        assert_eq!(recs[0].created_at.timestamp(), 310);
    }

    #[test]
    fn conflict_keeps_best_rule() {
        let db = db(vec![rule("lo", &["a", "b"], "c", 0.4), rule("hi", &["x", "b"], "y", 0.9)]);
        let recs = run(
            &db,
            &[ev(0, "a"), ev(1, "x"), ev(2, "b"), ev(3, "q")],
            MatcherConfig::default(),
        );
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].rule_id, "hi");
    }

    #[test]
    fn gap_drops_partial() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        let recs = run(&db, &[ev(0, "a"), ev(601, "b"), ev(620, "d")], MatcherConfig::default());
        assert!(recs.is_empty());
    }

    #[test]
    fn cooldown_blocks_repeat() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        let evs = [
            ev(0, "a"),
            ev(1, "b"),
            ev(2, "d"),
            ev(100, "a"),
            ev(101, "b"),
            ev(102, "d"),
            ev(4000, "a"),
            ev(4001, "b"),
            ev(4002, "d"),
        ];
        let recs = run(&db, &evs, MatcherConfig::default());
        let at: Vec<i64> = recs.iter().map(|r| r.created_at.timestamp()).collect();
        assert_eq!(at, [2, 4002]);
    }

    #[test]
    fn unordered_mode_accepts_swapped_condition() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        let evs = [ev(0, "b"), ev(10, "a"), ev(20, "d")];
        assert!(run(&db, &evs, MatcherConfig::default()).is_empty());
        let cfg = MatcherConfig {
            order_insensitive: true,
            ..Default::default()
        };
        assert_eq!(run(&db, &evs, cfg).len(), 1);
    }

    #[test]
    fn expire_is_idempotent() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        let mut m = Matcher::new(&db, MatcherConfig::default(), Topologies::default()).unwrap();
        m.on_event(&ev(0, "a")).unwrap();
        m.on_event(&ev(10, "b")).unwrap();
        let now = chrono::DateTime::from_timestamp(400, 0).unwrap();
        assert_eq!(m.expire("h", now).unwrap().len(), 1);
        assert!(m.expire("h", now).unwrap().is_empty());
        assert_eq!(m.live_instances("h"), 0);
    }

    #[test]
    fn unknown_home_and_disorder() {
        let db = db(vec![rule("r1", &["a", "b"], "c", 1.0)]);
        let mut m = Matcher::new(&db, MatcherConfig::default(), Topologies::default()).unwrap();
        let mut other = ev(0, "a");
        other.home_id = "elsewhere".into();
        assert_eq!(m.on_event(&other), Err(MatchError::UnknownHome("elsewhere".into())));
        m.on_event(&ev(10, "a")).unwrap();
        assert!(matches!(m.on_event(&ev(5, "a")), Err(MatchError::Unordered { .. })));
    }

    #[test]
    fn inactive_rules_never_fire() {
        let mut r = rule("r1", &["a", "b"], "c", 1.0);
        r.state = RuleState::BelowThreshold;
        let mut db = RuleDb::new(Default::default(), None, Default::default());
        db.insert_all([r]);
        db.exclude_by_feedback("r1");
        assert!(run(&db, &[ev(0, "a"), ev(1, "b"), ev(2, "d")], MatcherConfig::default()).is_empty());
    }
}

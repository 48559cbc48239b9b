//! Reference matcher: every rule is simulated on its own over the whole
//! stream, the candidate recommendations of all rules are then merged and
//! reduced group by group. Slow and simple.

use std::collections::BTreeMap;

use super::{build_recommendation, recommendation_id, ms, MatcherConfig};
use crate::domain::{AssociationRule, EventIdentity, EventRecord, Recommendation, Resolution, Topologies};
use crate::rules::{rank_cmp, RuleDb};

/// Orders candidate groups: events at `t` come before deadlines at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    at: i64,
    is_timeout: bool,
    event: usize,
}

struct Slot {
    matched: Vec<bool>,
    last: i64,
    done: Option<i64>,
    events: Vec<EventRecord>,
}

impl Slot {
    fn count(&self) -> usize {
        self.matched.iter().filter(|m| **m).count()
    }

    fn mask_value(&self) -> u64 {
        self.matched
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| 1u64 << i)
            .sum()
    }
}

fn candidates_of(
    rule: &AssociationRule,
    stream: &[(usize, &EventRecord)],
    cfg: &MatcherConfig,
) -> Vec<(GroupKey, Vec<EventRecord>)> {
    let gap = ms(cfg.max_gap);
    let wait = ms(cfg.action_wait);
    let x: &[EventIdentity] = &rule.condition;
    let mut slots: Vec<Slot> = Vec::new();
    let mut out = Vec::new();

    for &(index, e) in stream {
        let t = e.timestamp.timestamp_millis();
        let id = e.identity();

        // deadlines and idle partial instances
        let mut kept = Vec::new();
        for s in slots.drain(..) {
            match s.done {
                Some(c) if c + wait < t => out.push((
                    GroupKey { at: c + wait, is_timeout: true, event: 0 },
                    s.events,
                )),
                Some(_) => kept.push(s),
                None if t - s.last <= gap => kept.push(s),
                None => {}
            }
        }
        slots = kept;

        // the event resolves completed instances
        let mut kept = Vec::new();
        for s in slots.drain(..) {
            if s.done.is_some() {
                if id != rule.action {
                    out.push((GroupKey { at: t, is_timeout: false, event: index }, s.events));
                }
            } else {
                kept.push(s);
            }
        }
        slots = kept;

        // advance, most matched first, ties by mask value
        slots.sort_by(|a, b| b.count().cmp(&a.count()).then(a.mask_value().cmp(&b.mask_value())));
        let mut next: Vec<Slot> = Vec::new();
        for mut s in slots.drain(..) {
            let pos = if cfg.order_insensitive {
                (0..x.len()).find(|&i| !s.matched[i] && x[i] == id)
            } else {
                let p = s.count();
                (p < x.len() && x[p] == id).then_some(p)
            };
            if let Some(p) = pos {
                s.matched[p] = true;
                s.last = t;
                s.events.push(e.clone());
                if s.count() == x.len() {
                    s.done = Some(t);
                }
            }
            let v = s.mask_value();
            next.retain(|o| o.mask_value() != v);
            next.push(s);
        }
        slots = next;

        // spawn
        let first = if cfg.order_insensitive {
            x.iter().position(|c| *c == id)
        } else {
            (x[0] == id).then_some(0)
        };
        if let Some(p) = first {
            let mut matched = vec![false; x.len()];
            matched[p] = true;
            let fresh = Slot {
                matched,
                last: t,
                done: None,
                events: vec![e.clone()],
            };
            let v = fresh.mask_value();
            slots.retain(|o| o.mask_value() != v);
            slots.push(fresh);
        }
    }
    for s in slots {
        if let Some(c) = s.done {
            out.push((GroupKey { at: c + wait, is_timeout: true, event: 0 }, s.events));
        }
    }
    out
}

/// Brute-force replay. Output is grouped by home (homes in name order),
/// each home's recommendations in emission order.
pub fn naive_replay(
    events: &[EventRecord],
    db: &RuleDb,
    cfg: MatcherConfig,
    topologies: &Topologies,
) -> Vec<Recommendation> {
    let cooldown = ms(cfg.cooldown);
    let mut out = Vec::new();
    for home in db.homes() {
        let stream: Vec<(usize, &EventRecord)> = events
            .iter()
            .enumerate()
            .filter(|(_, e)| *e.home_id == *home)
            .collect();
        let rules: Vec<&AssociationRule> = db.active_for_home(&home).collect();
        let mut groups: BTreeMap<GroupKey, Vec<(usize, Vec<EventRecord>)>> = BTreeMap::new();
        for (r, rule) in rules.iter().enumerate() {
            for (key, trig) in candidates_of(rule, &stream, &cfg) {
                groups.entry(key).or_default().push((r, trig));
            }
        }
        let mut last_sent: BTreeMap<&str, i64> = BTreeMap::new();
        let mut seq = 1;
        for (key, group) in groups {
            let mut eligible: Vec<(usize, Vec<EventRecord>)> = group
                .into_iter()
                .filter(|(r, _)| {
                    last_sent
                        .get(rules[*r].rule_id.as_str())
                        .is_none_or(|&l| key.at - l >= cooldown)
                })
                .collect();
            if eligible.is_empty() {
                continue;
            }
            eligible.sort_by(|a, b| rank_cmp(rules[a.0], rules[b.0]));
            let (r, trig) = eligible.swap_remove(0);
            let rule = rules[r];
            last_sent.insert(&rule.rule_id, key.at);
            let resolution = if key.is_timeout {
                Resolution::Timeout
            } else {
                Resolution::NextEvent
            };
            out.push(build_recommendation(
                rule,
                recommendation_id(&home, seq),
                key.at,
                resolution,
                trig,
                topologies,
            ));
            seq += 1;
        }
    }
    out
}

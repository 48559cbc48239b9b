//! Brute-force reference miner.
//!
//! Enumerates every gap-respecting index tuple from every start event, with
//! no pruning, and measures support from the enumerated spans. Work is
//! sharded by the identity of the first event to bound memory.

use std::collections::{BTreeSet, HashMap};

use super::{FrequentSequence, HomeSequence, MiningConfig, SupportBase};

struct Shard<'a> {
    seq: &'a HomeSequence,
    cfg: &'a MiningConfig,
    gap: i64,
    /// pattern -> `(start, smallest end seen from that start)`, starts ascending
    seen: HashMap<Vec<u32>, Vec<(u32, u32)>>,
    pattern: Vec<u32>,
}

impl Shard<'_> {
    fn walk(&mut self, start: u32, cur: usize) {
        if self.pattern.len() >= self.cfg.min_length {
            let entry = match self.seen.get_mut(self.pattern.as_slice()) {
                Some(e) => e,
                None => self.seen.entry(self.pattern.clone()).or_default(),
            };
            match entry.last_mut() {
                Some((s, e)) if *s == start => *e = (*e).min(cur as u32),
                _ => entry.push((start, cur as u32)),
            }
        }
        if self.pattern.len() == self.cfg.max_length {
            return;
        }
        let times = &self.seq.times;
        let mut j = cur + 1;
        while j < self.seq.len() && times[j] - times[cur] <= self.gap {
            self.pattern.push(self.seq.ids[j]);
            self.walk(start, j);
            self.pattern.pop();
            j += 1;
        }
    }
}

/// Maximum number of pairwise disjoint spans, by dynamic programming over
/// spans sorted by end.
fn max_disjoint(spans: &[(u32, u32)]) -> u64 {
    let mut by_end: Vec<(u32, u32)> = spans.iter().map(|&(s, e)| (e, s)).collect();
    by_end.sort_unstable();
    let mut best = vec![0u64; by_end.len() + 1];
    for i in 0..by_end.len() {
        let (_, s) = by_end[i];
        // spans ending strictly before this one starts
        let fits = by_end[..i].partition_point(|&(e, _)| e < s);
        best[i + 1] = best[i].max(best[fits] + 1);
    }
    best[by_end.len()]
}

pub(super) fn mine(seq: &HomeSequence, cfg: &MiningConfig) -> Vec<FrequentSequence> {
    let gap = cfg.gap_ms();
    let denominator = match cfg.support_base {
        SupportBase::Events => seq.len() as u64,
        SupportBase::Days => seq.day_span(),
    };
    let threshold = cfg.min_count(denominator);
    let mut out = Vec::new();
    for first in 0..seq.alphabet.len() as u32 {
        let mut shard = Shard {
            seq,
            cfg,
            gap,
            seen: HashMap::new(),
            pattern: Vec::new(),
        };
        for &start in &seq.positions[first as usize] {
            shard.pattern.push(first);
            shard.walk(start, start as usize);
            shard.pattern.pop();
        }
        for (ids, spans) in shard.seen {
            let count = if cfg.allow_overlap {
                spans.len() as u64
            } else {
                max_disjoint(&spans)
            };
            let value = match cfg.support_base {
                SupportBase::Events => count,
                SupportBase::Days => spans
                    .iter()
                    .map(|&(s, _)| seq.times[s as usize].div_euclid(86_400_000))
                    .collect::<BTreeSet<_>>()
                    .len() as u64,
            };
            if value >= threshold {
                out.push(FrequentSequence { ids, count, value });
            }
        }
    }
    out
}

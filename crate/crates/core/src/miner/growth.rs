//! Depth-first prefix projection with a per-step gap bound.
//!
//! The projection of a prefix keeps, for every start index, all end
//! indices reachable by some occurrence. All of them matter: a later end
//! opens a later gap window.

use std::collections::HashMap;

use super::{measure, FrequentSequence, HomeSequence, MiningConfig};

#[derive(Debug, Default)]
struct Projection {
    starts: Vec<u32>,
    /// `ends[offsets[g]..offsets[g + 1]]` belong to `starts[g]`.
    offsets: Vec<u32>,
    ends: Vec<u32>,
}

impl Projection {
    fn groups(&self) -> usize {
        self.starts.len()
    }

    fn ends_of(&self, g: usize) -> &[u32] {
        &self.ends[self.offsets[g] as usize..self.offsets[g + 1] as usize]
    }

    fn push(&mut self, start: u32, end: u32) {
        if self.starts.last() != Some(&start) {
            if self.offsets.is_empty() {
                self.offsets.push(0);
            }
            self.starts.push(start);
            self.offsets.push(self.ends.len() as u32);
        }
        self.ends.push(end);
        *self.offsets.last_mut().unwrap() = self.ends.len() as u32;
    }

    fn spans(&self) -> Vec<(u32, u32)> {
        (0..self.groups())
            .map(|g| (self.starts[g], self.ends_of(g)[0]))
            .collect()
    }
}

struct Miner<'a> {
    seq: &'a HomeSequence,
    cfg: &'a MiningConfig,
    gap: i64,
    min_count: u64,
    prefix: Vec<u32>,
    out: Vec<FrequentSequence>,
}

impl Miner<'_> {
    fn visit(&mut self, proj: &Projection) {
        let (count, value) = measure(self.seq, self.cfg, &proj.spans());
        if value < self.min_count {
            return;
        }
        if self.prefix.len() >= self.cfg.min_length {
            self.out.push(FrequentSequence {
                ids: self.prefix.clone(),
                count,
                value,
            });
        }
        if self.prefix.len() >= self.cfg.max_length {
            return;
        }
        let mut next: HashMap<u32, Projection> = HashMap::new();
        let times = &self.seq.times;
        let n = self.seq.len();
        for g in 0..proj.groups() {
            let start = proj.starts[g];
            let ends = proj.ends_of(g);
            let horizon = times[*ends.last().unwrap() as usize] + self.gap;
            let mut latest = 0usize;
            let mut j = ends[0] as usize + 1;
            while j < n && times[j] <= horizon {
                while latest + 1 < ends.len() && (ends[latest + 1] as usize) < j {
                    latest += 1;
                }
                if times[j] - times[ends[latest] as usize] <= self.gap {
                    next.entry(self.seq.ids[j]).or_default().push(start, j as u32);
                }
                j += 1;
            }
        }
        let mut items: Vec<u32> = next.keys().copied().collect();
        items.sort_unstable();
        for item in items {
            let child = next.remove(&item).unwrap();
            self.prefix.push(item);
            self.visit(&child);
            self.prefix.pop();
        }
    }
}

pub(super) fn mine(seq: &HomeSequence, cfg: &MiningConfig) -> Vec<FrequentSequence> {
    let mut miner = Miner {
        seq,
        cfg,
        gap: cfg.gap_ms(),
        min_count: cfg.min_count(seq.support_denominator(cfg.support_base)),
        prefix: Vec::new(),
        out: Vec::new(),
    };
    for (item, pos) in seq.positions.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        let mut proj = Projection::default();
        for &p in pos {
            proj.push(p, p);
        }
        miner.prefix.push(item as u32);
        miner.visit(&proj);
        miner.prefix.pop();
    }
    miner.out
}

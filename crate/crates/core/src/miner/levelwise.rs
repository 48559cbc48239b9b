//! Breadth-first mining over vertical id-lists.
//!
//! Each pattern keeps every `(start, end)` pair of its occurrences. A
//! candidate one item longer is formed for every identity and its id-list
//! is the temporal join of the parent list with that identity's positions.

use super::{measure, FrequentSequence, HomeSequence, MiningConfig};

type IdList = Vec<(u32, u32)>;

fn join(seq: &HomeSequence, parent: &IdList, item: u32, gap: i64) -> IdList {
    let pos = &seq.positions[item as usize];
    let mut out = Vec::new();
    for &(s, e) in parent {
        let te = seq.times[e as usize];
        let from = pos.partition_point(|&p| p <= e);
        for &j in &pos[from..] {
            if seq.times[j as usize] - te > gap {
                break;
            }
            out.push((s, j));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn spans(list: &IdList) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for &(s, e) in list {
        if out.last().is_none_or(|&(ls, _)| ls != s) {
            out.push((s, e));
        }
    }
    out
}

pub(super) fn mine(seq: &HomeSequence, cfg: &MiningConfig) -> Vec<FrequentSequence> {
    let gap = cfg.gap_ms();
    let min_count = cfg.min_count(seq.support_denominator(cfg.support_base));
    let mut out = Vec::new();

    let mut level: Vec<(Vec<u32>, IdList)> = Vec::new();
    for (item, pos) in seq.positions.iter().enumerate() {
        let list: IdList = pos.iter().map(|&p| (p, p)).collect();
        let (_, value) = measure(seq, cfg, &spans(&list));
        if !list.is_empty() && value >= min_count {
            level.push((vec![item as u32], list));
        }
    }

    let mut len = 1;
    while !level.is_empty() && len < cfg.max_length {
        let mut next = Vec::new();
        for (pattern, list) in &level {
            for item in 0..seq.alphabet.len() as u32 {
                let joined = join(seq, list, item, gap);
                if joined.is_empty() {
                    continue;
                }
                let (count, value) = measure(seq, cfg, &spans(&joined));
                if value < min_count {
                    continue;
                }
                let mut ids = pattern.clone();
                ids.push(item);
                if ids.len() >= cfg.min_length {
                    out.push(FrequentSequence {
                        ids: ids.clone(),
                        count,
                        value,
                    });
                }
                next.push((ids, joined));
            }
        }
        level = next;
        len += 1;
    }
    out
}

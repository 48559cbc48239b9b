use serde::{Deserialize, Serialize};

use super::{measure, HomeSequence, MiningConfig};
use crate::domain::{EventIdentity, Timestamp};

/// The leftmost occurrence of a pattern from one start event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub pattern: Vec<EventIdentity>,
    pub home_id: String,
    pub item_timestamps: Vec<Timestamp>,
}

/// Feasible positions per pattern item: `feasible[j]` lists the indices of
/// item `j` from which items `j..` can still be completed.
fn feasible_sets(seq: &HomeSequence, pattern: &[u32], gap: i64) -> Vec<Vec<u32>> {
    let k = pattern.len();
    let mut feasible: Vec<Vec<u32>> = vec![Vec::new(); k];
    if k == 0 {
        return feasible;
    }
    feasible[k - 1] = seq.positions[pattern[k - 1] as usize].clone();
    for j in (0..k - 1).rev() {
        let next = &feasible[j + 1];
        let kept: Vec<u32> = seq.positions[pattern[j] as usize]
            .iter()
            .copied()
            .filter(|&i| {
                let at = next.partition_point(|&n| n <= i);
                // the first later feasible index is also the earliest in time
                next.get(at)
                    .is_some_and(|&n| seq.times[n as usize] - seq.times[i as usize] <= gap)
            })
            .collect();
        feasible[j] = kept;
    }
    feasible
}

/// Leftmost occurrence (greedy earliest feasible successor) for every
/// start. Returns index tuples ascending by start. The leftmost tuple also
/// has the smallest possible end index.
pub(crate) fn leftmost_occurrences(seq: &HomeSequence, pattern: &[u32], gap: i64) -> Vec<Vec<u32>> {
    let feasible = feasible_sets(seq, pattern, gap);
    let Some(first) = feasible.first() else {
        return Vec::new();
    };
    first
        .iter()
        .map(|&start| {
            let mut tuple = Vec::with_capacity(pattern.len());
            tuple.push(start);
            let mut cur = start;
            for next in &feasible[1..] {
                let at = next.partition_point(|&n| n <= cur);
                cur = next[at];
                tuple.push(cur);
            }
            tuple
        })
        .collect()
}

/// `(start, earliest end)` for every start of the pattern.
pub(crate) fn occurrence_spans(seq: &HomeSequence, pattern: &[u32], gap: i64) -> Vec<(u32, u32)> {
    leftmost_occurrences(seq, pattern, gap)
        .into_iter()
        .map(|t| (t[0], *t.last().unwrap()))
        .collect()
}

/// Support count of `pattern` and its leftmost occurrence per start.
///
/// With overlap disabled only the occurrences picked for the disjoint
/// count are returned.
pub fn count_support(
    pattern: &[EventIdentity],
    seq: &HomeSequence,
    cfg: &MiningConfig,
) -> (u64, Vec<Occurrence>) {
    let ids: Option<Vec<u32>> = pattern.iter().map(|p| seq.id_of(p)).collect();
    let Some(ids) = ids.filter(|ids| !ids.is_empty()) else {
        return (0, Vec::new());
    };
    let mut tuples = leftmost_occurrences(seq, &ids, cfg.gap_ms());
    if !cfg.allow_overlap {
        let mut picked = Vec::new();
        let mut order: Vec<usize> = (0..tuples.len()).collect();
        order.sort_by_key(|&i| (*tuples[i].last().unwrap(), tuples[i][0]));
        let mut last_end: Option<u32> = None;
        for i in order {
            if last_end.is_none_or(|l| tuples[i][0] > l) {
                last_end = Some(*tuples[i].last().unwrap());
                picked.push(i);
            }
        }
        picked.sort_unstable();
        tuples = picked.into_iter().map(|i| std::mem::take(&mut tuples[i])).collect();
    }
    let occurrences: Vec<Occurrence> = tuples
        .iter()
        .map(|t| Occurrence {
            pattern: pattern.to_vec(),
            home_id: seq.home_id.clone(),
            item_timestamps: t
                .iter()
                .map(|&i| {
                    chrono::DateTime::from_timestamp_millis(seq.times[i as usize])
                        .expect("time in range")
                })
                .collect(),
        })
        .collect();
    (occurrences.len() as u64, occurrences)
}

/// Support count of `condition` restricted to occurrences after which
/// `action` does not follow: no `action` event strictly between the first
/// and last matched items, and none within `max_gap` after the last.
pub(crate) fn condition_without_action(
    seq: &HomeSequence,
    condition: &[u32],
    action: Option<u32>,
    cfg: &MiningConfig,
) -> u64 {
    let gap = cfg.gap_ms();
    let spans = occurrence_spans(seq, condition, gap);
    let action_pos: &[u32] = action.map_or(&[], |a| &seq.positions[a as usize]);
    let qualifying: Vec<(u32, u32)> = spans
        .into_iter()
        .filter(|&(start, end)| {
            let at = action_pos.partition_point(|&p| p <= start);
            match action_pos.get(at) {
                None => true,
                Some(&y) => y > end && seq.times[y as usize] - seq.times[end as usize] > gap,
            }
        })
        .collect();
    measure(seq, cfg, &qualifying).0
}

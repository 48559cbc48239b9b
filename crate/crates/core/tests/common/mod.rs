#![allow(dead_code)]

use ecohabit_core::domain::{ActionCategory, AssociationRule, EventIdentity, EventRecord, EventSource, RuleState};
use ecohabit_core::miner::HomeSequence;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random identity ids and times: exponential gaps around `mean_gap_s`
/// seconds, with a few planted motifs so that long patterns exist.
pub fn random_ids(rng: &mut ChaCha8Rng, n: usize, alphabet: u32, mean_gap_s: f64) -> (Vec<u32>, Vec<i64>) {
    let motifs: Vec<Vec<u32>> = (0..3)
        .map(|_| {
            let len = rng.gen_range(3..=7);
            (0..len).map(|_| rng.gen_range(0..alphabet)).collect()
        })
        .collect();
    let mut ids = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    let mut t: i64 = 1_400_000_000_000;
    while ids.len() < n {
        if rng.gen_bool(0.08) {
            let m = &motifs[rng.gen_range(0..motifs.len())];
            t += rng.gen_range(600_001..3_600_000);
            for &k in m {
                if ids.len() == n {
                    break;
                }
                t += rng.gen_range(1_000..120_000);
                ids.push(k);
                times.push(t);
            }
        } else {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            t += (-u.ln() * mean_gap_s * 1000.0) as i64;
            ids.push(rng.gen_range(0..alphabet));
            times.push(t);
        }
    }
    (ids, times)
}

pub fn random_log(rng: &mut ChaCha8Rng, n: usize, alphabet: u32, mean_gap_s: f64) -> HomeSequence {
    let (ids, times) = random_ids(rng, n, alphabet, mean_gap_s);
    HomeSequence::from_ids("h", &ids, &times)
}

/// Identity `k` of the synthetic alphabet used by the generators.
pub fn ident(k: u32) -> EventIdentity {
    EventIdentity::new("z", &format!("{k:05}"), &format!("e{k}"))
}

pub fn event(home: &str, ms: i64, k: u32) -> EventRecord {
    EventRecord::new(
        chrono::DateTime::from_timestamp_millis(ms).unwrap(),
        home,
        "z",
        &format!("{k:05}"),
        &format!("e{k}"),
        EventSource::ButtonClick,
    )
}

pub fn rule(home: &str, id: &str, condition: &[u32], action: u32, priority: f64) -> AssociationRule {
    AssociationRule {
        rule_id: id.to_string(),
        home_id: home.to_string(),
        condition: condition.iter().map(|&k| ident(k)).collect(),
        action: ident(action),
        action_category: ActionCategory::Off,
        action_position: condition.len(),
        source_pattern: Vec::new(),
        confidence: priority,
        pattern_support: 0.01,
        pattern_support_count: 5,
        pattern_length: condition.len() + 1,
        mined_date: chrono::DateTime::UNIX_EPOCH,
        priority,
        state: RuleState::Active,
    }
}

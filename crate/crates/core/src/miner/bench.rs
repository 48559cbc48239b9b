use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{mine_sequences, Algorithm, FrequentSequence, HomeSequence, MineError, MiningConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("benchmark needs at least two algorithms, got {0}")]
    TooFewAlgorithms(usize),
    #[error(transparent)]
    Mine(#[from] MineError),
    #[error("pattern sets differ between {left} and {right}: {sample}")]
    Mismatch {
        left: String,
        right: String,
        sample: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub algorithm: String,
    pub runtime_ms: f64,
    pub pattern_count: usize,
    pub set_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub events: usize,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>12} {:>9}  set_hash", "algorithm", "runtime_ms", "patterns");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<10} {:>12.1} {:>9}  {}",
                e.algorithm, e.runtime_ms, e.pattern_count, e.set_hash
            );
        }
        s
    }
}

/// Order-independent digest of a pattern set, over identities and counts.
pub fn pattern_set_hash(seq: &HomeSequence, found: &[FrequentSequence]) -> String {
    let lines: BTreeSet<String> = found.iter().map(|f| render(seq, f)).collect();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

fn render(seq: &HomeSequence, f: &FrequentSequence) -> String {
    let items: Vec<String> = f
        .ids
        .iter()
        .map(|&i| seq.alphabet[i as usize].to_string())
        .collect();
    format!("{} #{} ~{}", items.join(" > "), f.count, f.value)
}

/// Runs every algorithm once to warm up, then `runs` timed times (the
/// fastest run is reported), and checks that all pattern sets agree.
pub fn run_benchmark(
    seq: &HomeSequence,
    cfg: &MiningConfig,
    algos: &[Algorithm],
    runs: usize,
) -> Result<BenchReport, BenchError> {
    if algos.len() < 2 {
        return Err(BenchError::TooFewAlgorithms(algos.len()));
    }
    let mut entries = Vec::new();
    let mut results: Vec<Vec<FrequentSequence>> = Vec::new();
    for &algo in algos {
        let mut found = mine_sequences(seq, cfg, algo)?;
        let mut best = f64::INFINITY;
        for _ in 0..runs.max(1) {
            let t0 = Instant::now();
            found = mine_sequences(seq, cfg, algo)?;
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        entries.push(BenchEntry {
            algorithm: algo.name().to_string(),
            runtime_ms: best,
            pattern_count: found.len(),
            set_hash: pattern_set_hash(seq, &found),
        });
        results.push(found);
    }
    for i in 1..entries.len() {
        if entries[i].set_hash != entries[0].set_hash {
            let a: BTreeSet<String> = results[0].iter().map(|f| render(seq, f)).collect();
            let b: BTreeSet<String> = results[i].iter().map(|f| render(seq, f)).collect();
            let sample: Vec<String> = a
                .symmetric_difference(&b)
                .take(5)
                .map(|l| {
                    let side = if a.contains(l) { &entries[0].algorithm } else { &entries[i].algorithm };
                    format!("[only {side}] {l}")
                })
                .collect();
            return Err(BenchError::Mismatch {
                left: entries[0].algorithm.clone(),
                right: entries[i].algorithm.clone(),
                sample: sample.join("; "),
            });
        }
    }
    Ok(BenchReport {
        events: seq.len(),
        entries,
    })
}

/// Seeded benchmark corpus: `events` identities drawn uniformly from an
/// `alphabet` with exponential gaps of mean `mean_gap_secs`, interleaved
/// with a few recurring motifs of 3 to 7 items so that long patterns exist.
pub fn synthetic_sequence(events: usize, alphabet: u32, mean_gap_secs: f64, seed: u64) -> HomeSequence {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Exp};

    let alphabet = alphabet.max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(1.0 / (mean_gap_secs.max(0.001) * 1000.0)).expect("positive rate");
    let motifs: Vec<Vec<u32>> = (0..3)
        .map(|_| (0..rng.gen_range(3..=7)).map(|_| rng.gen_range(0..alphabet)).collect())
        .collect();
    let mut ids = Vec::with_capacity(events);
    let mut times = Vec::with_capacity(events);
    let mut t: i64 = 1_400_000_000_000;
    while ids.len() < events {
        if rng.gen_bool(0.08) {
            let m = &motifs[rng.gen_range(0..motifs.len())];
            for &k in m.iter().take(events - ids.len()) {
                t += rng.gen_range(1_000..120_000);
                ids.push(k);
                times.push(t);
            }
        } else {
            t += gap.sample(&mut rng) as i64;
            ids.push(rng.gen_range(0..alphabet));
            times.push(t);
        }
    }
    HomeSequence::from_ids("bench", &ids, &times)
}

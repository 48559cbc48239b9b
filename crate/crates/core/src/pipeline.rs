//! Glue from raw events to a rule database.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ActionCatalog, EventRecord, Pattern};
use crate::miner::{filter_relevant, mine_patterns, Algorithm, HomeSequence, MineError, MiningConfig};
use crate::rules::{build_rules, DeriveOptions, RuleDb, RuleError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mine(#[from] MineError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },
}

pub const PATTERNS_FORMAT: &str = "ecohabit-patterns";
pub const PATTERNS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PatternsHeader {
    format: String,
    version: u32,
    mining: MiningConfig,
}

/// Writes a header line with the mining settings, then one pattern per
/// line.
pub fn write_patterns(path: &Path, cfg: &MiningConfig, patterns: &[Pattern]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = PatternsHeader {
        format: PATTERNS_FORMAT.into(),
        version: PATTERNS_VERSION,
        mining: cfg.clone(),
    };
    serde_json::to_writer(&mut w, &header).expect("header serializes");
    w.write_all(b"\n").map_err(io)?;
    for p in patterns {
        serde_json::to_writer(&mut w, p).expect("pattern serializes");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`write_patterns`].
pub fn read_patterns(path: &Path) -> Result<(MiningConfig, Vec<Pattern>), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bad = |line: usize, reason: String| PipelineError::Format {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(File::open(path).map_err(io)?).lines();
    let first = lines.next().transpose().map_err(io)?.ok_or_else(|| bad(1, "empty file".into()))?;
    let header: PatternsHeader = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
    if header.format != PATTERNS_FORMAT || header.version != PATTERNS_VERSION {
        return Err(bad(1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut patterns = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        patterns.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?);
    }
    Ok((header.mining, patterns))
}

/// Splits events by home, each home sorted in store order.
pub fn group_by_home(events: impl IntoIterator<Item = EventRecord>) -> BTreeMap<String, Vec<EventRecord>> {
    let mut by_home: BTreeMap<String, Vec<EventRecord>> = BTreeMap::new();
    for e in events {
        by_home.entry(e.home_id.to_string()).or_default().push(e);
    }
    for v in by_home.values_mut() {
        v.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    }
    by_home
}

/// Relevant patterns of one home.
pub fn mine_relevant(
    seq: &HomeSequence,
    cfg: &MiningConfig,
    algo: Algorithm,
    catalog: &ActionCatalog,
) -> Result<Vec<Pattern>, MineError> {
    Ok(filter_relevant(mine_patterns(seq, cfg, algo, catalog)?))
}

/// Derives and scores rules for every home that has patterns, inserting
/// them into `db`. Returns the number of rules added.
pub fn derive_into(
    db: &mut RuleDb,
    homes: &BTreeMap<String, Vec<EventRecord>>,
    patterns: &[Pattern],
    cfg: &MiningConfig,
    opts: &DeriveOptions,
) -> Result<usize, PipelineError> {
    let mut added = 0;
    for (home, events) in homes {
        let mine: Vec<Pattern> = patterns.iter().filter(|p| &p.home_id == home).cloned().collect();
        if mine.is_empty() {
            continue;
        }
        let seq = HomeSequence::from_events(home, events)?;
        let rules = build_rules(&mine, &seq, cfg, opts)?;
        added += rules.len();
        db.insert_all(rules);
    }
    Ok(added)
}

/// Mines every home and derives its rules.
pub fn learn_rules(
    homes: &BTreeMap<String, Vec<EventRecord>>,
    cfg: &MiningConfig,
    algo: Algorithm,
    catalog: &ActionCatalog,
    opts: &DeriveOptions,
    db: &mut RuleDb,
) -> Result<Vec<Pattern>, PipelineError> {
    let mut all = Vec::new();
    for (home, events) in homes {
        let seq = HomeSequence::from_events(home, events)?;
        let patterns = mine_relevant(&seq, cfg, algo, catalog)?;
        db.insert_all(build_rules(&patterns, &seq, cfg, opts)?);
        all.extend(patterns);
    }
    Ok(all)
}

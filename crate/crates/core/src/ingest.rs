//! Event-log parsing and the on-disk per-home event store.
//!
//! Store layout: `<dir>/homes/<home>.jsonl` holds the events of one home in
//! store order, `<dir>/homes/<home>.json` is its index (committed record
//! count and byte length, watermark, last record). Only the first `count`
//! records of a home file are ever read, so a crashed append never becomes
//! visible.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EventRecord, EventSource, HomeTopology, Timestamp, Topologies};
use crate::timefmt;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("bad csv header: {0}")]
    Header(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "ndjson" => Ok(LogFormat::Jsonl),
            "csv" => Ok(LogFormat::Csv),
            other => Err(format!("unknown log format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("line {line_no}: {reason}")]
pub struct ParseError {
    pub line_no: usize,
    pub reason: String,
}

/// Field order of a CSV file without a header, and of the header we write.
pub const CSV_COLUMNS: [&str; 6] = [
    "timestamp",
    "home_id",
    "zone_id",
    "subject_id",
    "event_name",
    "source",
];

/// Deduplicates the small set of distinct id strings in a log so that
/// millions of records share a few hundred allocations.
#[derive(Debug, Default)]
pub struct Interner {
    set: HashSet<Arc<str>>,
}

impl Interner {
    pub fn get(&mut self, s: &str) -> Arc<str> {
        if let Some(a) = self.set.get(s) {
            return a.clone();
        }
        let a: Arc<str> = Arc::from(s);
        self.set.insert(a.clone());
        a
    }
}

#[derive(Deserialize)]
struct RawRecord<'a> {
    #[serde(borrow, default)]
    timestamp: Option<Cow<'a, str>>,
    #[serde(borrow, default)]
    home_id: Option<Cow<'a, str>>,
    #[serde(borrow, default)]
    zone_id: Option<Cow<'a, str>>,
    #[serde(borrow, default)]
    subject_id: Option<Cow<'a, str>>,
    #[serde(borrow, default)]
    event_name: Option<Cow<'a, str>>,
    #[serde(borrow, default)]
    source: Option<Cow<'a, str>>,
}

fn build_record(
    fields: [Option<&str>; 6],
    line_no: usize,
    interner: &mut Interner,
) -> Result<EventRecord, ParseError> {
    let err = |reason: String| ParseError { line_no, reason };
    let mut vals = [""; 6];
    for (i, f) in fields.iter().enumerate() {
        match f {
            Some(v) if i == 4 || !v.trim().is_empty() => vals[i] = v,
            _ => return Err(err(format!("missing {}", CSV_COLUMNS[i]))),
        }
    }
    let timestamp = timefmt::parse(vals[0]).map_err(err)?;
    let source: EventSource = vals[5].parse().map_err(err)?;
    Ok(EventRecord {
        timestamp,
        home_id: interner.get(vals[1].trim()),
        zone_id: interner.get(vals[2].trim()),
        subject_id: interner.get(vals[3].trim()),
        event_name: interner.get(vals[4]),
        source,
    })
}

fn parse_json_line(
    line: &str,
    line_no: usize,
    interner: &mut Interner,
) -> Result<EventRecord, ParseError> {
    let raw: RawRecord<'_> = serde_json::from_str(line).map_err(|e| ParseError {
        line_no,
        reason: format!("malformed record: {e}"),
    })?;
    build_record(
        [
            raw.timestamp.as_deref(),
            raw.home_id.as_deref(),
            raw.zone_id.as_deref(),
            raw.subject_id.as_deref(),
            raw.event_name.as_deref(),
            raw.source.as_deref(),
        ],
        line_no,
        interner,
    )
}

/// Maps CSV columns onto record fields.
#[derive(Debug, Clone)]
pub struct CsvLayout {
    columns: [usize; 6],
}

impl Default for CsvLayout {
    fn default() -> Self {
        Self {
            columns: [0, 1, 2, 3, 4, 5],
        }
    }
}

impl CsvLayout {
    pub fn from_header(header: &csv::StringRecord) -> Result<Self, IngestError> {
        let mut columns = [usize::MAX; 6];
        for (i, name) in header.iter().enumerate() {
            if let Some(k) = CSV_COLUMNS.iter().position(|c| *c == name.trim()) {
                columns[k] = i;
            }
        }
        if let Some(k) = columns.iter().position(|&c| c == usize::MAX) {
            return Err(IngestError::Header(format!("missing column {}", CSV_COLUMNS[k])));
        }
        Ok(Self { columns })
    }

    fn parse(
        &self,
        rec: &csv::StringRecord,
        line_no: usize,
        interner: &mut Interner,
    ) -> Result<EventRecord, ParseError> {
        let f = |k: usize| rec.get(self.columns[k]);
        build_record([f(0), f(1), f(2), f(3), f(4), f(5)], line_no, interner)
    }
}

/// Parses one line of a log. CSV lines use the canonical column order.
pub fn parse_line(line: &str, line_no: usize, format: LogFormat) -> Result<EventRecord, ParseError> {
    let mut interner = Interner::default();
    match format {
        LogFormat::Jsonl => parse_json_line(line, line_no, &mut interner),
        LogFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(line.as_bytes());
            let mut rec = csv::StringRecord::new();
            match rdr.read_record(&mut rec) {
                Ok(true) => CsvLayout::default().parse(&rec, line_no, &mut interner),
                Ok(false) => Err(ParseError {
                    line_no,
                    reason: "empty line".into(),
                }),
                Err(e) => Err(ParseError {
                    line_no,
                    reason: format!("malformed record: {e}"),
                }),
            }
        }
    }
}

pub fn to_json_line(e: &EventRecord) -> String {
    serde_json::to_string(e).expect("event records always serialize")
}

/// Reads every record of a log file. Blank lines are ignored; every other
/// line either yields a record or a [`ParseError`].
pub fn read_log(
    path: &Path,
    format: LogFormat,
) -> Result<(Vec<EventRecord>, Vec<ParseError>, usize), IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut interner = Interner::default();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut lines = 0usize;
    match format {
        LogFormat::Jsonl => {
            let mut reader = BufReader::with_capacity(1 << 20, file);
            let mut buf = String::new();
            let mut line_no = 0;
            loop {
                buf.clear();
                let n = reader.read_line(&mut buf).map_err(io_err(path))?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let line = buf.trim_end_matches(['\n', '\r']);
                if line.trim().is_empty() {
                    continue;
                }
                lines += 1;
                match parse_json_line(line, line_no, &mut interner) {
                    Ok(r) => records.push(r),
                    Err(e) => errors.push(e),
                }
            }
        }
        LogFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .from_reader(BufReader::with_capacity(1 << 20, file));
            let header = rdr
                .headers()
                .map_err(|e| IngestError::Header(e.to_string()))?
                .clone();
            let layout = CsvLayout::from_header(&header)?;
            let mut rec = csv::StringRecord::new();
            loop {
                match rdr.read_record(&mut rec) {
                    Ok(false) => break,
                    Ok(true) => {
                        let line_no = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                        if rec.iter().all(|f| f.trim().is_empty()) {
                            continue;
                        }
                        lines += 1;
                        match layout.parse(&rec, line_no, &mut interner) {
                            Ok(r) => records.push(r),
                            Err(e) => errors.push(e),
                        }
                    }
                    Err(e) => {
                        lines += 1;
                        let line_no = e.position().map(|p| p.line() as usize).unwrap_or(0);
                        errors.push(ParseError {
                            line_no,
                            reason: format!("malformed record: {e}"),
                        });
                    }
                }
            }
        }
    }
    Ok((records, errors, lines))
}

/// Writes records in the canonical line-delimited format.
pub fn write_log(path: &Path, records: &[EventRecord]) -> Result<(), IngestError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("event records always serialize");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads home topologies from a JSON file holding one topology or an array
/// of them. Every topology is validated.
pub fn read_topologies(path: &Path) -> Result<Topologies, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let corrupt = |reason: String| IngestError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let list: Vec<HomeTopology> = match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(v @ serde_json::Value::Array(_)) => serde_json::from_value(v).map_err(|e| corrupt(e.to_string()))?,
        Ok(v) => vec![serde_json::from_value(v).map_err(|e| corrupt(e.to_string()))?],
        Err(e) => return Err(corrupt(e.to_string())),
    };
    for t in &list {
        t.validate().map_err(|e| corrupt(e.to_string()))?;
    }
    Ok(Topologies::new(list))
}

pub fn write_topologies(path: &Path, list: &[HomeTopology]) -> Result<(), IngestError> {
    let text = serde_json::to_string_pretty(list).expect("topologies serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Optional filters and reference checks applied while loading.
#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub min_date: Option<Timestamp>,
    pub max_date: Option<Timestamp>,
    /// When present, records naming an unknown home or zone are rejected.
    pub topology: Option<Topologies>,
}

impl IngestOptions {
    fn check(&self, r: &EventRecord) -> Result<(), String> {
        if self.min_date.is_some_and(|d| r.timestamp < d) {
            return Err("timestamp before min date".into());
        }
        if self.max_date.is_some_and(|d| r.timestamp > d) {
            return Err("timestamp after max date".into());
        }
        if let Some(topo) = &self.topology {
            match topo.get(&r.home_id) {
                None => return Err(format!("unknown home {}", r.home_id)),
                Some(t) if !t.has_zone(&r.zone_id) => {
                    return Err(format!("unknown zone {} in home {}", r.zone_id, r.home_id))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomeIngest {
    pub accepted: usize,
    pub duplicates: usize,
    #[serde(with = "opt_ts")]
    pub watermark: Option<Timestamp>,
}

/// Totals of one ingest run. `accepted + rejected + duplicates == lines`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub duplicates: usize,
    pub homes: BTreeMap<String, HomeIngest>,
    /// The first [`IngestReport::MAX_ERRORS`] rejections.
    pub errors: Vec<ParseError>,
}

impl IngestReport {
    pub const MAX_ERRORS: usize = 100;

    pub fn summary(&self) -> String {
        format!(
            "ingest lines={} accepted={} rejected={} duplicates={} homes={}",
            self.lines,
            self.accepted,
            self.rejected,
            self.duplicates,
            self.homes.len()
        )
    }

    fn reject(&mut self, e: ParseError) {
        self.rejected += 1;
        if self.errors.len() < Self::MAX_ERRORS {
            self.errors.push(e);
        }
    }
}

mod opt_ts {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Timestamp>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(ts) => s.serialize_some(&timefmt::format(ts)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Timestamp>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        raw.map(|s| timefmt::parse(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HomeIndex {
    home_id: String,
    count: usize,
    bytes: u64,
    #[serde(with = "opt_ts")]
    watermark: Option<Timestamp>,
    last: Option<EventRecord>,
}

/// Outcome of appending a batch to one home.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AppendOutcome {
    pub accepted: usize,
    pub duplicates: usize,
}

/// Directory-backed, per-home, append-ordered event store.
///
/// Writers must be serialized per home; different homes may be written
/// concurrently since each home owns its own data and index file.
#[derive(Debug, Clone)]
pub struct EventStore {
    dir: PathBuf,
}

fn file_stem(home_id: &str) -> String {
    let plain = !home_id.is_empty()
        && home_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if plain {
        home_id.to_string()
    } else {
        format!("x{}", hex::encode(home_id.as_bytes()))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn sort_key_cmp(a: &EventRecord, b: &EventRecord) -> std::cmp::Ordering {
    a.order_key().cmp(&b.order_key())
}

impl EventStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let dir = dir.into();
        let homes = dir.join("homes");
        fs::create_dir_all(&homes).map_err(io_err(&homes))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn data_path(&self, home_id: &str) -> PathBuf {
        self.dir.join("homes").join(format!("{}.jsonl", file_stem(home_id)))
    }

    fn index_path(&self, home_id: &str) -> PathBuf {
        self.dir.join("homes").join(format!("{}.json", file_stem(home_id)))
    }

    fn read_index(&self, home_id: &str) -> Result<Option<HomeIndex>, IngestError> {
        let path = self.index_path(home_id);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| IngestError::Corrupt {
                    path,
                    reason: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(IngestError::Io { path, source: e }),
        }
    }

    fn write_index(&self, idx: &HomeIndex) -> Result<(), IngestError> {
        let bytes = serde_json::to_vec(idx).expect("index serializes");
        write_atomic(&self.index_path(&idx.home_id), &bytes)
    }

    /// Homes with at least one committed record, sorted.
    pub fn homes(&self) -> Result<Vec<String>, IngestError> {
        let dir = self.dir.join("homes");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let idx: HomeIndex = serde_json::from_slice(&bytes).map_err(|e| IngestError::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            out.push(idx.home_id);
        }
        out.sort();
        Ok(out)
    }

    pub fn watermark(&self, home_id: &str) -> Result<Option<Timestamp>, IngestError> {
        Ok(self.read_index(home_id)?.and_then(|i| i.watermark))
    }

    pub fn count(&self, home_id: &str) -> Result<usize, IngestError> {
        Ok(self.read_index(home_id)?.map_or(0, |i| i.count))
    }

    /// All committed events of a home in store order.
    pub fn events(&self, home_id: &str) -> Result<Vec<EventRecord>, IngestError> {
        let Some(idx) = self.read_index(home_id)? else {
            return Ok(Vec::new());
        };
        let path = self.data_path(home_id);
        let file = File::open(&path).map_err(io_err(&path))?;
        let mut reader = BufReader::with_capacity(1 << 20, file);
        let mut interner = Interner::default();
        let mut out = Vec::with_capacity(idx.count);
        let mut buf = String::new();
        while out.len() < idx.count {
            buf.clear();
            if reader.read_line(&mut buf).map_err(io_err(&path))? == 0 {
                return Err(IngestError::Corrupt {
                    path,
                    reason: format!("expected {} records, found {}", idx.count, out.len()),
                });
            }
            let rec = parse_json_line(buf.trim_end(), out.len() + 1, &mut interner).map_err(|e| {
                IngestError::Corrupt {
                    path: path.clone(),
                    reason: e.to_string(),
                }
            })?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Adds records of one home, dropping exact duplicates of stored or
    /// batch-mates. Stored records are never modified.
    pub fn append(
        &self,
        home_id: &str,
        mut batch: Vec<EventRecord>,
    ) -> Result<AppendOutcome, IngestError> {
        debug_assert!(batch.iter().all(|r| &*r.home_id == home_id));
        if batch.is_empty() {
            return Ok(AppendOutcome::default());
        }
        batch.sort_by(sort_key_cmp);
        let before = batch.len();
        batch.dedup();
        let mut duplicates = before - batch.len();

        let idx = self.read_index(home_id)?;
        let data = self.data_path(home_id);
        let fast = match &idx {
            None => true,
            Some(i) => i
                .last
                .as_ref()
                .is_none_or(|last| sort_key_cmp(last, &batch[0]).is_lt()),
        };

        let (count, bytes) = if fast {
            let (count0, bytes0) = idx.as_ref().map_or((0, 0), |i| (i.count, i.bytes));
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(false)
                .open(&data)
                .map_err(io_err(&data))?;
            // drop any uncommitted tail left by an interrupted append
            file.set_len(bytes0).map_err(io_err(&data))?;
            let mut w = BufWriter::with_capacity(1 << 20, file);
            use std::io::Seek;
            w.seek(std::io::SeekFrom::Start(bytes0)).map_err(io_err(&data))?;
            let mut written = 0u64;
            for r in &batch {
                let line = to_json_line(r);
                w.write_all(line.as_bytes()).map_err(io_err(&data))?;
                w.write_all(b"\n").map_err(io_err(&data))?;
                written += line.len() as u64 + 1;
            }
            let file = w.into_inner().map_err(|e| IngestError::Io {
                path: data.clone(),
                source: e.into_error(),
            })?;
            file.sync_all().map_err(io_err(&data))?;
            (count0 + batch.len(), bytes0 + written)
        } else {
            let existing = self.events(home_id)?;
            let mut merged = Vec::with_capacity(existing.len() + batch.len());
            let mut added = 0usize;
            let mut it_new = batch.into_iter().peekable();
            for old in existing {
                while let Some(n) = it_new.peek() {
                    match sort_key_cmp(n, &old) {
                        std::cmp::Ordering::Less => {
                            merged.push(it_new.next().unwrap());
                            added += 1;
                        }
                        std::cmp::Ordering::Equal => {
                            it_new.next();
                            duplicates += 1;
                        }
                        std::cmp::Ordering::Greater => break,
                    }
                }
                merged.push(old);
            }
            for n in it_new {
                merged.push(n);
                added += 1;
            }
            let mut buf = Vec::with_capacity(merged.len() * 128);
            for r in &merged {
                serde_json::to_writer(&mut buf, r).expect("event records always serialize");
                buf.push(b'\n');
            }
            write_atomic(&data, &buf)?;
            let outcome = AppendOutcome {
                accepted: added,
                duplicates,
            };
            let new_idx = HomeIndex {
                home_id: home_id.to_string(),
                count: merged.len(),
                bytes: buf.len() as u64,
                watermark: merged.last().map(|r| r.timestamp),
                last: merged.last().cloned(),
            };
            self.write_index(&new_idx)?;
            return Ok(outcome);
        };

        let last = batch.last().cloned();
        self.write_index(&HomeIndex {
            home_id: home_id.to_string(),
            count,
            bytes,
            watermark: last.as_ref().map(|r| r.timestamp),
            last,
        })?;
        Ok(AppendOutcome {
            accepted: batch.len(),
            duplicates,
        })
    }

    /// Ingests a log file: parse, filter, group by home and append.
    pub fn load_log(
        &self,
        path: &Path,
        format: LogFormat,
        opts: &IngestOptions,
    ) -> Result<IngestReport, IngestError> {
        let (records, errors, lines) = read_log(path, format)?;
        let mut report = IngestReport {
            lines,
            ..Default::default()
        };
        for e in errors {
            report.reject(e);
        }
        let mut by_home: BTreeMap<Arc<str>, Vec<EventRecord>> = BTreeMap::new();
        for r in records {
            if let Err(reason) = opts.check(&r) {
                // line numbers are not kept past parsing; 0 marks a filter rejection
                report.reject(ParseError { line_no: 0, reason });
                continue;
            }
            by_home.entry(r.home_id.clone()).or_default().push(r);
        }
        for (home, batch) in by_home {
            let out = self.append(&home, batch)?;
            report.accepted += out.accepted;
            report.duplicates += out.duplicates;
            report.homes.insert(
                home.to_string(),
                HomeIngest {
                    accepted: out.accepted,
                    duplicates: out.duplicates,
                    watermark: self.watermark(&home)?,
                },
            );
        }
        report.errors.sort_by_key(|e| e.line_no);
        Ok(report)
    }
}

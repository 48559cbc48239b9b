use std::fs;
use std::path::Path;

use ecohabit_core::domain::EventRecord;
use ecohabit_core::ingest::{read_log, write_log, EventStore, IngestOptions, LogFormat};
use ecohabit_core::simulator::{generate, SimConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample() -> Vec<EventRecord> {
    let sim = generate(&SimConfig {
        homes: 3,
        days: 5,
        train_days: 3,
        noise_rate: 2.0,
        ..Default::default()
    })
    .unwrap();
    sim.train.into_iter().chain(sim.test).collect()
}

fn contents(store: &EventStore) -> Vec<(String, Vec<EventRecord>)> {
    store
        .homes()
        .unwrap()
        .into_iter()
        .map(|h| {
            let events = store.events(&h).unwrap();
            (h, events)
        })
        .collect()
}

fn write_csv(path: &Path, records: &[EventRecord]) {
    let mut text = String::from("timestamp,home_id,zone_id,subject_id,event_name,source\n");
    for r in records {
        text += &format!(
            "{},{},{},{},\"{}\",{}\n",
            ecohabit_core::timefmt::format(&r.timestamp),
            r.home_id,
            r.zone_id,
            r.subject_id,
            r.event_name,
            r.source.as_str()
        );
    }
    fs::write(path, text).unwrap();
}

#[test]
fn reloading_a_log_adds_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.jsonl");
    let records = sample();
    write_log(&log, &records).unwrap();
    let store = EventStore::open(tmp.path().join("store")).unwrap();
    let first = store.load_log(&log, LogFormat::Jsonl, &IngestOptions::default()).unwrap();
    assert_eq!(first.accepted, records.len());
    let before = contents(&store);
    let second = store.load_log(&log, LogFormat::Jsonl, &IngestOptions::default()).unwrap();
    assert_eq!((second.accepted, second.duplicates, second.rejected), (0, records.len(), 0));
    assert_eq!(contents(&store), before);
}

#[test]
fn input_order_does_not_change_the_store() {
    let tmp = tempfile::tempdir().unwrap();
    let records = sample();
    let mut shuffled = records.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let (a, b) = (tmp.path().join("a.jsonl"), tmp.path().join("b.jsonl"));
    write_log(&a, &records).unwrap();
    write_log(&b, &shuffled).unwrap();
    let sa = EventStore::open(tmp.path().join("sa")).unwrap();
    let sb = EventStore::open(tmp.path().join("sb")).unwrap();
    sa.load_log(&a, LogFormat::Jsonl, &IngestOptions::default()).unwrap();
    // in two halves, later half first
    let (head, tail) = shuffled.split_at(shuffled.len() / 2);
    let (b1, b2) = (tmp.path().join("b1.jsonl"), tmp.path().join("b2.jsonl"));
    write_log(&b1, tail).unwrap();
    write_log(&b2, head).unwrap();
    sb.load_log(&b1, LogFormat::Jsonl, &IngestOptions::default()).unwrap();
    sb.load_log(&b2, LogFormat::Jsonl, &IngestOptions::default()).unwrap();
    assert_eq!(contents(&sa), contents(&sb));
    let reopened = EventStore::open(tmp.path().join("sb")).unwrap();
    assert_eq!(contents(&reopened), contents(&sa));
    for (_, events) in contents(&sa) {
        assert!(events.windows(2).all(|w| w[0].order_key() <= w[1].order_key()));
    }
}

#[test]
fn csv_and_jsonl_load_the_same_events() {
    let tmp = tempfile::tempdir().unwrap();
    let records = sample();
    let (j, c) = (tmp.path().join("log.jsonl"), tmp.path().join("log.csv"));
    write_log(&j, &records).unwrap();
    write_csv(&c, &records);
    let (from_json, e1, _) = read_log(&j, LogFormat::Jsonl).unwrap();
    let (from_csv, e2, lines) = read_log(&c, LogFormat::Csv).unwrap();
    assert!(e1.is_empty() && e2.is_empty(), "{e2:?}");
    assert_eq!(lines, records.len());
    assert_eq!(from_json, from_csv);
}

#[test]
fn bad_lines_are_counted_and_located() {
    let tmp = tempfile::tempdir().unwrap();
    let records = sample();
    let log = tmp.path().join("log.jsonl");
    write_log(&log, &records[..3]).unwrap();
    let mut text = fs::read_to_string(&log).unwrap();
    text += "{\"timestamp\": \"not a time\"}\n\nnot json at all\n";
    fs::write(&log, text).unwrap();
    let store = EventStore::open(tmp.path().join("store")).unwrap();
    let report = store.load_log(&log, LogFormat::Jsonl, &IngestOptions::default()).unwrap();
    assert_eq!((report.accepted, report.rejected), (3, 2));
    assert_eq!(report.accepted + report.rejected + report.duplicates, report.lines);
    let lines: Vec<usize> = report.errors.iter().map(|e| e.line_no).collect();
    assert_eq!(lines, vec![4, 6]);
}

#[test]
fn date_filters_bound_the_stored_range() {
    let tmp = tempfile::tempdir().unwrap();
    let records = sample();
    let log = tmp.path().join("log.jsonl");
    write_log(&log, &records).unwrap();
    let mut times: Vec<_> = records.iter().map(|r| r.timestamp).collect();
    times.sort();
    let (lo, hi) = (times[times.len() / 4], times[3 * times.len() / 4]);
    let opts = IngestOptions {
        min_date: Some(lo),
        max_date: Some(hi),
        topology: None,
    };
    let store = EventStore::open(tmp.path().join("store")).unwrap();
    let report = store.load_log(&log, LogFormat::Jsonl, &opts).unwrap();
    let inside = records.iter().filter(|r| r.timestamp >= lo && r.timestamp <= hi).count();
    assert_eq!(report.accepted + report.duplicates, inside);
    assert_eq!(report.rejected, records.len() - inside);
    for (_, events) in contents(&store) {
        assert!(events.iter().all(|e| e.timestamp >= lo && e.timestamp <= hi));
    }
}

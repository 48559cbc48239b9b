use std::path::Path;
use std::process::{Command, Output};

use ecohabit_core::domain::{ActionCatalog, Recommendation, Verdict};
use ecohabit_core::ingest::{read_log, LogFormat};
use ecohabit_core::matcher::{replay, MatcherConfig};
use ecohabit_core::miner::{Algorithm, MiningConfig};
use ecohabit_core::pipeline::{group_by_home, learn_rules};
use ecohabit_core::rules::{DeriveOptions, RuleDb};
use ecohabit_core::simulator::{evaluate, generate, Metrics, SimConfig, DEFAULT_WINDOW};
use ecohabit_service::{Service, ServiceConfig};
use serde_json::Value;

fn ecohabit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecohabit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ecohabit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SIM: [&str; 8] = ["--homes", "3", "--days", "10", "--train-days", "14", "--seed", "7"];

fn sim_config() -> SimConfig {
    SimConfig {
        seed: 7,
        homes: 3,
        days: 10,
        train_days: 14,
        ..Default::default()
    }
}

/// simulate, ingest, mine, derive, ingest, replay; returns the directory.
fn pipeline() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut sim = vec!["simulate", "--out", "sim"];
    sim.extend(SIM);
    ok(d, &sim);
    ok(d, &["ingest", "--in", "sim/train.jsonl", "--store", "train", "--topology", "sim/topology.json"]);
    ok(d, &["mine", "--store", "train", "--home", "all", "--out", "patterns.jsonl"]);
    ok(d, &["rules", "derive", "--store", "train", "--patterns", "patterns.jsonl", "--out", "rules.jsonl"]);
    ok(d, &["ingest", "--format", "jsonl", "--in", "sim/test.jsonl", "--store", "test"]);
    ok(
        d,
        &["replay", "--store", "test", "--rules", "rules.jsonl", "--topology", "sim/topology.json", "--out", "recs.jsonl"],
    );
    tmp
}

fn read_recs(path: &Path) -> Vec<Recommendation> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_on_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let paths: [&[&str]; 14] = [
        &[],
        &["ingest"],
        &["mine"],
        &["rules"],
        &["rules", "derive"],
        &["rules", "list"],
        &["replay"],
        &["serve"],
        &["feedback"],
        &["feedback", "stats"],
        &["adapt"],
        &["bench"],
        &["simulate"],
        &["evaluate"],
    ];
    for p in paths {
        let mut args = p.to_vec();
        args.push("--help");
        let out = ok(tmp.path(), &args);
        assert!(out.contains("Usage: ecohabit"), "{p:?}: {out}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ecohabit(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error: kind=usage msg="), "{err}");
    assert!(err.contains("Usage:"), "{err}");
}

#[test]
fn support_above_one_is_rejected_before_any_write() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ecohabit(tmp.path(), &["mine", "--min-support", "2", "--store", "s", "--out", "p.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=validation msg="), "{err}");
    assert!(!tmp.path().join("p.jsonl").exists());
    assert!(!tmp.path().join("s").exists());
}

#[test]
fn missing_input_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ecohabit(tmp.path(), &["evaluate", "--recs", "nope.jsonl", "--truth", "nope.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: kind=io msg="));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("eco.conf"), "store = s\ncolour = green\n").unwrap();
    let out = ecohabit(tmp.path(), &["--config", "eco.conf", "rules", "list"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: kind=config msg="), "{}", stderr(&out));
}

#[test]
fn pipeline_matches_the_library() {
    let tmp = pipeline();
    let d = tmp.path();
    let json = ok(d, &["--json", "evaluate", "--recs", "recs.jsonl", "--truth", "sim/truth.jsonl"]);
    let cli: Metrics = serde_json::from_str(&json).unwrap();

    let sim = generate(&sim_config()).unwrap();
    let mut db = RuleDb::default();
    learn_rules(
        &group_by_home(sim.train.iter().cloned()),
        &MiningConfig::default(),
        Algorithm::Growth,
        &ActionCatalog::default(),
        &DeriveOptions::default(),
        &mut db,
    )
    .unwrap();
    let mut lib = replay(&sim.test, &db, MatcherConfig::default(), &sim.topologies()).unwrap();
    let expected = evaluate(&lib, &sim.truth, DEFAULT_WINDOW);
    assert_eq!(cli, expected);
    assert!(expected.forgotten > 0 && expected.recall > 0.0);

    let mut from_cli = read_recs(&d.join("recs.jsonl"));
    from_cli.sort_by(|a, b| a.recommendation_id.cmp(&b.recommendation_id));
    lib.sort_by(|a, b| a.recommendation_id.cmp(&b.recommendation_id));
    assert_eq!(from_cli, lib);

    let table = ok(d, &["evaluate", "--recs", "recs.jsonl", "--truth", "sim/truth.jsonl"]);
    assert!(table.contains("recall") && table.contains("precision"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = pipeline();
    let b = pipeline();
    for f in ["patterns.jsonl", "rules.jsonl", "recs.jsonl", "sim/truth.jsonl", "sim/test.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn config_file_supplies_paths_and_flags_override_it() {
    let tmp = pipeline();
    let d = tmp.path();
    std::fs::write(d.join("eco.conf"), "store = train\nruledb = rules.jsonl\nmin_support = 1.0\n").unwrap();
    // the file's support of 1.0 finds nothing
    let strict: Value =
        serde_json::from_str(&ok(d, &["--config", "eco.conf", "--json", "mine", "--out", "strict.jsonl"])).unwrap();
    assert_eq!(strict["patterns"], 0);
    let loose: Value = serde_json::from_str(&ok(
        d,
        &["--config", "eco.conf", "--json", "mine", "--min-support", "0.001", "--out", "loose.jsonl"],
    ))
    .unwrap();
    assert!(loose["patterns"].as_u64().unwrap() > 0);
    assert_eq!(
        std::fs::read(d.join("loose.jsonl")).unwrap(),
        std::fs::read(d.join("patterns.jsonl")).unwrap()
    );
    let listed: Value = serde_json::from_str(&ok(d, &["--config", "eco.conf", "--json", "rules", "list"])).unwrap();
    assert!(!listed.as_array().unwrap().is_empty());
}

#[test]
fn rules_list_filters_by_state_and_home() {
    let tmp = pipeline();
    let d = tmp.path();
    let all: Value = serde_json::from_str(&ok(d, &["--json", "rules", "list", "--rules", "rules.jsonl"])).unwrap();
    let all = all.as_array().unwrap();
    let home = all[0]["home_id"].as_str().unwrap().to_string();
    let some: Value = serde_json::from_str(&ok(
        d,
        &["--json", "rules", "list", "--rules", "rules.jsonl", "--state", "active", "--home", &home],
    ))
    .unwrap();
    let some = some.as_array().unwrap();
    assert!(!some.is_empty());
    assert!(some.iter().all(|r| r["home_id"] == home.as_str() && r["state"] == "active"));
    let bad = ecohabit(d, &["rules", "list", "--rules", "rules.jsonl", "--state", "sleepy"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn adapt_applies_threshold_and_absent_policy() {
    let tmp = pipeline();
    let d = tmp.path();
    let out: Value = serde_json::from_str(&ok(
        d,
        &["--json", "adapt", "--in", "rules.jsonl", "--out", "rules2.jsonl", "--threshold", "2"],
    ))
    .unwrap();
    let total = out["report"]["before"]["total"].as_u64().unwrap();
    assert!(total > 0);
    assert_eq!(out["report"]["after"]["active"], 0);
    assert_eq!(out["report"]["remaining_before_policy"], 0);
    assert!(out["fit"].is_null());
    let listed: Value =
        serde_json::from_str(&ok(d, &["--json", "rules", "list", "--rules", "rules2.jsonl", "--state", "active"])).unwrap();
    assert!(listed.as_array().unwrap().is_empty());

    // fitting needs feedback history
    let no_history = ecohabit(d, &["adapt", "--in", "rules.jsonl", "--out", "rules3.jsonl", "--fit"]);
    assert_eq!(no_history.status.code(), Some(1));
    assert!(stderr(&no_history).starts_with("error: kind=fit"));
    assert!(!d.join("rules3.jsonl").exists());
}

#[test]
fn feedback_stats_needs_service_state() {
    let tmp = pipeline();
    let out = ecohabit(tmp.path(), &["feedback", "stats", "--rules", "rules.jsonl", "--store", "test"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: kind=not_found"));
}

#[test]
fn bench_reports_agreeing_algorithms() {
    let tmp = tempfile::tempdir().unwrap();
    let out: Value = serde_json::from_str(&ok(
        tmp.path(),
        &["--json", "bench", "--events", "800", "--algos", "growth,levelwise,oracle", "--seed", "3"],
    ))
    .unwrap();
    let entries = out["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().all(|e| e["set_hash"] == entries[0]["set_hash"]));
    let one = ecohabit(tmp.path(), &["bench", "--algos", "growth"]);
    assert_eq!(one.status.code(), Some(2));
}

#[test]
fn feedback_stats_and_adapt_read_service_state() {
    let tmp = pipeline();
    let d = tmp.path();
    let (events, _, _) = read_log(&d.join("sim/test.jsonl"), LogFormat::Jsonl).unwrap();
    let mut svc = Service::open(ServiceConfig::new(d.join("live"), d.join("rules.jsonl"), "t")).unwrap();
    let mut issued: Vec<Recommendation> = Vec::new();
    // answered as soon as issued, before the event clock expires them
    for (home, home_events) in group_by_home(events) {
        for e in home_events {
            for r in svc.post_events(&home, vec![e]).unwrap().recommendations {
                let first = issued.first().map_or(&r.rule_id, |f| &f.rule_id);
                let verdict = if &r.rule_id == first { Verdict::NotUseful } else { Verdict::Useful };
                svc.feedback(&r.recommendation_id, verdict).unwrap();
                issued.push(r);
            }
        }
    }
    assert!(!issued.is_empty());
    let first_rule = issued[0].rule_id.clone();
    drop(svc);

    let stats: Value = serde_json::from_str(&ok(
        d,
        &["--json", "feedback", "stats", "--rules", "rules.jsonl", "--store", "live"],
    ))
    .unwrap();
    assert_eq!(stats["recommendations"], issued.len());
    let view = stats["rules"]
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["rule_id"] == first_rule.as_str())
        .unwrap();
    let mine = issued.iter().filter(|r| r.rule_id == first_rule).count();
    assert_eq!(view["feedback"]["not_useful"], mine);
    assert_eq!(view["weighted_feedback"], -1.0);
    let text = ok(d, &["feedback", "stats", "--rules", "rules.jsonl", "--store", "live"]);
    assert!(text.contains(&first_rule));

    let out: Value = serde_json::from_str(&ok(
        d,
        &["--json", "adapt", "--in", "rules.jsonl", "--store", "live", "--fit", "--threshold", "none", "--out", "next.jsonl"],
    ))
    .unwrap();
    assert!(out["fit"]["points"].as_array().unwrap().len() >= 3);
    assert_eq!(out["report"]["threshold"], Value::Null);
    assert!(d.join("next.jsonl").exists());
}

#[test]
fn serve_needs_a_complete_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ecohabit(d, &["serve"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: kind=validation"));
    std::fs::write(d.join("eco.conf"), "store = s\nruledb = r.jsonl\n").unwrap();
    let out = ecohabit(d, &["--config", "eco.conf", "serve"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error: kind=config") && err.contains("token"), "{err}");
    // present but unreadable rule file
    std::fs::write(d.join("eco.conf"), "store = s\nruledb = r.jsonl\ntoken = t\nlisten = 127.0.0.1:0\n").unwrap();
    let out = ecohabit(d, &["--config", "eco.conf", "serve"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("r.jsonl"), "{}", stderr(&out));
}

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::DateTime;
use ecohabit_core::domain::{
    ActionCategory, AssociationRule, DeviceInfo, EventIdentity, EventRecord, EventSource, HomeTopology, MeterInfo,
    RuleState, Topologies, ZoneInfo,
};
use ecohabit_core::ingest::{write_topologies, EventStore};
use ecohabit_core::matcher::replay;
use ecohabit_core::rules::RuleDb;
use ecohabit_service::webhook::{Deliveries, ACK_FILE, IDEMPOTENCY_HEADER};
use ecohabit_service::{router, AppState, RecommendationView, RulesCensus, Service, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const TOKEN: &str = "secret";
const T0: i64 = 1_414_800_000;

fn rule(home: &str, id: &str, condition: Vec<EventIdentity>, action: EventIdentity, confidence: f64) -> AssociationRule {
    AssociationRule {
        rule_id: id.into(),
        home_id: home.into(),
        pattern_length: condition.len() + 1,
        action_position: condition.len(),
        condition,
        action,
        action_category: ActionCategory::Off,
        source_pattern: Vec::new(),
        confidence,
        pattern_support: 0.01,
        pattern_support_count: 5,
        mined_date: DateTime::UNIX_EPOCH,
        priority: confidence,
        state: RuleState::Active,
    }
}

fn a() -> EventIdentity {
    EventIdentity::new("z1", "d1", "turn on light")
}
fn b() -> EventIdentity {
    EventIdentity::new("z1", "d2", "play music")
}
fn c() -> EventIdentity {
    EventIdentity::new("z1", "d3", "turn off light")
}
fn d() -> EventIdentity {
    EventIdentity::new("z1", "d2", "button pressed")
}

fn topology() -> HomeTopology {
    let dev = |id: &str, name: &str| DeviceInfo {
        device_id: id.into(),
        zone_id: "z1".into(),
        name: name.into(),
        meter_id: "m1".into(),
    };
    HomeTopology {
        home_id: "h1".into(),
        meters: vec![MeterInfo {
            meter_id: "m1".into(),
            name: "main".into(),
        }],
        zones: vec![ZoneInfo {
            zone_id: "z1".into(),
            name: "kitchen".into(),
        }],
        scenes: vec![],
        devices: vec![dev("d1", "ceiling light"), dev("d2", "radio"), dev("d3", "floor lamp")],
    }
}

fn record(home: &str, secs: i64, id: &EventIdentity) -> EventRecord {
    EventRecord::new(
        DateTime::from_timestamp(T0 + secs, 0).unwrap(),
        home,
        &id.zone_id,
        &id.subject_id,
        &id.event_name,
        EventSource::ButtonClick,
    )
}

fn body(events: &[EventRecord]) -> String {
    serde_json::to_string(events).unwrap()
}

struct Fixture {
    _dir: TempDir,
    cfg: ServiceConfig,
}

impl Fixture {
    fn new(rules: Vec<AssociationRule>, with_topology: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ruledb = dir.path().join("rules.db");
        let mut db = RuleDb::default();
        db.insert_all(rules);
        db.save(&ruledb).unwrap();
        let mut cfg = ServiceConfig::new(dir.path().join("store"), ruledb, TOKEN);
        if with_topology {
            let p = dir.path().join("topology.json");
            write_topologies(&p, &[topology()]).unwrap();
            cfg.topology = Some(p);
        }
        Self { _dir: dir, cfg }
    }

    fn basic() -> Self {
        Self::new(vec![rule("h1", "r1", vec![a(), b()], c(), 0.8)], true)
    }

    fn app(&self) -> Router {
        router(AppState::new(Service::open(self.cfg.clone()).unwrap(), None))
    }
}

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, payload: String) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let resp = app.clone().oneshot(req.body(Body::from(payload)).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn post_events(app: &Router, home: &str, events: &[EventRecord]) -> (StatusCode, Value) {
    call(app, "POST", &format!("/homes/{home}/events"), Some(TOKEN), body(events)).await
}

async fn pending(app: &Router, home: &str) -> Vec<RecommendationView> {
    let (s, v) = call(app, "GET", &format!("/homes/{home}/recommendations?status=pending"), Some(TOKEN), String::new()).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

async fn census(app: &Router) -> RulesCensus {
    let (s, v) = call(app, "GET", "/rules", Some(TOKEN), String::new()).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

async fn feedback(app: &Router, id: &str, verdict: &str) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/recommendations/{id}/feedback"),
        Some(TOKEN),
        json!({ "verdict": verdict }).to_string(),
    )
    .await
}

#[tokio::test]
async fn forgotten_action_is_recommended_like_replay() {
    let fx = Fixture::basic();
    let app = fx.app();
    let first = [record("h1", 0, &a()), record("h1", 20, &b())];
    let (s, v) = post_events(&app, "h1", &first).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(v["accepted"], 2);
    let (s, v) = post_events(&app, "h1", &[record("h1", 40, &d())]).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(v["recommendations"].as_array().unwrap().len(), 1);

    let got = pending(&app, "h1").await;
    assert_eq!(got.len(), 1);
    let text = &got[0].recommendation.text;
    assert!(text.contains("floor lamp") && text.contains("kitchen"), "{text}");
    assert_eq!(got[0].feedback_url, format!("/recommendations/{}/feedback", got[0].recommendation.recommendation_id));

    let db = RuleDb::load(&fx.cfg.ruledb).unwrap();
    let all: Vec<EventRecord> = first.iter().cloned().chain([record("h1", 40, &d())]).collect();
    let oracle = replay(&all, &db, fx.cfg.matcher, &Topologies::new([topology()])).unwrap();
    assert_eq!(oracle, vec![got[0].recommendation.clone()]);
}

#[tokio::test]
async fn performed_action_suppresses() {
    let fx = Fixture::basic();
    let app = fx.app();
    let events = [record("h1", 0, &a()), record("h1", 20, &b()), record("h1", 40, &c())];
    let (s, v) = post_events(&app, "h1", &events).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    assert!(v["recommendations"].as_array().unwrap().is_empty());
    // well past the action wait: still nothing
    post_events(&app, "h1", &[record("h1", 4000, &d())]).await;
    assert!(pending(&app, "h1").await.is_empty());
}

#[tokio::test]
async fn bad_token_changes_nothing() {
    let fx = Fixture::basic();
    let app = fx.app();
    let events = [record("h1", 0, &a()), record("h1", 20, &b()), record("h1", 40, &d())];
    for token in [None, Some("wrong")] {
        let (s, v) = call(&app, "POST", "/homes/h1/events", token, body(&events)).await;
        assert_eq!(s, StatusCode::UNAUTHORIZED);
        assert_eq!(v["error"], "unauthorized");
        let (s, _) = call(&app, "GET", "/rules", token, String::new()).await;
        assert_eq!(s, StatusCode::UNAUTHORIZED);
    }
    assert_eq!(EventStore::open(&fx.cfg.store).unwrap().count("h1").unwrap(), 0);
    assert!(pending(&app, "h1").await.is_empty());
    let (s, _) = call(&app, "GET", "/health", None, String::new()).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn malformed_and_unknown() {
    let fx = Fixture::basic();
    let app = fx.app();
    let (s, _) = call(&app, "POST", "/homes/h1/events", Some(TOKEN), "{nope".into()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post_events(&app, "h1", &[record("h2", 0, &a())]).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post_events(&app, "h9", &[record("h9", 0, &a())]).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/homes/h9/recommendations", Some(TOKEN), String::new()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/homes/h1/recommendations?status=bogus", Some(TOKEN), String::new()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = feedback(&app, "h1-000001", "useful").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn feedback_updates_aggregates_once() {
    let fx = Fixture::basic();
    let app = fx.app();
    post_events(&app, "h1", &[record("h1", 0, &a()), record("h1", 20, &b()), record("h1", 40, &d())]).await;
    let id = pending(&app, "h1").await[0].recommendation.recommendation_id.clone();
    let (s, v) = feedback(&app, &id, "useful").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["verdict"], "useful");
    let (s, v) = feedback(&app, &id, "not_useful").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");
    let c = census(&app).await;
    assert_eq!(c.rules[0].feedback.useful, 1);
    assert_eq!(c.rules[0].feedback.not_useful, 0);
    assert_eq!(c.rules[0].weighted_feedback, Some(1.0));
    assert!(pending(&app, "h1").await.is_empty());
    // a bare word works as well
    let (s, _) = call(&app, "POST", &format!("/recommendations/{id}/feedback"), Some(TOKEN), "yes".into()).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

/// Triggers one recommendation per block, blocks two hours apart so the
/// cooldown has passed.
async fn trigger(app: &Router, blocks: std::ops::Range<i64>) -> Vec<String> {
    let mut ids = Vec::new();
    for k in blocks {
        let t = k * 7200;
        let (_, v) = post_events(app, "h1", &[record("h1", t, &a()), record("h1", t + 20, &b()), record("h1", t + 40, &d())]).await;
        for r in v["recommendations"].as_array().unwrap() {
            ids.push(r["recommendation_id"].as_str().unwrap().to_string());
        }
    }
    ids
}

#[tokio::test]
async fn tenth_negative_excludes_rule() {
    let fx = Fixture::basic();
    let app = fx.app();
    let ids = trigger(&app, 0..11).await;
    assert_eq!(ids.len(), 11);
    for (k, id) in ids.iter().take(10).enumerate() {
        let (s, v) = feedback(&app, id, "not_useful").await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["excluded"], k == 9);
        let state = census(&app).await.rules[0].rule.state;
        let expected = if k == 9 { RuleState::ExcludedByFeedback } else { RuleState::Active };
        assert_eq!(state, expected, "after verdict {}", k + 1);
    }
    let c = census(&app).await;
    assert_eq!(c.counts.excluded_by_feedback, 1);
    assert_eq!(c.rules[0].feedback.streak, 10);
    // the exclusion is durable and stops matching
    assert_eq!(RuleDb::load(&fx.cfg.ruledb).unwrap().get("r1").unwrap().state, RuleState::ExcludedByFeedback);
    assert!(trigger(&app, 20..22).await.is_empty());
}

#[tokio::test]
async fn reorder_tolerance() {
    let fx = Fixture::basic();
    let app = fx.app();
    post_events(&app, "h1", &[record("h1", 1000, &d())]).await;
    // within a batch order does not matter
    let (s, v) = post_events(&app, "h1", &[record("h1", 1020, &b()), record("h1", 1010, &a())]).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(v["accepted"], 2);
    let (s, v) = post_events(&app, "h1", &[record("h1", 975, &a())]).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!((v["accepted"].as_u64(), v["late"].as_u64()), (Some(0), Some(1)));
    let (s, v) = post_events(&app, "h1", &[record("h1", 1030, &d()), record("h1", 900, &a())]).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    let store = EventStore::open(&fx.cfg.store).unwrap();
    assert_eq!(store.count("h1").unwrap(), 4);
    let (_, v) = post_events(&app, "h1", &[record("h1", 1020, &b()), record("h1", 1040, &d())]).await;
    assert_eq!((v["accepted"].as_u64(), v["duplicates"].as_u64()), (Some(1), Some(1)));
    assert_eq!(v["recommendations"].as_array().unwrap().len(), 1);
    let times: Vec<i64> = store.events("h1").unwrap().iter().map(|e| e.timestamp.timestamp() - T0).collect();
    assert_eq!(times, vec![975, 1000, 1010, 1020, 1040]);
}

#[tokio::test]
async fn expired_recommendations_leave_the_inbox() {
    let fx = Fixture::basic();
    let app = fx.app();
    let ids = trigger(&app, 0..1).await;
    post_events(&app, "h1", &[record("h1", 49 * 3600, &d())]).await;
    assert!(pending(&app, "h1").await.is_empty());
    let (_, v) = call(&app, "GET", "/homes/h1/recommendations?status=expired", Some(TOKEN), String::new()).await;
    assert_eq!(v[0]["recommendation_id"], ids[0].as_str());
    let (s, _) = feedback(&app, &ids[0], "useful").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(census(&app).await.rules[0].feedback.unanswered, 1);
}

#[tokio::test]
async fn restart_keeps_acknowledged_state() {
    let fx = Fixture::basic();
    let ids = {
        let app = fx.app();
        let ids = trigger(&app, 0..3).await;
        feedback(&app, &ids[0], "useful").await;
        feedback(&app, &ids[1], "not_useful").await;
        ids
    };
    let app = fx.app();
    let all: Vec<RecommendationView> = serde_json::from_value(
        call(&app, "GET", "/homes/h1/recommendations", Some(TOKEN), String::new()).await.1,
    )
    .unwrap();
    let statuses: Vec<&str> = all.iter().map(|r| r.recommendation.status.as_str()).collect();
    assert_eq!(statuses, vec!["useful", "not_useful", "pending"]);
    let c = census(&app).await;
    assert_eq!((c.rules[0].feedback.useful, c.rules[0].feedback.not_useful, c.rules[0].feedback.streak), (1, 1, 1));
    let (s, _) = feedback(&app, &ids[0], "useful").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(EventStore::open(&fx.cfg.store).unwrap().count("h1").unwrap(), 9);
    // ids continue, old events are not matched again
    let more = trigger(&app, 3..4).await;
    assert_eq!(more, vec!["h1-000004".to_string()]);
    let (s, _) = post_events(&app, "h1", &[record("h1", 100, &a())]).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn census_counts_rules_with_recommendations() {
    let ident = |i: usize, n: &str| EventIdentity::new("z", &format!("s{i:02}"), n);
    let rules: Vec<AssociationRule> = (0..54)
        .map(|i| rule("h2", &format!("r{i:02}"), vec![ident(i, "a"), ident(i, "b")], ident(i, "off"), 0.5 + i as f64 / 200.0))
        .collect();
    let fx = Fixture::new(rules, false);
    let app = fx.app();
    let mut events = Vec::new();
    for i in 0..23 {
        let t = i as i64 * 1800;
        events.push(record("h2", t, &ident(i, "a")));
        events.push(record("h2", t + 10, &ident(i, "b")));
        events.push(record("h2", t + 20, &EventIdentity::new("z", "x", "x")));
    }
    let (s, v) = post_events(&app, "h2", &events).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(v["recommendations"].as_array().unwrap().len(), 23);
    let c = census(&app).await;
    assert_eq!(c.counts.total, 54);
    assert_eq!(c.rules_with_recommendations, 23);
    assert_eq!(c.recommendations, 23);
    let sum = c.counts.active + c.counts.below_threshold + c.counts.excluded_by_feedback + c.counts.excluded_by_policy;
    assert_eq!(sum, c.counts.total);
    let issued: usize = c.rules.iter().map(|r| r.recommendations_issued).sum();
    assert_eq!(issued, 23);
}

#[tokio::test]
async fn empty_db_has_empty_census() {
    let fx = Fixture::new(vec![], false);
    let c = census(&fx.app()).await;
    assert_eq!(c.counts.total, 0);
    assert!(c.rules.is_empty());
    assert_eq!(c.rules_with_recommendations, 0);
}

#[tokio::test]
async fn absent_policy_override() {
    let mut r = rule("h1", "r1", vec![a(), b()], c(), 0.8);
    r.action_category = ActionCategory::Absent;
    let mut fx = Fixture::new(vec![r], true);
    fx.cfg.exclude_absent = Some(true);
    let c = census(&fx.app()).await;
    assert_eq!(c.counts.excluded_by_policy, 1);
}

#[tokio::test]
async fn webhook_retries_with_idempotency_key() {
    let seen: Arc<Mutex<Vec<(String, String)>>> = Arc::default();
    let hook = {
        let seen = seen.clone();
        axum::Router::new().route(
            "/hook",
            axum::routing::post(move |headers: axum::http::HeaderMap, payload: String| {
                let seen = seen.clone();
                async move {
                    let key = headers.get(IDEMPOTENCY_HEADER).unwrap().to_str().unwrap().to_string();
                    let mut seen = seen.lock().unwrap();
                    seen.push((key, payload));
                    // the first attempt fails
                    if seen.len() == 1 {
                        StatusCode::SERVICE_UNAVAILABLE
                    } else {
                        StatusCode::OK
                    }
                }
            }),
        )
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, hook).await.unwrap() });

    let mut fx = Fixture::basic();
    fx.cfg.webhooks.insert("h1".into(), format!("http://{addr}/hook"));
    let svc = Service::open(fx.cfg.clone()).unwrap();
    let deliveries = Deliveries::start(&svc).unwrap();
    let app = router(AppState::new(svc, deliveries));
    let ids = trigger(&app, 0..1).await;

    let ack = fx.cfg.state_dir().join(ACK_FILE);
    for _ in 0..100 {
        if std::fs::read_to_string(&ack).is_ok_and(|s| s.contains(&ids[0])) {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let seen = seen.lock().unwrap().clone();
    assert_eq!(seen.len(), 2);
    assert!(seen.iter().all(|(k, _)| k == &ids[0]));
    let delivered: Value = serde_json::from_str(&seen[1].1).unwrap();
    assert_eq!(delivered["rule_id"], "r1");
    assert!(std::fs::read_to_string(&ack).unwrap().contains(&ids[0]));
}

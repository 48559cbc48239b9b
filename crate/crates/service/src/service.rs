//! Request handling without the HTTP layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ecohabit_core::domain::{
    AssociationRule, EventRecord, FeedbackEntry, Recommendation, RecommendationStatus, Timestamp, Topologies, Verdict,
};
use ecohabit_core::feedback::{weighted_feedback, FeedbackError, FeedbackLedger, FeedbackOutcome, RuleFeedback};
use ecohabit_core::ingest::{read_topologies, EventStore};
use ecohabit_core::matcher::Matcher;
use ecohabit_core::rules::{RuleDb, StateCounts};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::ServiceError;

pub const RECOMMENDATIONS_FILE: &str = "recommendations.jsonl";
pub const FEEDBACK_FILE: &str = "feedback.jsonl";

/// Reply to an event batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsReport {
    pub received: usize,
    /// New events that were stored and matched.
    pub accepted: usize,
    pub duplicates: usize,
    /// Stored but not matched: older than the last matched event, within
    /// the reorder tolerance.
    pub late: usize,
    pub recommendations: Vec<Recommendation>,
}

/// A recommendation as served, with its feedback link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationView {
    #[serde(flatten)]
    pub recommendation: Recommendation,
    pub feedback_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleView {
    #[serde(flatten)]
    pub rule: AssociationRule,
    /// Counters of the current feedback phase.
    pub feedback: RuleFeedback,
    pub weighted_feedback: Option<f64>,
    /// Recommendations ever issued for the rule.
    pub recommendations_issued: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulesCensus {
    pub counts: StateCounts,
    /// Rules with at least one issued recommendation.
    pub rules_with_recommendations: usize,
    pub recommendations: usize,
    pub rules: Vec<RuleView>,
}

#[derive(Debug, Clone)]
struct Cursor {
    watermark: Timestamp,
    /// Stored events carrying exactly the watermark timestamp.
    at_watermark: Vec<EventRecord>,
}

pub struct Service {
    cfg: ServiceConfig,
    store: EventStore,
    topologies: Topologies,
    db: RuleDb,
    ledger: FeedbackLedger,
    matcher: Matcher,
    recs: BTreeMap<String, Recommendation>,
    cursors: BTreeMap<String, Cursor>,
    next_seq: BTreeMap<String, u64>,
    recs_path: PathBuf,
    feedback_path: PathBuf,
    outbox: Vec<Recommendation>,
}

fn io_msg(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(format!("{}: {e}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_msg(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_msg(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io_msg(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ServiceError> {
    if items.is_empty() {
        return Ok(());
    }
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| io_msg(path, e))?;
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_msg(path, e))?;
    f.write_all(&buf).map_err(|e| io_msg(path, e))?;
    f.sync_data().map_err(|e| io_msg(path, e))
}

fn seq_of(id: &str) -> Option<u64> {
    id.rsplit_once('-').and_then(|(_, n)| n.parse().ok())
}

impl Service {
    /// Opens the store, rule file and persisted recommendations, and
    /// rebuilds the feedback ledger.
    pub fn open(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let store = EventStore::open(&cfg.store).map_err(|e| ServiceError::Config(e.to_string()))?;
        let mut db = RuleDb::load(&cfg.ruledb).map_err(|e| ServiceError::Config(e.to_string()))?;
        if let Some(flag) = cfg.exclude_absent {
            db.policy.exclude_absent_actions = flag;
            db.recompute();
        }
        let topologies = match &cfg.topology {
            Some(p) => read_topologies(p).map_err(|e| ServiceError::Config(e.to_string()))?,
            None => Topologies::default(),
        };
        let state_dir = cfg.state_dir().to_path_buf();
        fs::create_dir_all(&state_dir).map_err(|e| ServiceError::Config(format!("{}: {e}", state_dir.display())))?;
        let recs_path = state_dir.join(RECOMMENDATIONS_FILE);
        let feedback_path = state_dir.join(FEEDBACK_FILE);
        for p in [&recs_path, &feedback_path] {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| ServiceError::Config(format!("{} is not writable: {e}", p.display())))?;
        }

        // last line per id wins; first appearance fixes the order
        let mut order = Vec::new();
        let mut recs: BTreeMap<String, Recommendation> = BTreeMap::new();
        for r in read_jsonl::<Recommendation>(&recs_path)? {
            if !recs.contains_key(&r.recommendation_id) {
                order.push(r.recommendation_id.clone());
            }
            recs.insert(r.recommendation_id.clone(), r);
        }
        let entries: Vec<FeedbackEntry> = read_jsonl(&feedback_path)?;
        let ordered: Vec<Recommendation> = order.iter().map(|id| recs[id].clone()).collect();
        let mut ledger = FeedbackLedger::rebuild(cfg.feedback, &ordered, &entries, &mut db)
            .map_err(|e| ServiceError::Internal(format!("feedback history: {e}")))?;
        for r in recs.values_mut() {
            if r.status == RecommendationStatus::Expired {
                ledger
                    .expire_one(&r.recommendation_id)
                    .map_err(|e| ServiceError::Internal(e.to_string()))?;
            }
            r.status = ledger.status(&r.recommendation_id).unwrap_or(r.status);
        }

        let mut cursors = BTreeMap::new();
        for home in store.homes()? {
            let events = store.events(&home)?;
            if let Some(last) = events.last() {
                let watermark = last.timestamp;
                let at_watermark = events.iter().rev().take_while(|e| e.timestamp == watermark).cloned().collect();
                cursors.insert(home, Cursor { watermark, at_watermark });
            }
        }
        let mut next_seq: BTreeMap<String, u64> = BTreeMap::new();
        for r in recs.values() {
            let n = seq_of(&r.recommendation_id).unwrap_or(0) + 1;
            let e = next_seq.entry(r.home_id.clone()).or_insert(1);
            *e = (*e).max(n);
        }
        let mut matcher = Matcher::new(&db, cfg.matcher, topologies.clone())?;
        for (home, &n) in &next_seq {
            matcher.add_home(home, &db, n)?;
        }
        Ok(Self {
            cfg,
            store,
            topologies,
            db,
            ledger,
            matcher,
            recs,
            cursors,
            next_seq,
            recs_path,
            feedback_path,
            outbox: Vec::new(),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn db(&self) -> &RuleDb {
        &self.db
    }

    pub fn ledger(&self) -> &FeedbackLedger {
        &self.ledger
    }

    /// A home is known once it appears in the topology, the rules, the
    /// store or the issued recommendations.
    pub fn knows_home(&self, home_id: &str) -> bool {
        self.topologies.contains(home_id)
            || self.cursors.contains_key(home_id)
            || self.db.rules().any(|r| r.home_id == home_id)
            || self.recs.values().any(|r| r.home_id == home_id)
    }

    /// Stores a batch for one home and advances its matcher.
    pub fn post_events(&mut self, home_id: &str, mut batch: Vec<EventRecord>) -> Result<EventsReport, ServiceError> {
        if !self.topologies.is_empty() && !self.topologies.contains(home_id) {
            return Err(ServiceError::NotFound(format!("unknown home {home_id}")));
        }
        if let Some(e) = batch.iter().find(|e| &*e.home_id != home_id) {
            return Err(ServiceError::BadRequest(format!(
                "event for home {} posted to home {home_id}",
                e.home_id
            )));
        }
        let received = batch.len();
        batch.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        batch.dedup();
        let mut duplicates = received - batch.len();

        let cursor = self.cursors.get(home_id).cloned();
        let (late, fresh): (Vec<EventRecord>, Vec<EventRecord>) = match &cursor {
            None => (Vec::new(), batch),
            Some(c) => {
                let tolerance = chrono::Duration::from_std(self.cfg.reorder_tolerance).unwrap_or(chrono::Duration::MAX);
                if let Some(e) = batch.iter().find(|e| e.timestamp < c.watermark - tolerance) {
                    return Err(ServiceError::Conflict(format!(
                        "event at {} is older than {} minus the reorder tolerance",
                        e.timestamp.to_rfc3339(),
                        c.watermark.to_rfc3339()
                    )));
                }
                let (late, rest): (Vec<_>, Vec<_>) = batch.into_iter().partition(|e| e.timestamp < c.watermark);
                let before = rest.len();
                let fresh: Vec<_> = rest.into_iter().filter(|e| !c.at_watermark.contains(e)).collect();
                duplicates += before - fresh.len();
                (late, fresh)
            }
        };

        let late_out = self.store.append(home_id, late)?;
        duplicates += late_out.duplicates;
        let fresh_out = self.store.append(home_id, fresh.clone())?;
        duplicates += fresh_out.duplicates;
        if let Some(last) = fresh.last() {
            let watermark = last.timestamp;
            let c = self.cursors.entry(home_id.to_string()).or_insert_with(|| Cursor {
                watermark,
                at_watermark: Vec::new(),
            });
            if c.watermark != watermark {
                c.watermark = watermark;
                c.at_watermark.clear();
            }
            c.at_watermark.extend(fresh.iter().filter(|e| e.timestamp == watermark).cloned());
        }

        if !self.matcher.has_home(home_id) {
            let next = self.next_seq.get(home_id).copied().unwrap_or(1);
            self.matcher.add_home(home_id, &self.db, next)?;
        }
        let mut issued = Vec::new();
        for e in &fresh {
            issued.extend(self.matcher.on_event(e)?);
        }
        for r in &issued {
            self.ledger
                .register(r)
                .map_err(|e| ServiceError::Internal(e.to_string()))?;
            if let Some(n) = seq_of(&r.recommendation_id) {
                self.next_seq.insert(home_id.to_string(), n + 1);
            }
            self.recs.insert(r.recommendation_id.clone(), r.clone());
        }
        let mut changed = issued.clone();
        if let Some(c) = self.cursors.get(home_id) {
            changed.extend(self.expire_home(home_id, c.watermark)?);
        }
        append_jsonl(&self.recs_path, &changed)?;
        self.outbox.extend(issued.iter().cloned());

        Ok(EventsReport {
            received,
            accepted: fresh_out.accepted,
            duplicates,
            late: late_out.accepted,
            recommendations: issued,
        })
    }

    fn expire_home(&mut self, home_id: &str, now: Timestamp) -> Result<Vec<Recommendation>, ServiceError> {
        let limit = chrono::Duration::from_std(self.cfg.feedback.expiry).unwrap_or(chrono::Duration::MAX);
        let mut out = Vec::new();
        for r in self.recs.values_mut() {
            if r.home_id == home_id && r.status == RecommendationStatus::Pending && now - r.created_at > limit {
                self.ledger
                    .expire_one(&r.recommendation_id)
                    .map_err(|e| ServiceError::Internal(e.to_string()))?;
                r.status = RecommendationStatus::Expired;
                out.push(r.clone());
            }
        }
        Ok(out)
    }

    /// Recommendations of a home by id, optionally filtered by status.
    pub fn recommendations(
        &self,
        home_id: &str,
        status: Option<RecommendationStatus>,
    ) -> Result<Vec<RecommendationView>, ServiceError> {
        if !self.knows_home(home_id) {
            return Err(ServiceError::NotFound(format!("unknown home {home_id}")));
        }
        Ok(self
            .recs
            .values()
            .filter(|r| r.home_id == home_id && status.is_none_or(|s| r.status == s))
            .map(|r| RecommendationView {
                feedback_url: format!("/recommendations/{}/feedback", r.recommendation_id),
                recommendation: r.clone(),
            })
            .collect())
    }

    pub fn recommendation(&self, id: &str) -> Option<&Recommendation> {
        self.recs.get(id)
    }

    /// Records a verdict. The entry is on disk before any state changes.
    pub fn feedback(&mut self, id: &str, verdict: Verdict) -> Result<FeedbackOutcome, ServiceError> {
        let rec = self
            .recs
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown recommendation {id}")))?;
        if rec.status != RecommendationStatus::Pending {
            return Err(ServiceError::Conflict(format!(
                "recommendation {id} is already {}",
                rec.status.as_str()
            )));
        }
        let at = self
            .cursors
            .get(&rec.home_id)
            .map_or(rec.created_at, |c| c.watermark.max(rec.created_at));
        let entry = FeedbackEntry {
            recommendation_id: id.to_string(),
            verdict,
            received_at: at,
        };
        append_jsonl(&self.feedback_path, std::slice::from_ref(&entry))?;
        let outcome = self
            .ledger
            .record(id, verdict, at, &mut self.db)
            .map_err(|e| match e {
                FeedbackError::UnknownRecommendation(_) => ServiceError::NotFound(e.to_string()),
                FeedbackError::NotPending { .. } => ServiceError::Conflict(e.to_string()),
                other => ServiceError::Internal(other.to_string()),
            })?;
        let rec = self.recs.get_mut(id).expect("checked above");
        rec.status = match verdict {
            Verdict::Useful => RecommendationStatus::Useful,
            Verdict::NotUseful => RecommendationStatus::NotUseful,
        };
        let updated = rec.clone();
        append_jsonl(&self.recs_path, &[updated])?;
        if outcome.excluded {
            self.matcher.disable_rule(&outcome.rule_id);
            self.db.save(&self.cfg.ruledb)?;
        }
        Ok(outcome)
    }

    pub fn census(&self) -> RulesCensus {
        let mut issued: BTreeMap<&str, usize> = BTreeMap::new();
        for r in self.recs.values() {
            *issued.entry(r.rule_id.as_str()).or_default() += 1;
        }
        let rules: Vec<RuleView> = self
            .db
            .rules()
            .map(|r| {
                let fb = self.ledger.rule_stats(&r.rule_id);
                RuleView {
                    rule: r.clone(),
                    feedback: fb,
                    weighted_feedback: weighted_feedback(fb.useful, fb.not_useful),
                    recommendations_issued: issued.get(r.rule_id.as_str()).copied().unwrap_or(0),
                }
            })
            .collect();
        let known: BTreeSet<&str> = rules.iter().map(|v| v.rule.rule_id.as_str()).collect();
        RulesCensus {
            counts: self.db.census(),
            rules_with_recommendations: issued.keys().filter(|id| known.contains(*id)).count(),
            recommendations: self.recs.len(),
            rules,
        }
    }

    /// The rule database and feedback ledger, for offline adaptation.
    pub fn into_parts(self) -> (RuleDb, FeedbackLedger) {
        (self.db, self.ledger)
    }

    /// Newly issued recommendations not yet handed to a delivery channel.
    pub fn take_outbox(&mut self) -> Vec<Recommendation> {
        std::mem::take(&mut self.outbox)
    }

    /// Every issued recommendation of a home in id order.
    pub fn issued_for(&self, home_id: &str) -> Vec<Recommendation> {
        self.recs.values().filter(|r| r.home_id == home_id).cloned().collect()
    }
}

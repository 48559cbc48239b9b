//! Inhabitant verdicts, the consecutive-negative exclusion, the feedback
//! regression and the phase adaptation.

use std::collections::BTreeMap;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FeedbackEntry, Recommendation, RecommendationStatus, RuleState, Timestamp, Verdict};
use crate::rules::{RuleDb, RuleWeights, StateCounts};

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("unknown recommendation {0}")]
    UnknownRecommendation(String),
    #[error("recommendation {id} is already {status}")]
    NotPending { id: String, status: String },
    #[error("recommendation {0} is already registered")]
    DuplicateRecommendation(String),
    #[error("insufficient data: {0} rules with answered feedback, need at least 3")]
    InsufficientData(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    /// Consecutive negative verdicts that exclude a rule.
    pub streak_limit: u32,
    /// Pending recommendations older than this expire.
    #[serde(with = "crate::durfmt")]
    pub expiry: Duration,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            streak_limit: 10,
            expiry: Duration::from_secs(48 * 3600),
        }
    }
}

/// Per-rule counters for the current phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleFeedback {
    pub recommendations: u64,
    pub useful: u64,
    pub not_useful: u64,
    pub unanswered: u64,
    /// Consecutive `not_useful` verdicts.
    pub streak: u32,
}

impl RuleFeedback {
    pub fn answered(&self) -> u64 {
        self.useful + self.not_useful
    }
}

/// `(useful - not_useful) / answered`, undefined without answers.
pub fn weighted_feedback(useful: u64, not_useful: u64) -> Option<f64> {
    let answered = useful + not_useful;
    (answered > 0).then(|| (useful as f64 - not_useful as f64) / answered as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrackedRec {
    rule_id: String,
    #[serde(with = "crate::timefmt")]
    created_at: Timestamp,
    status: RecommendationStatus,
    phase: u32,
}

/// Outcome of one recorded verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub recommendation_id: String,
    pub rule_id: String,
    pub verdict: Verdict,
    pub streak: u32,
    /// The verdict pushed the rule to its exclusion.
    pub excluded: bool,
}

/// Append-only record of recommendations and verdicts, with counters for
/// the current phase.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLedger {
    cfg: FeedbackConfig,
    recs: BTreeMap<String, TrackedRec>,
    entries: Vec<FeedbackEntry>,
    phase: u32,
    /// Index of the first entry of the current phase.
    phase_start: usize,
    stats: BTreeMap<String, RuleFeedback>,
}

impl FeedbackLedger {
    pub fn new(cfg: FeedbackConfig) -> Self {
        Self {
            cfg,
            recs: BTreeMap::new(),
            entries: Vec::new(),
            phase: 1,
            phase_start: 0,
            stats: BTreeMap::new(),
        }
    }

    /// Rebuilds a ledger from delivered recommendations and recorded
    /// verdicts (both in their original order).
    pub fn rebuild(
        cfg: FeedbackConfig,
        recs: &[Recommendation],
        entries: &[FeedbackEntry],
        db: &mut RuleDb,
    ) -> Result<Self, FeedbackError> {
        let mut l = Self::new(cfg);
        for r in recs {
            l.register(r)?;
        }
        for e in entries {
            l.record(&e.recommendation_id, e.verdict, e.received_at, db)?;
        }
        Ok(l)
    }

    pub fn config(&self) -> &FeedbackConfig {
        &self.cfg
    }

    pub fn phase(&self) -> u32 {
        self.phase
    }

    pub fn entries(&self) -> &[FeedbackEntry] {
        &self.entries
    }

    pub fn stats(&self) -> &BTreeMap<String, RuleFeedback> {
        &self.stats
    }

    pub fn rule_stats(&self, rule_id: &str) -> RuleFeedback {
        self.stats.get(rule_id).copied().unwrap_or_default()
    }

    pub fn status(&self, recommendation_id: &str) -> Option<RecommendationStatus> {
        self.recs.get(recommendation_id).map(|r| r.status)
    }

    /// Every tracked recommendation id, sorted.
    pub fn recommendation_ids(&self) -> impl Iterator<Item = &str> {
        self.recs.keys().map(String::as_str)
    }

    pub fn rule_of(&self, recommendation_id: &str) -> Option<&str> {
        self.recs.get(recommendation_id).map(|r| r.rule_id.as_str())
    }

    /// Starts tracking a delivered recommendation.
    pub fn register(&mut self, rec: &Recommendation) -> Result<(), FeedbackError> {
        if self.recs.contains_key(&rec.recommendation_id) {
            return Err(FeedbackError::DuplicateRecommendation(rec.recommendation_id.clone()));
        }
        self.recs.insert(
            rec.recommendation_id.clone(),
            TrackedRec {
                rule_id: rec.rule_id.clone(),
                created_at: rec.created_at,
                status: RecommendationStatus::Pending,
                phase: self.phase,
            },
        );
        self.stats.entry(rec.rule_id.clone()).or_default().recommendations += 1;
        Ok(())
    }

    /// Records a verdict; a rule reaching the streak limit is excluded in
    /// `db`.
    pub fn record(
        &mut self,
        recommendation_id: &str,
        verdict: Verdict,
        at: Timestamp,
        db: &mut RuleDb,
    ) -> Result<FeedbackOutcome, FeedbackError> {
        let rec = self
            .recs
            .get_mut(recommendation_id)
            .ok_or_else(|| FeedbackError::UnknownRecommendation(recommendation_id.to_string()))?;
        if rec.status != RecommendationStatus::Pending {
            return Err(FeedbackError::NotPending {
                id: recommendation_id.to_string(),
                status: rec.status.as_str().to_string(),
            });
        }
        rec.status = match verdict {
            Verdict::Useful => RecommendationStatus::Useful,
            Verdict::NotUseful => RecommendationStatus::NotUseful,
        };
        let rule_id = rec.rule_id.clone();
        let counts_now = rec.phase == self.phase;
        self.entries.push(FeedbackEntry {
            recommendation_id: recommendation_id.to_string(),
            verdict,
            received_at: at,
        });
        let mut excluded = false;
        let mut streak = 0;
        if counts_now {
            let s = self.stats.entry(rule_id.clone()).or_default();
            match verdict {
                Verdict::Useful => {
                    s.useful += 1;
                    s.streak = 0;
                }
                Verdict::NotUseful => {
                    s.not_useful += 1;
                    s.streak += 1;
                }
            }
            streak = s.streak;
            let limit = self.cfg.streak_limit;
            if verdict == Verdict::NotUseful && s.streak >= limit {
                let already = db.get(&rule_id).map(|r| r.state) == Some(RuleState::ExcludedByFeedback);
                if !already && db.exclude_by_feedback(&rule_id) {
                    excluded = true;
                }
            }
        }
        Ok(FeedbackOutcome {
            recommendation_id: recommendation_id.to_string(),
            rule_id,
            verdict,
            streak,
            excluded,
        })
    }

    /// Expires pending recommendations created more than `expiry` before
    /// `now`. Returns the expired ids.
    pub fn expire(&mut self, now: Timestamp) -> Vec<String> {
        let limit = chrono::Duration::from_std(self.cfg.expiry).unwrap_or(chrono::Duration::MAX);
        let mut out = Vec::new();
        for (id, rec) in &mut self.recs {
            if rec.status == RecommendationStatus::Pending && now - rec.created_at > limit {
                rec.status = RecommendationStatus::Expired;
                if rec.phase == self.phase {
                    self.stats.entry(rec.rule_id.clone()).or_default().unanswered += 1;
                }
                out.push(id.clone());
            }
        }
        out
    }

    /// Expires one pending recommendation regardless of its age. Returns
    /// false if it was not pending.
    pub fn expire_one(&mut self, recommendation_id: &str) -> Result<bool, FeedbackError> {
        let rec = self
            .recs
            .get_mut(recommendation_id)
            .ok_or_else(|| FeedbackError::UnknownRecommendation(recommendation_id.to_string()))?;
        if rec.status != RecommendationStatus::Pending {
            return Ok(false);
        }
        rec.status = RecommendationStatus::Expired;
        if rec.phase == self.phase {
            self.stats.entry(rec.rule_id.clone()).or_default().unanswered += 1;
        }
        Ok(true)
    }

    /// Starts a new phase: counters and streaks restart from zero, history
    /// is kept.
    pub fn reset_phase(&mut self) {
        self.phase += 1;
        self.phase_start = self.entries.len();
        self.stats.clear();
    }

    /// Counters of the current phase recomputed from the history alone.
    pub fn recompute_stats(&self) -> BTreeMap<String, RuleFeedback> {
        let mut stats: BTreeMap<String, RuleFeedback> = BTreeMap::new();
        for rec in self.recs.values().filter(|r| r.phase == self.phase) {
            let s = stats.entry(rec.rule_id.clone()).or_default();
            s.recommendations += 1;
            if rec.status == RecommendationStatus::Expired {
                s.unanswered += 1;
            }
        }
        for e in &self.entries[self.phase_start..] {
            let rec = &self.recs[&e.recommendation_id];
            if rec.phase != self.phase {
                continue;
            }
            let s = stats.entry(rec.rule_id.clone()).or_default();
            match e.verdict {
                Verdict::Useful => {
                    s.useful += 1;
                    s.streak = 0;
                }
                Verdict::NotUseful => {
                    s.not_useful += 1;
                    s.streak += 1;
                }
            }
        }
        stats
    }
}

/// One rule as seen by the regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub rule_id: String,
    pub confidence: f64,
    pub pattern_length: usize,
    pub pattern_support: f64,
    pub action_position: usize,
    pub weighted_feedback: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    /// Regressors are collinear; weights fall back to the defaults.
    RankDeficient,
}

/// Ordinary least squares of weighted feedback on confidence and pattern
/// length, with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub status: FitStatus,
    pub intercept: f64,
    pub beta_confidence: f64,
    pub beta_length: f64,
    /// Standard errors; `None` without residual degrees of freedom.
    pub se_intercept: Option<f64>,
    pub se_confidence: Option<f64>,
    pub se_length: Option<f64>,
    pub residual_sd: Option<f64>,
    pub points: Vec<FitPoint>,
}

impl RegressionFit {
    /// Weights to apply: the estimates, or the defaults when the fit is
    /// flagged.
    pub fn weights(&self) -> RuleWeights {
        match self.status {
            FitStatus::Ok => RuleWeights {
                beta_confidence: self.beta_confidence,
                beta_length: self.beta_length,
            },
            FitStatus::RankDeficient => RuleWeights::default(),
        }
    }
}

/// Per-rule points for every rule of `db` with answered feedback in the
/// current phase.
pub fn fit_points(ledger: &FeedbackLedger, db: &RuleDb) -> Vec<FitPoint> {
    db.rules()
        .filter_map(|r| {
            let s = ledger.rule_stats(&r.rule_id);
            weighted_feedback(s.useful, s.not_useful).map(|wf| FitPoint {
                rule_id: r.rule_id.clone(),
                confidence: r.confidence,
                pattern_length: r.pattern_length,
                pattern_support: r.pattern_support,
                action_position: r.action_position,
                weighted_feedback: wf,
            })
        })
        .collect()
}

pub fn fit_regression(ledger: &FeedbackLedger, db: &RuleDb) -> Result<RegressionFit, FeedbackError> {
    fit_points_ols(fit_points(ledger, db))
}

/// OLS over explicit points.
pub fn fit_points_ols(points: Vec<FitPoint>) -> Result<RegressionFit, FeedbackError> {
    let n = points.len();
    if n < 3 {
        return Err(FeedbackError::InsufficientData(n));
    }
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => points[i].confidence,
        _ => points[i].pattern_length as f64,
    });
    let y = DVector::from_iterator(n, points.iter().map(|p| p.weighted_feedback));

    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax.is_nan() || smax <= 0.0 || smin <= smax * 1e-10 {
        return Ok(RegressionFit {
            status: FitStatus::RankDeficient,
            intercept: 0.0,
            beta_confidence: RuleWeights::default().beta_confidence,
            beta_length: RuleWeights::default().beta_length,
            se_intercept: None,
            se_confidence: None,
            se_length: None,
            residual_sd: None,
            points,
        });
    }
    let beta = svd.solve(&y, 0.0).expect("full rank system");
    let resid = &y - &x * &beta;
    let dof = n - 3;
    let (se, sd) = if dof > 0 {
        let sigma2 = resid.norm_squared() / dof as f64;
        let xtx_inv = (x.transpose() * &x).try_inverse().expect("full rank normal matrix");
        let se = |k: usize| Some((sigma2 * xtx_inv[(k, k)]).max(0.0).sqrt());
        ([se(0), se(1), se(2)], Some(sigma2.sqrt()))
    } else {
        ([None; 3], None)
    };
    Ok(RegressionFit {
        status: FitStatus::Ok,
        intercept: beta[0],
        beta_confidence: beta[1],
        beta_length: beta[2],
        se_intercept: se[0],
        se_confidence: se[1],
        se_length: se[2],
        residual_sd: sd,
        points,
    })
}

/// Before/after census of a phase adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub before: StateCounts,
    pub after: StateCounts,
    pub removed_by_feedback: usize,
    /// Rules left after feedback removal and the threshold, before the
    /// absent-action policy.
    pub remaining_before_policy: usize,
    pub weights: RuleWeights,
    pub threshold: Option<f64>,
}

impl AdaptReport {
    pub fn table(&self) -> String {
        let row = |name: &str, a: usize, b: usize| format!("{name:<24} {a:>8} {b:>8}\n");
        let mut s = format!("{:<24} {:>8} {:>8}\n", "", "before", "after");
        s += &row("rules", self.before.total, self.after.total);
        s += &row("active", self.before.active, self.after.active);
        s += &row("below_threshold", self.before.below_threshold, self.after.below_threshold);
        s += &row(
            "excluded_by_feedback",
            self.before.excluded_by_feedback,
            self.after.excluded_by_feedback,
        );
        s += &row("excluded_by_policy", self.before.excluded_by_policy, self.after.excluded_by_policy);
        s += &format!(
            "removed {} streak-excluded rules, {} remain before the absent policy\n",
            self.removed_by_feedback, self.remaining_before_policy
        );
        s
    }
}

/// Phase adaptation: drop feedback-excluded rules, restart feedback
/// counters, exclude absent actions, apply the fitted weights and the
/// threshold.
pub fn adapt_phase2(
    db: &mut RuleDb,
    ledger: &mut FeedbackLedger,
    weights: RuleWeights,
    threshold: Option<f64>,
) -> AdaptReport {
    let before = db.census();
    let n = db.len();
    db.retain(|r| r.state != RuleState::ExcludedByFeedback);
    let removed_by_feedback = n - db.len();
    ledger.reset_phase();
    db.weights = weights;
    db.threshold = threshold;
    db.policy.exclude_absent_actions = true;
    db.recompute();
    AdaptReport {
        before,
        after: db.census(),
        removed_by_feedback,
        remaining_before_policy: db.count_passing_threshold(),
        weights,
        threshold,
    }
}

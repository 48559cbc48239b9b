use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ecohabit_core::domain::{ActionCatalog, Recommendation, RuleState, Topologies};
use ecohabit_core::feedback::{adapt_phase2, fit_regression, FeedbackLedger, RegressionFit};
use ecohabit_core::ingest::{read_topologies, EventStore, IngestOptions, LogFormat};
use ecohabit_core::matcher::replay;
use ecohabit_core::miner::{run_benchmark, synthetic_sequence, Algorithm, HomeSequence};
use ecohabit_core::pipeline::{derive_into, mine_relevant, read_patterns, write_patterns};
use ecohabit_core::rules::{DeriveOptions, RuleDb};
use ecohabit_core::simulator::{evaluate, generate, GroundTruth, SimConfig};
use ecohabit_core::timefmt;
use ecohabit_service::service::RECOMMENDATIONS_FILE;
use ecohabit_service::{Service, ServiceConfig};
use serde::Serialize;

use crate::args::*;
use crate::error::CliError;
use crate::settings::{duration_flag, Settings};

pub struct Ctx {
    pub settings: Settings,
    pub json: bool,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Result<(), CliError> {
        let out = if self.json {
            serde_json::to_string_pretty(value).map_err(|e| CliError::failed("output", e))? + "\n"
        } else {
            text()
        };
        let mut stdout = std::io::stdout().lock();
        stdout
            .write_all(out.as_bytes())
            .and_then(|_| stdout.flush())
            .map_err(|e| CliError::failed("output", e))
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::failed("io", format!("{}: {e}", path.display()))
}

fn open_store(dir: &Path) -> Result<EventStore, CliError> {
    EventStore::open(dir).map_err(|e| CliError::failed("store", e))
}

fn topologies(path: Option<&Path>) -> Result<Topologies, CliError> {
    match path {
        Some(p) => read_topologies(p).map_err(|e| CliError::failed("topology", e)),
        None => Ok(Topologies::default()),
    }
}

fn load_rules(path: &Path) -> Result<RuleDb, CliError> {
    RuleDb::load(path).map_err(|e| CliError::failed("rules", e))
}

fn homes(store: &EventStore, home: &str) -> Result<Vec<String>, CliError> {
    let all = store.homes().map_err(|e| CliError::failed("store", e))?;
    if home == "all" {
        return Ok(all);
    }
    if !all.iter().any(|h| h == home) {
        return Err(CliError::failed("not_found", format!("home {home} has no stored events")));
    }
    Ok(vec![home.to_string()])
}

pub fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<(), CliError> {
    let store_dir = ctx.settings.require_path(a.store.as_deref(), "store", "--store")?;
    let format = a.format.as_deref().or_else(|| ctx.settings.get("format")).unwrap_or("jsonl");
    let format = LogFormat::from_str(format).map_err(CliError::invalid)?;
    let date = |s: &Option<String>| -> Result<_, CliError> {
        s.as_deref().map(timefmt::parse).transpose().map_err(CliError::invalid)
    };
    let topo_path = ctx.settings.path(a.topology.as_deref(), "topology");
    let opts = IngestOptions {
        min_date: date(&a.min_date)?,
        max_date: date(&a.max_date)?,
        topology: topo_path.as_deref().map(|p| topologies(Some(p))).transpose()?,
    };
    let store = open_store(&store_dir)?;
    let report = store
        .load_log(&a.input, format, &opts)
        .map_err(|e| CliError::failed("ingest", e))?;
    for e in report.errors.iter().take(10) {
        tracing::warn!(line = e.line_no, reason = %e.reason, "rejected record");
    }
    ctx.emit(&report, || report.summary() + "\n")
}

#[derive(Serialize)]
struct MineSummary {
    homes: usize,
    events: usize,
    patterns: usize,
    algorithm: &'static str,
}

pub fn mine(ctx: &Ctx, a: &MineArgs) -> Result<(), CliError> {
    let cfg = ctx.settings.mining(&a.mining)?;
    let algo = ctx.settings.algorithm(a.algo.as_deref())?;
    let store = open_store(&ctx.settings.require_path(a.store.as_deref(), "store", "--store")?)?;
    let catalog = ActionCatalog::default();
    let mut patterns = Vec::new();
    let mut events = 0;
    let list = homes(&store, &a.home)?;
    for home in &list {
        let evs = store.events(home).map_err(|e| CliError::failed("store", e))?;
        events += evs.len();
        let seq = HomeSequence::from_events(home, &evs).map_err(|e| CliError::failed("mine", e))?;
        let found = mine_relevant(&seq, &cfg, algo, &catalog).map_err(|e| CliError::failed("mine", e))?;
        tracing::info!(home = %home, patterns = found.len(), "mined");
        patterns.extend(found);
    }
    write_patterns(&a.out, &cfg, &patterns).map_err(|e| CliError::failed("io", e))?;
    let s = MineSummary {
        homes: list.len(),
        events,
        patterns: patterns.len(),
        algorithm: algo.name(),
    };
    ctx.emit(&s, || {
        format!("mine homes={} events={} patterns={} algo={}\n", s.homes, s.events, s.patterns, s.algorithm)
    })
}

#[derive(Serialize)]
struct DeriveSummary {
    patterns: usize,
    rules: usize,
    active: usize,
}

pub fn rules(ctx: &Ctx, cmd: &RulesCommand) -> Result<(), CliError> {
    match cmd {
        RulesCommand::Derive(a) => derive(ctx, a),
        RulesCommand::List(a) => list(ctx, a),
    }
}

fn derive(ctx: &Ctx, a: &DeriveArgs) -> Result<(), CliError> {
    let store = open_store(&ctx.settings.require_path(a.store.as_deref(), "store", "--store")?)?;
    let (cfg, patterns) = read_patterns(&a.patterns).map_err(|e| CliError::failed("patterns", e))?;
    let mut by_home = std::collections::BTreeMap::new();
    for p in &patterns {
        if !by_home.contains_key(&p.home_id) {
            let evs = store.events(&p.home_id).map_err(|e| CliError::failed("store", e))?;
            by_home.insert(p.home_id.clone(), evs);
        }
    }
    let opts = DeriveOptions {
        keep_other_actions: a.keep_other_actions,
    };
    let mut db = RuleDb::default();
    derive_into(&mut db, &by_home, &patterns, &cfg, &opts).map_err(|e| CliError::failed("rules", e))?;
    db.save(&a.out).map_err(|e| CliError::failed("io", e))?;
    let s = DeriveSummary {
        patterns: patterns.len(),
        rules: db.len(),
        active: db.census().active,
    };
    ctx.emit(&s, || format!("rules derive patterns={} rules={} active={}\n", s.patterns, s.rules, s.active))
}

fn list(ctx: &Ctx, a: &ListArgs) -> Result<(), CliError> {
    let db = load_rules(&ctx.settings.require_path(a.rules.as_deref(), "ruledb", "--rules")?)?;
    let state = a.state.as_deref().map(RuleState::from_str).transpose().map_err(CliError::invalid)?;
    let rules: Vec<_> = db
        .ranked()
        .into_iter()
        .filter(|r| state.is_none_or(|s| r.state == s))
        .filter(|r| a.home.as_deref().is_none_or(|h| r.home_id == h))
        .collect();
    ctx.emit(&rules, || {
        let mut s = format!(
            "{:<18} {:<10} {:<20} {:>8} {:>10} {:>3}  rule\n",
            "rule_id", "home", "state", "priority", "confidence", "len"
        );
        for r in &rules {
            let cond: Vec<String> = r.condition.iter().map(ToString::to_string).collect();
            s += &format!(
                "{:<18} {:<10} {:<20} {:>8.4} {:>10.4} {:>3}  {} => {}\n",
                r.rule_id,
                r.home_id,
                r.state.as_str(),
                r.priority,
                r.confidence,
                r.pattern_length,
                cond.join(", "),
                r.action
            );
        }
        s
    })
}

#[derive(Serialize)]
struct ReplaySummary {
    homes: usize,
    events: usize,
    recommendations: usize,
}

pub fn replay_cmd(ctx: &Ctx, a: &ReplayArgs) -> Result<(), CliError> {
    let store = open_store(&ctx.settings.require_path(a.store.as_deref(), "store", "--store")?)?;
    let mut db = load_rules(&ctx.settings.require_path(a.rules.as_deref(), "ruledb", "--rules")?)?;
    let exclude_absent = match ctx.settings.file() {
        Some(kv) => kv.bool("exclude_absent").map_err(CliError::config)?,
        None => None,
    };
    if let Some(flag) = exclude_absent {
        db.policy.exclude_absent_actions = flag;
        db.recompute();
    }
    let topo = topologies(ctx.settings.path(a.topology.as_deref(), "topology").as_deref())?;
    let cfg = ctx.settings.matcher(&a.matcher)?;
    let list = homes(&store, &a.home)?;
    let mut recs: Vec<Recommendation> = Vec::new();
    let mut events = 0;
    for home in &list {
        let evs = store.events(home).map_err(|e| CliError::failed("store", e))?;
        events += evs.len();
        recs.extend(replay(&evs, &db, cfg, &topo).map_err(|e| CliError::failed("replay", e))?);
    }
    let file = File::create(&a.out).map_err(io(&a.out))?;
    let mut w = BufWriter::new(file);
    for r in &recs {
        serde_json::to_writer(&mut w, r).map_err(|e| CliError::failed("io", e))?;
        w.write_all(b"\n").map_err(io(&a.out))?;
    }
    w.flush().map_err(io(&a.out))?;
    let s = ReplaySummary {
        homes: list.len(),
        events,
        recommendations: recs.len(),
    };
    ctx.emit(&s, || {
        format!("replay homes={} events={} recommendations={}\n", s.homes, s.events, s.recommendations)
    })
}

pub fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<(), CliError> {
    let Some(kv) = ctx.settings.file() else {
        return Err(CliError::invalid("serve needs --config with at least store, ruledb and token"));
    };
    let mut cfg = ServiceConfig::from_kv_with(kv, &crate::settings::CLI_KEYS).map_err(CliError::config)?;
    if let Some(listen) = &a.listen {
        cfg.listen = listen.parse().map_err(|e| CliError::invalid(format!("--listen {listen:?}: {e}")))?;
    }
    cfg.validate().map_err(CliError::config)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::failed("runtime", e))?;
    rt.block_on(ecohabit_service::serve(cfg, async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    }))
    .map_err(|e| match e {
        ecohabit_service::ServiceError::Config(m) => CliError::config(m),
        other => CliError::failed("service", other),
    })
}

/// Opens the service state read-only in effect: refuses to create it.
fn open_service(ctx: &Ctx, store: &Path, ruledb: &Path, state_dir: Option<&Path>) -> Result<Service, CliError> {
    let mut cfg = ServiceConfig::new(store, ruledb, "offline");
    cfg.state_dir = state_dir.map(Path::to_path_buf);
    cfg.feedback = ctx.settings.feedback()?;
    cfg.topology = ctx.settings.path(None, "topology");
    if let Some(kv) = ctx.settings.file() {
        cfg.exclude_absent = kv.bool("exclude_absent").map_err(CliError::config)?;
    }
    let recs = cfg.state_dir().join(RECOMMENDATIONS_FILE);
    if !recs.exists() {
        return Err(CliError::failed("not_found", format!("no service state at {}", cfg.state_dir().display())));
    }
    Service::open(cfg).map_err(|e| CliError::failed("service", e))
}

pub fn feedback(ctx: &Ctx, cmd: &FeedbackCommand) -> Result<(), CliError> {
    let FeedbackCommand::Stats(a) = cmd;
    let ruledb = ctx.settings.require_path(a.rules.as_deref(), "ruledb", "--rules")?;
    let store = ctx.settings.require_path(a.store.as_deref(), "store", "--store")?;
    let state_dir = ctx.settings.path(a.state_dir.as_deref(), "state_dir");
    let svc = open_service(ctx, &store, &ruledb, state_dir.as_deref())?;
    let census = svc.census();
    ctx.emit(&census, || {
        let c = &census.counts;
        let mut s = format!(
            "rules {} active {} below_threshold {} excluded_by_feedback {} excluded_by_policy {}\n",
            c.total, c.active, c.below_threshold, c.excluded_by_feedback, c.excluded_by_policy
        );
        s += &format!(
            "recommendations {} from {} rules\n\n",
            census.recommendations, census.rules_with_recommendations
        );
        s += &format!(
            "{:<18} {:<20} {:>6} {:>6} {:>10} {:>10} {:>9}\n",
            "rule_id", "state", "recs", "useful", "not_useful", "unanswered", "weighted"
        );
        for v in census.rules.iter().filter(|v| v.recommendations_issued > 0) {
            let f = &v.feedback;
            s += &format!(
                "{:<18} {:<20} {:>6} {:>6} {:>10} {:>10} {:>9}\n",
                v.rule.rule_id,
                v.rule.state.as_str(),
                v.recommendations_issued,
                f.useful,
                f.not_useful,
                f.unanswered,
                v.weighted_feedback.map_or("-".to_string(), |w| format!("{w:.3}"))
            );
        }
        s
    })
}

#[derive(Serialize)]
struct AdaptOutput {
    fit: Option<RegressionFit>,
    report: ecohabit_core::feedback::AdaptReport,
}

pub fn adapt(ctx: &Ctx, a: &AdaptArgs) -> Result<(), CliError> {
    let ruledb = ctx.settings.require_path(a.input.as_deref(), "ruledb", "--in")?;
    let threshold = match a.threshold.as_deref() {
        None => None,
        Some("none") => Some(None),
        Some(s) => {
            let x: f64 = s.parse().map_err(|e| CliError::invalid(format!("--threshold {s:?}: {e}")))?;
            if !x.is_finite() {
                return Err(CliError::invalid("--threshold must be finite"));
            }
            Some(Some(x))
        }
    };
    let store = ctx.settings.path(a.store.as_deref(), "store");
    let state_dir = ctx.settings.path(a.state_dir.as_deref(), "state_dir");
    let (mut db, mut ledger) = match (&store, &state_dir) {
        (None, None) => (load_rules(&ruledb)?, FeedbackLedger::new(ctx.settings.feedback()?)),
        _ => {
            let store = store.as_deref().or(state_dir.as_deref()).expect("one is set");
            open_service(ctx, store, &ruledb, state_dir.as_deref())?.into_parts()
        }
    };
    let fit = if a.fit {
        Some(fit_regression(&ledger, &db).map_err(|e| CliError::failed("fit", e))?)
    } else {
        None
    };
    let weights = fit.as_ref().map_or(db.weights, RegressionFit::weights);
    let threshold = threshold.unwrap_or(db.threshold);
    let report = adapt_phase2(&mut db, &mut ledger, weights, threshold);
    db.save(&a.out).map_err(|e| CliError::failed("io", e))?;
    let out = AdaptOutput { fit, report };
    ctx.emit(&out, || {
        let mut s = String::new();
        if let Some(f) = &out.fit {
            s += &format!(
                "fit status={:?} points={} intercept={:.4} beta_confidence={:.4} beta_length={:.4}\n",
                f.status,
                f.points.len(),
                f.intercept,
                f.beta_confidence,
                f.beta_length
            );
        }
        s + &out.report.table()
    })
}

pub fn bench(ctx: &Ctx, a: &BenchArgs) -> Result<(), CliError> {
    let algos = a
        .algos
        .split(',')
        .map(|s| Algorithm::from_str(s.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::invalid)?;
    if algos.len() < 2 {
        return Err(CliError::invalid("--algos needs at least two algorithms"));
    }
    if a.events == 0 || a.alphabet == 0 {
        return Err(CliError::invalid("--events and --alphabet must be positive"));
    }
    let gap = duration_flag("--mean-gap", &a.mean_gap)?;
    let cfg = ctx.settings.mining(&a.mining)?;
    let seq = synthetic_sequence(a.events, a.alphabet, gap.as_secs_f64(), a.seed);
    let report = run_benchmark(&seq, &cfg, &algos, a.repeats).map_err(|e| CliError::failed("bench", e))?;
    ctx.emit(&report, || report.table())
}

pub fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = SimConfig::default();
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.homes {
        cfg.homes = v;
    }
    if let Some(v) = a.days {
        cfg.days = v;
    }
    if let Some(v) = a.train_days {
        cfg.train_days = v;
    }
    if let Some(v) = a.forget {
        cfg.forget_probability = v;
    }
    if let Some(v) = a.noise_rate {
        cfg.noise_rate = v;
    }
    cfg.validate().map_err(CliError::invalid)?;
    let sim = generate(&cfg).map_err(|e| CliError::failed("simulate", e))?;
    sim.write_to(&a.out).map_err(|e| CliError::failed("io", e))?;
    #[derive(Serialize)]
    struct Summary {
        homes: usize,
        train_events: usize,
        test_events: usize,
        forgotten: usize,
    }
    let s = Summary {
        homes: sim.homes.len(),
        train_events: sim.train.len(),
        test_events: sim.test.len(),
        forgotten: sim.truth.forgotten().count(),
    };
    ctx.emit(&s, || {
        format!(
            "simulate homes={} train_events={} test_events={} forgotten={}\n",
            s.homes, s.train_events, s.test_events, s.forgotten
        )
    })
}

pub fn read_recommendations(path: &Path) -> Result<Vec<Recommendation>, CliError> {
    let file = File::open(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::failed("format", format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<(), CliError> {
    let window = duration_flag("--window", &a.window)?;
    let recs = read_recommendations(&a.recs)?;
    let truth = GroundTruth::load(&a.truth).map_err(|e| CliError::failed("truth", e))?;
    let m = evaluate(&recs, &truth, window);
    ctx.emit(&m, || m.table())
}

//! Seeded synthetic households.
//!
//! Every home gets a small topology, a few daily routines (normal events
//! followed by an energy-saving action) and background noise drawn from
//! identities no routine uses. A training period is generated without
//! forgetting; the test period forgets each routine's action with
//! probability `forget_probability` and records which instances did.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{NaiveDate, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    ActionCatalog, ActionCategory, DeviceInfo, EventClass, EventIdentity, EventRecord, EventSource, HomeTopology,
    MeterInfo, Recommendation, SceneInfo, Timestamp, Topologies, Verdict, ZoneInfo,
};
use crate::feedback::FeedbackLedger;
use crate::ingest::{write_log, write_topologies, IngestError};
use crate::matcher::{MatchError, Matcher, MatcherConfig};
use crate::rules::RuleDb;

const DAY_MS: i64 = 86_400_000;
/// Routines happen between 06:00 and 23:30.
const DAY_OPEN_MIN: u32 = 6 * 60;
const DAY_CLOSE_MIN: u32 = 23 * 60 + 30;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("infeasible simulation config: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// One habitual sequence of a home.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutineSpec {
    pub name: String,
    /// Normal events, in the order they happen.
    pub condition: Vec<EventIdentity>,
    pub action: EventIdentity,
    /// Where the action sits among the performed events (0 = first).
    pub action_index: usize,
    pub daily_frequency: u32,
    #[serde(with = "crate::durfmt")]
    pub jitter: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub homes: usize,
    pub zones_per_home: usize,
    pub devices_per_zone: usize,
    pub routines_per_home: usize,
    /// Normal events per generated routine.
    pub condition_length: usize,
    pub daily_frequency: u32,
    #[serde(with = "crate::durfmt")]
    pub jitter: Duration,
    /// Share of generated routines whose action is the absent scene.
    pub absent_share: f64,
    /// Explicit routines used for every home instead of generated ones.
    pub routines: Vec<RoutineSpec>,
    pub forget_probability: f64,
    /// Forget probability of the training period.
    pub train_forget_probability: f64,
    /// Unrelated events per hour.
    pub noise_rate: f64,
    /// Test period length.
    pub days: u32,
    /// Training period before the test period.
    pub train_days: u32,
    pub start: NaiveDate,
    /// Seconds between consecutive events of one routine instance.
    pub step_min_secs: u32,
    pub step_max_secs: u32,
    /// Gap bound the routines must respect, and keep between each other.
    #[serde(with = "crate::durfmt")]
    pub max_gap: Duration,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            homes: 8,
            zones_per_home: 4,
            devices_per_zone: 3,
            routines_per_home: 3,
            condition_length: 2,
            daily_frequency: 1,
            jitter: Duration::from_secs(20 * 60),
            absent_share: 0.15,
            routines: Vec::new(),
            forget_probability: 0.1,
            train_forget_probability: 0.0,
            noise_rate: 0.1,
            days: 34,
            train_days: 28,
            start: NaiveDate::from_ymd_opt(2014, 10, 1).expect("valid date"),
            step_min_secs: 5,
            step_max_secs: 30,
            max_gap: Duration::from_secs(600),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(0.0..=1.0).contains(&self.forget_probability) {
            return bad(format!("forget probability must be in [0, 1], got {}", self.forget_probability));
        }
        if !(0.0..=1.0).contains(&self.train_forget_probability) {
            return bad(format!(
                "train forget probability must be in [0, 1], got {}",
                self.train_forget_probability
            ));
        }
        if !(0.0..=1.0).contains(&self.absent_share) {
            return bad(format!("absent share must be in [0, 1], got {}", self.absent_share));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return bad(format!("noise rate must be non-negative, got {}", self.noise_rate));
        }
        if self.homes == 0 || self.zones_per_home == 0 || self.devices_per_zone == 0 {
            return bad("homes, zones and devices must be positive".into());
        }
        if self.routines.is_empty() && self.condition_length < 2 {
            return bad("routines need at least two normal events".into());
        }
        if self.step_min_secs == 0 || self.step_min_secs > self.step_max_secs {
            return bad("event spacing must satisfy 0 < min <= max".into());
        }
        if self.step_max_secs as u64 > self.max_gap.as_secs() {
            return bad("event spacing exceeds the gap bound".into());
        }
        for r in &self.routines {
            if r.condition.len() < 2 || r.action_index > r.condition.len() || r.daily_frequency == 0 {
                return bad(format!("routine {} is malformed", r.name));
            }
        }
        Ok(())
    }
}

/// One planted routine occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthInstance {
    pub home_id: String,
    pub routine: String,
    pub condition: Vec<EventIdentity>,
    pub action: EventIdentity,
    pub action_category: ActionCategory,
    #[serde(with = "crate::timefmt")]
    pub start: Timestamp,
    /// Time of the last condition event.
    #[serde(with = "crate::timefmt")]
    pub condition_end: Timestamp,
    pub forgotten: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMeta {
    pub homes: usize,
    pub days: u32,
    pub forget_probability: f64,
    #[serde(with = "crate::timefmt")]
    pub start: Timestamp,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub meta: TruthMeta,
    pub instances: Vec<TruthInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TruthLine {
    Meta(TruthMeta),
    Instance(TruthInstance),
}

impl GroundTruth {
    pub fn forgotten(&self) -> impl Iterator<Item = &TruthInstance> {
        self.instances.iter().filter(|i| i.forgotten)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let io = |source| SimError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        let mut line = |l: &TruthLine| -> std::io::Result<()> {
            serde_json::to_writer(&mut w, l).expect("truth serializes");
            w.write_all(b"\n")
        };
        line(&TruthLine::Meta(self.meta.clone())).map_err(io)?;
        for i in &self.instances {
            line(&TruthLine::Instance(i.clone())).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let io = |source| SimError::Io {
            path: path.to_path_buf(),
            source,
        };
        let fmt = |line, reason| SimError::Format {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut meta = None;
        let mut instances = Vec::new();
        for (i, l) in BufReader::new(fs::File::open(path).map_err(io)?).lines().enumerate() {
            let l = l.map_err(io)?;
            if l.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&l).map_err(|e| fmt(i + 1, e.to_string()))? {
                TruthLine::Meta(m) => meta = Some(m),
                TruthLine::Instance(x) => instances.push(x),
            }
        }
        let meta = meta.ok_or_else(|| fmt(1, "missing meta line".into()))?;
        Ok(Self { meta, instances })
    }
}

/// A generated home.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimHome {
    pub topology: HomeTopology,
    pub routines: Vec<RoutineSpec>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: SimConfig,
    pub homes: Vec<SimHome>,
    /// Training period.
    pub train: Vec<EventRecord>,
    pub test: Vec<EventRecord>,
    pub truth: GroundTruth,
}

impl Simulation {
    pub fn topologies(&self) -> Topologies {
        Topologies::new(self.homes.iter().map(|h| h.topology.clone()))
    }

    /// Writes `train.jsonl`, `test.jsonl`, `truth.jsonl`, `topology.json`
    /// and `routines.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir).map_err(|source| SimError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_log(&dir.join("train.jsonl"), &self.train)?;
        write_log(&dir.join("test.jsonl"), &self.test)?;
        self.truth.save(&dir.join("truth.jsonl"))?;
        let topo: Vec<HomeTopology> = self.homes.iter().map(|h| h.topology.clone()).collect();
        write_topologies(&dir.join("topology.json"), &topo)?;
        let routines: BTreeMap<&str, &Vec<RoutineSpec>> = self
            .homes
            .iter()
            .map(|h| (h.topology.home_id.as_str(), &h.routines))
            .collect();
        let path = dir.join("routines.json");
        fs::write(&path, serde_json::to_string_pretty(&routines).expect("routines serialize") + "\n")
            .map_err(|source| SimError::Io { path, source })
    }
}

const ROOMS: [&str; 10] = [
    "hallway", "kitchen", "living room", "bedroom", "bathroom", "office", "basement", "laundry", "stairs", "garage",
];
const DEVICES: [&str; 8] = [
    "ceiling light",
    "floor lamp",
    "tv",
    "radio",
    "shades",
    "coffee machine",
    "bedside lamp",
    "heater",
];
const NORMAL_NAMES: [&str; 6] = [
    "turn on light",
    "motion detected",
    "open shades",
    "button pressed",
    "brighten light",
    "play music",
];
const ACTION_NAMES: [(&str, ActionCategory); 4] = [
    ("turn off light", ActionCategory::Off),
    ("dim light", ActionCategory::Dim),
    ("standby", ActionCategory::Standby),
    ("sleep", ActionCategory::Sleep),
];
const ABSENT_SCENE: &str = "scene-absent";

fn home_rng(seed: u64, home: usize, stream: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((home as u64).to_le_bytes());
    h.update(stream.to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

fn home_id(k: usize) -> String {
    format!("home-{:02}", k + 1)
}

struct Layout {
    topology: HomeTopology,
    routines: Vec<RoutineSpec>,
    noise: Vec<EventIdentity>,
}

fn build_home(cfg: &SimConfig, k: usize) -> Result<Layout, SimError> {
    let mut rng = home_rng(cfg.seed, k, 0);
    let id = home_id(k);
    let zones: Vec<ZoneInfo> = (0..cfg.zones_per_home)
        .map(|z| ZoneInfo {
            zone_id: format!("z{}", z + 1),
            name: ROOMS[(z + k) % ROOMS.len()].to_string(),
        })
        .collect();
    let meters: Vec<MeterInfo> = (0..cfg.zones_per_home.div_ceil(2))
        .map(|m| MeterInfo {
            meter_id: format!("m{}", m + 1),
            name: format!("circuit {}", m + 1),
        })
        .collect();
    let mut devices = Vec::new();
    for (zi, z) in zones.iter().enumerate() {
        for d in 0..cfg.devices_per_zone {
            devices.push(DeviceInfo {
                device_id: format!("d{}-{}", zi + 1, d + 1),
                zone_id: z.zone_id.clone(),
                name: DEVICES[(d + zi) % DEVICES.len()].to_string(),
                meter_id: format!("m{}", zi / 2 + 1),
            });
        }
    }
    let scenes = vec![SceneInfo {
        scene_id: ABSENT_SCENE.to_string(),
        zone_id: zones[0].zone_id.clone(),
        name: "absent".to_string(),
    }];
    let mut topology = HomeTopology {
        home_id: id.clone(),
        meters,
        zones,
        scenes,
        devices,
    };

    let mut normal_pool: Vec<EventIdentity> = topology
        .devices
        .iter()
        .flat_map(|d| NORMAL_NAMES.iter().map(move |n| EventIdentity::new(&d.zone_id, &d.device_id, n)))
        .collect();
    normal_pool.shuffle(&mut rng);

    let routines = if cfg.routines.is_empty() {
        let needed = cfg.routines_per_home * cfg.condition_length;
        if needed >= normal_pool.len() {
            return Err(SimError::Infeasible(format!(
                "{} routines of {} events need more than the {} normal identities of a home",
                cfg.routines_per_home,
                cfg.condition_length,
                normal_pool.len()
            )));
        }
        let mut action_pool: Vec<(EventIdentity, ActionCategory)> = topology
            .devices
            .iter()
            .flat_map(|d| {
                ACTION_NAMES
                    .iter()
                    .map(move |&(n, c)| (EventIdentity::new(&d.zone_id, &d.device_id, n), c))
            })
            .collect();
        action_pool.shuffle(&mut rng);
        let mut absent_used = false;
        let mut out = Vec::new();
        for r in 0..cfg.routines_per_home {
            let condition: Vec<EventIdentity> = normal_pool.drain(..cfg.condition_length).collect();
            let action = if !absent_used && rng.gen_bool(cfg.absent_share) {
                absent_used = true;
                EventIdentity::new(&topology.zones[0].zone_id, ABSENT_SCENE, "absent")
            } else {
                action_pool
                    .pop()
                    .ok_or_else(|| SimError::Infeasible("not enough distinct actions".into()))?
                    .0
            };
            out.push(RoutineSpec {
                name: format!("routine-{}", r + 1),
                action_index: condition.len(),
                condition,
                action,
                daily_frequency: cfg.daily_frequency,
                jitter: cfg.jitter,
            });
        }
        out
    } else {
        for r in &cfg.routines {
            for e in r.condition.iter().chain([&r.action]) {
                if !topology.has_zone(&e.zone_id) {
                    topology.zones.push(ZoneInfo {
                        zone_id: e.zone_id.to_string(),
                        name: e.zone_id.to_string(),
                    });
                }
            }
            normal_pool.retain(|n| !r.condition.contains(n) && *n != r.action);
        }
        cfg.routines.clone()
    };
    if normal_pool.is_empty() && cfg.noise_rate > 0.0 {
        return Err(SimError::Infeasible("no identities left for noise".into()));
    }
    Ok(Layout {
        topology,
        routines,
        noise: normal_pool,
    })
}

/// Minutes of the daily slot for each routine occurrence, checked against
/// the gap bound so that different routines never chain.
fn daily_slots(cfg: &SimConfig, routines: &[RoutineSpec]) -> Result<Vec<(usize, f64)>, SimError> {
    let occurrences: Vec<usize> = routines
        .iter()
        .enumerate()
        .flat_map(|(i, r)| std::iter::repeat_n(i, r.daily_frequency as usize))
        .collect();
    if occurrences.is_empty() {
        return Ok(Vec::new());
    }
    let window = (DAY_CLOSE_MIN - DAY_OPEN_MIN) as f64;
    let slot = window / occurrences.len() as f64;
    for (i, r) in routines.iter().enumerate() {
        let span = (r.condition.len() as f64) * cfg.step_max_secs as f64 / 60.0;
        let need = 2.0 * r.jitter.as_secs_f64() / 60.0 + span + cfg.max_gap.as_secs_f64() / 60.0;
        if need >= slot {
            return Err(SimError::Infeasible(format!(
                "routine {i} needs {need:.1} min per occurrence but only {slot:.1} min are available"
            )));
        }
    }
    // round robin, so repeated routines spread over the day
    let per: Vec<usize> = routines.iter().map(|r| r.daily_frequency as usize).collect();
    let mut placed = Vec::with_capacity(occurrences.len());
    for round in 0..per.iter().copied().max().unwrap_or(0) {
        placed.extend(per.iter().enumerate().filter(|&(_, &f)| round < f).map(|(i, _)| i));
    }
    Ok(placed
        .into_iter()
        .enumerate()
        .map(|(s, r)| (r, DAY_OPEN_MIN as f64 + slot * (s as f64 + 0.5)))
        .collect())
}

struct Period<'a> {
    first_day: i64,
    days: u32,
    forget: f64,
    stream: u64,
    events: &'a mut Vec<EventRecord>,
    truth: &'a mut Vec<TruthInstance>,
}

fn generate_period(cfg: &SimConfig, k: usize, layout: &Layout, catalog: &ActionCatalog, p: Period<'_>) -> Result<(), SimError> {
    let mut rng = home_rng(cfg.seed, k, p.stream);
    let home = layout.topology.home_id.as_str();
    let slots = daily_slots(cfg, &layout.routines)?;
    let ev = |ms: i64, id: &EventIdentity| {
        let source = if id.subject_id.starts_with("scene-") || id.event_name.contains("motion") {
            EventSource::Sensor
        } else {
            EventSource::ButtonClick
        };
        EventRecord::new(
            chrono::DateTime::from_timestamp_millis(ms).expect("time in range"),
            home,
            &id.zone_id,
            &id.subject_id,
            &id.event_name,
            source,
        )
    };
    let noise_gap = (cfg.noise_rate > 0.0).then(|| Exp::new(cfg.noise_rate / 3_600_000.0).expect("positive rate"));
    for day in 0..p.days as i64 {
        let day0 = (p.first_day + day) * DAY_MS;
        for &(r, minute) in &slots {
            let routine = &layout.routines[r];
            let jitter = routine.jitter.as_secs() as i64;
            let offset = if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 };
            let mut t = day0 + (minute * 60_000.0) as i64 + offset * 1000;
            let forgotten = rng.gen_bool(p.forget);
            let mut performed: Vec<&EventIdentity> = routine.condition.iter().collect();
            performed.insert(routine.action_index, &routine.action);
            let mut start = None;
            let mut condition_end = t;
            for (j, id) in performed.iter().enumerate() {
                if j > 0 {
                    t += rng.gen_range(cfg.step_min_secs..=cfg.step_max_secs) as i64 * 1000;
                }
                let is_action = j == routine.action_index;
                start.get_or_insert(t);
                if !is_action {
                    condition_end = t;
                }
                if !(is_action && forgotten) {
                    p.events.push(ev(t, id));
                }
            }
            let category = match catalog.classify_name(&routine.action.event_name) {
                EventClass::Action(c) => c,
                EventClass::Normal => {
                    return Err(SimError::Config(format!(
                        "action {:?} of {} is not an action in the catalog",
                        routine.action.event_name, routine.name
                    )))
                }
            };
            p.truth.push(TruthInstance {
                home_id: home.to_string(),
                routine: routine.name.clone(),
                condition: routine.condition.clone(),
                action: routine.action.clone(),
                action_category: category,
                start: chrono::DateTime::from_timestamp_millis(start.unwrap_or(t)).expect("time in range"),
                condition_end: chrono::DateTime::from_timestamp_millis(condition_end).expect("time in range"),
                forgotten,
            });
        }
        if let Some(exp) = &noise_gap {
            let mut t = day0 as f64;
            loop {
                t += exp.sample(&mut rng);
                if t >= (day0 + DAY_MS) as f64 {
                    break;
                }
                let id = layout.noise.choose(&mut rng).expect("noise pool not empty");
                // whole seconds, like the routine events
                p.events.push(ev((t as i64 / 1000) * 1000, id));
            }
        }
    }
    Ok(())
}

fn sort_events(events: &mut [EventRecord]) {
    events.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.home_id.cmp(&b.home_id))
            .then_with(|| a.order_key().cmp(&b.order_key()))
    });
}

/// Generates the clean training period and the test period.
pub fn generate(cfg: &SimConfig) -> Result<Simulation, SimError> {
    cfg.validate()?;
    let catalog = ActionCatalog::default();
    let first_day = Utc
        .from_utc_datetime(&cfg.start.and_hms_opt(0, 0, 0).expect("midnight"))
        .timestamp_millis()
        .div_euclid(DAY_MS);
    let mut homes = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_truth = Vec::new();
    let mut truth = Vec::new();
    for k in 0..cfg.homes {
        let layout = build_home(cfg, k)?;
        generate_period(
            cfg,
            k,
            &layout,
            &catalog,
            Period {
                first_day,
                days: cfg.train_days,
                forget: cfg.train_forget_probability,
                stream: 1,
                events: &mut train,
                truth: &mut train_truth,
            },
        )?;
        generate_period(
            cfg,
            k,
            &layout,
            &catalog,
            Period {
                first_day: first_day + cfg.train_days as i64,
                days: cfg.days,
                forget: cfg.forget_probability,
                stream: 2,
                events: &mut test,
                truth: &mut truth,
            },
        )?;
        homes.push(SimHome {
            topology: layout.topology,
            routines: layout.routines,
        });
    }
    sort_events(&mut train);
    sort_events(&mut test);
    let start = chrono::DateTime::from_timestamp_millis((first_day + cfg.train_days as i64) * DAY_MS).expect("time in range");
    Ok(Simulation {
        config: cfg.clone(),
        homes,
        train,
        test,
        truth: GroundTruth {
            meta: TruthMeta {
                homes: cfg.homes,
                days: cfg.days,
                forget_probability: cfg.forget_probability,
                start,
                seed: cfg.seed,
            },
            instances: truth,
        },
    })
}

/// Quality of a set of recommendations against the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recommendations: usize,
    pub true_positives: usize,
    pub forgotten: usize,
    pub detected: usize,
    pub recall: f64,
    /// `None` without recommendations.
    pub precision: Option<f64>,
    pub recs_per_day_per_home: f64,
}

impl Metrics {
    pub fn table(&self) -> String {
        let precision = self.precision.map_or("null".to_string(), |p| format!("{p:.4}"));
        format!(
            "recommendations        {}\ntrue_positives         {}\nforgotten              {}\ndetected               {}\nrecall                 {:.4}\nprecision              {}\nrecs_per_day_per_home  {:.4}\n",
            self.recommendations,
            self.true_positives,
            self.forgotten,
            self.detected,
            self.recall,
            precision,
            self.recs_per_day_per_home
        )
    }
}

/// Index of forgotten instances by home and action.
pub struct TruthIndex {
    window_ms: i64,
    /// (home, action) -> sorted condition end times
    forgotten: HashMap<(String, EventIdentity), Vec<i64>>,
}

impl TruthIndex {
    pub fn new(truth: &GroundTruth, window: Duration) -> Self {
        let mut forgotten: HashMap<(String, EventIdentity), Vec<i64>> = HashMap::new();
        for i in truth.forgotten() {
            forgotten
                .entry((i.home_id.clone(), i.action.clone()))
                .or_default()
                .push(i.condition_end.timestamp_millis());
        }
        for v in forgotten.values_mut() {
            v.sort_unstable();
        }
        Self {
            window_ms: window.as_millis() as i64,
            forgotten,
        }
    }

    /// Condition end of the forgotten instance this recommendation hits.
    pub fn hit(&self, rec: &Recommendation) -> Option<i64> {
        let ends = self.forgotten.get(&(rec.home_id.clone(), rec.action.clone()))?;
        let t = rec.created_at.timestamp_millis();
        // latest end not after t
        let at = ends.partition_point(|&e| e <= t);
        let end = *ends.get(at.checked_sub(1)?)?;
        (t - end <= self.window_ms).then_some(end)
    }

    pub fn is_true_positive(&self, rec: &Recommendation) -> bool {
        self.hit(rec).is_some()
    }
}

/// Default time allowed between a forgotten instance's condition end and
/// the recommendation.
pub const DEFAULT_WINDOW: Duration = Duration::from_secs(15 * 60);

pub fn evaluate(recs: &[Recommendation], truth: &GroundTruth, window: Duration) -> Metrics {
    let index = TruthIndex::new(truth, window);
    let mut detected = std::collections::HashSet::new();
    let mut tp = 0;
    for r in recs {
        if let Some(end) = index.hit(r) {
            tp += 1;
            detected.insert((r.home_id.clone(), r.action.clone(), end));
        }
    }
    let forgotten = truth.forgotten().count();
    let denom = truth.meta.days as f64 * truth.meta.homes as f64;
    Metrics {
        recommendations: recs.len(),
        true_positives: tp,
        forgotten,
        detected: detected.len(),
        recall: if forgotten == 0 { 0.0 } else { detected.len() as f64 / forgotten as f64 },
        precision: (!recs.is_empty()).then(|| tp as f64 / recs.len() as f64),
        recs_per_day_per_home: if denom > 0.0 { recs.len() as f64 / denom } else { 0.0 },
    }
}

/// Answers recommendations like a household that replies to a share of
/// them and finds exactly the correct ones useful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedInhabitant {
    pub seed: u64,
    pub answer_probability: f64,
    #[serde(with = "crate::durfmt")]
    pub window: Duration,
}

impl Default for ScriptedInhabitant {
    fn default() -> Self {
        Self {
            seed: 7,
            answer_probability: 0.46,
            window: DEFAULT_WINDOW,
        }
    }
}

impl ScriptedInhabitant {
    fn draw(&self, recommendation_id: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(recommendation_id.as_bytes());
        let d = h.finalize();
        let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        (x >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn answer(&self, rec: &Recommendation, truth: &TruthIndex) -> Option<Verdict> {
        if self.draw(&rec.recommendation_id) >= self.answer_probability {
            return None;
        }
        Some(if truth.is_true_positive(rec) {
            Verdict::Useful
        } else {
            Verdict::NotUseful
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub recommendations: Vec<Recommendation>,
    pub answered: usize,
    pub useful: usize,
    pub excluded_rules: Vec<String>,
}

fn handle_phase_recs(
    recs: Vec<Recommendation>,
    matcher: &mut Matcher,
    out: &mut PhaseOutcome,
    db: &mut RuleDb,
    ledger: &mut FeedbackLedger,
    inhabitant: &ScriptedInhabitant,
    truth: &TruthIndex,
) {
    for rec in recs {
        ledger.register(&rec).expect("fresh recommendation id");
        if let Some(v) = inhabitant.answer(&rec, truth) {
            out.answered += 1;
            if v == Verdict::Useful {
                out.useful += 1;
            }
            let o = ledger
                .record(&rec.recommendation_id, v, rec.created_at, db)
                .expect("pending recommendation");
            if o.excluded {
                matcher.disable_rule(&o.rule_id);
                out.excluded_rules.push(o.rule_id);
            }
        }
        out.recommendations.push(rec);
    }
}

/// Replays a stream with live feedback: every recommendation is answered
/// (or not) by the inhabitant right away, and rules excluded by feedback
/// stop matching immediately.
pub fn run_feedback_phase(
    events: &[EventRecord],
    db: &mut RuleDb,
    ledger: &mut FeedbackLedger,
    inhabitant: &ScriptedInhabitant,
    truth: &TruthIndex,
    cfg: MatcherConfig,
    topologies: &Topologies,
) -> Result<PhaseOutcome, SimError> {
    let mut matcher = Matcher::new(db, cfg, topologies.clone())?;
    // ids continue after those the ledger already tracks
    let mut next_seq: BTreeMap<&str, u64> = BTreeMap::new();
    for id in ledger.recommendation_ids() {
        if let Some((home, n)) = id.rsplit_once('-').and_then(|(h, n)| Some((h, n.parse::<u64>().ok()?))) {
            let e = next_seq.entry(home).or_insert(1);
            *e = (*e).max(n + 1);
        }
    }
    for (home, n) in next_seq {
        if matcher.has_home(home) {
            matcher.add_home(home, db, n)?;
        }
    }
    let mut out = PhaseOutcome {
        recommendations: Vec::new(),
        answered: 0,
        useful: 0,
        excluded_rules: Vec::new(),
    };
    let mut last_day = None;
    for e in events {
        if !matcher.has_home(&e.home_id) {
            continue;
        }
        let recs = matcher.on_event(e)?;
        handle_phase_recs(recs, &mut matcher, &mut out, db, ledger, inhabitant, truth);
        let day = e.timestamp.timestamp_millis().div_euclid(DAY_MS);
        if last_day != Some(day) {
            last_day = Some(day);
            ledger.expire(e.timestamp);
        }
    }
    let rest = matcher.finish_all();
    handle_phase_recs(rest, &mut matcher, &mut out, db, ledger, inhabitant, truth);
    Ok(out)
}

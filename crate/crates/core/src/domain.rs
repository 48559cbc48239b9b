//! Shared vocabulary: home topology, events, action classification,
//! patterns, rules, recommendations and feedback.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Timestamp = DateTime<Utc>;

/// A home-automation meter, one per electric circuit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterInfo {
    pub meter_id: String,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneInfo {
    pub zone_id: String,
    /// Human-readable room name, e.g. "Kitchen".
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub scene_id: String,
    pub zone_id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub device_id: String,
    pub zone_id: String,
    pub name: String,
    pub meter_id: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("home {home}: {kind} {id} references unknown zone {zone}")]
    UnknownZone {
        home: String,
        kind: &'static str,
        id: String,
        zone: String,
    },
    #[error("home {home}: device {device} references unknown meter {meter}")]
    UnknownMeter {
        home: String,
        device: String,
        meter: String,
    },
    #[error("home {home}: duplicate zone id {zone}")]
    DuplicateZone { home: String, zone: String },
}

/// Meter / zone / scene / device hierarchy of one home.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomeTopology {
    pub home_id: String,
    #[serde(default)]
    pub meters: Vec<MeterInfo>,
    #[serde(default)]
    pub zones: Vec<ZoneInfo>,
    #[serde(default)]
    pub scenes: Vec<SceneInfo>,
    #[serde(default)]
    pub devices: Vec<DeviceInfo>,
}

impl HomeTopology {
    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut zones = std::collections::HashSet::new();
        for z in &self.zones {
            if !zones.insert(z.zone_id.as_str()) {
                return Err(TopologyError::DuplicateZone {
                    home: self.home_id.clone(),
                    zone: z.zone_id.clone(),
                });
            }
        }
        let meters: std::collections::HashSet<_> =
            self.meters.iter().map(|m| m.meter_id.as_str()).collect();
        for s in &self.scenes {
            if !zones.contains(s.zone_id.as_str()) {
                return Err(TopologyError::UnknownZone {
                    home: self.home_id.clone(),
                    kind: "scene",
                    id: s.scene_id.clone(),
                    zone: s.zone_id.clone(),
                });
            }
        }
        for d in &self.devices {
            if !zones.contains(d.zone_id.as_str()) {
                return Err(TopologyError::UnknownZone {
                    home: self.home_id.clone(),
                    kind: "device",
                    id: d.device_id.clone(),
                    zone: d.zone_id.clone(),
                });
            }
            if !meters.contains(d.meter_id.as_str()) {
                return Err(TopologyError::UnknownMeter {
                    home: self.home_id.clone(),
                    device: d.device_id.clone(),
                    meter: d.meter_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn has_zone(&self, zone_id: &str) -> bool {
        self.zones.iter().any(|z| z.zone_id == zone_id)
    }

    pub fn room_name(&self, zone_id: &str) -> Option<&str> {
        self.zones
            .iter()
            .find(|z| z.zone_id == zone_id)
            .map(|z| z.name.as_str())
    }

    /// Name of a scene or device.
    pub fn subject_name(&self, subject_id: &str) -> Option<&str> {
        self.devices
            .iter()
            .find(|d| d.device_id == subject_id)
            .map(|d| d.name.as_str())
            .or_else(|| {
                self.scenes
                    .iter()
                    .find(|s| s.scene_id == subject_id)
                    .map(|s| s.name.as_str())
            })
    }
}

/// Lookup of topologies by home, used to render recommendation text.
#[derive(Debug, Clone, Default)]
pub struct Topologies {
    homes: HashMap<String, HomeTopology>,
}

impl Topologies {
    pub fn new(list: impl IntoIterator<Item = HomeTopology>) -> Self {
        Self {
            homes: list.into_iter().map(|t| (t.home_id.clone(), t)).collect(),
        }
    }

    pub fn get(&self, home_id: &str) -> Option<&HomeTopology> {
        self.homes.get(home_id)
    }

    pub fn contains(&self, home_id: &str) -> bool {
        self.homes.contains_key(home_id)
    }

    pub fn is_empty(&self) -> bool {
        self.homes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HomeTopology> {
        self.homes.values()
    }

    /// `(subject name, room name)`, falling back to raw ids when unknown.
    pub fn names<'a>(&'a self, home_id: &str, identity: &'a EventIdentity) -> (&'a str, &'a str) {
        let topo = self.homes.get(home_id);
        let subject = topo
            .and_then(|t| t.subject_name(&identity.subject_id))
            .unwrap_or(&identity.subject_id);
        let room = topo
            .and_then(|t| t.room_name(&identity.zone_id))
            .unwrap_or(&identity.zone_id);
        (subject, room)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    ButtonClick,
    Sensor,
}

impl EventSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EventSource::ButtonClick => "button_click",
            EventSource::Sensor => "sensor",
        }
    }
}

impl std::str::FromStr for EventSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "button_click" | "button" | "click" => Ok(EventSource::ButtonClick),
            "sensor" => Ok(EventSource::Sensor),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// One timestamped scene call or sensor event in one zone of one home.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventRecord {
    #[serde(with = "crate::timefmt")]
    pub timestamp: Timestamp,
    pub home_id: Arc<str>,
    pub zone_id: Arc<str>,
    pub subject_id: Arc<str>,
    pub event_name: Arc<str>,
    pub source: EventSource,
}

impl EventRecord {
    pub fn new(
        timestamp: Timestamp,
        home_id: &str,
        zone_id: &str,
        subject_id: &str,
        event_name: &str,
        source: EventSource,
    ) -> Self {
        Self {
            timestamp,
            home_id: home_id.into(),
            zone_id: zone_id.into(),
            subject_id: subject_id.into(),
            event_name: event_name.into(),
            source,
        }
    }

    /// Total order used by the store: timestamp, then subject and event
    /// name, then the remaining fields so equal keys mean equal records.
    pub fn order_key(&self) -> (Timestamp, &str, &str, &str, EventSource) {
        (
            self.timestamp,
            &self.subject_id,
            &self.event_name,
            &self.zone_id,
            self.source,
        )
    }

    pub fn identity(&self) -> EventIdentity {
        event_identity(self)
    }
}

/// The key under which two events count as "the same event".
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventIdentity {
    pub zone_id: Arc<str>,
    pub subject_id: Arc<str>,
    pub event_name: Arc<str>,
}

impl EventIdentity {
    pub fn new(zone_id: &str, subject_id: &str, event_name: &str) -> Self {
        Self {
            zone_id: zone_id.into(),
            subject_id: subject_id.into(),
            event_name: event_name.into(),
        }
    }
}

impl fmt::Display for EventIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}:{}", self.zone_id, self.subject_id, self.event_name)
    }
}

pub fn event_identity(e: &EventRecord) -> EventIdentity {
    EventIdentity {
        zone_id: e.zone_id.clone(),
        subject_id: e.subject_id.clone(),
        event_name: e.event_name.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionCategory {
    Absent,
    Dim,
    Off,
    Sleep,
    Standby,
}

impl ActionCategory {
    pub const ALL: [ActionCategory; 5] = [
        ActionCategory::Absent,
        ActionCategory::Dim,
        ActionCategory::Off,
        ActionCategory::Sleep,
        ActionCategory::Standby,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "class", content = "category")]
pub enum EventClass {
    Action(ActionCategory),
    Normal,
}

impl EventClass {
    pub fn is_action(self) -> bool {
        matches!(self, EventClass::Action(_))
    }
}

/// How a catalog entry matches an event name. Matching is always
/// case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum NameMatch {
    /// A run of whole words, e.g. `"turn off"`; tokens split on anything
    /// that is not alphanumeric.
    Words(String),
    Substring(String),
    Exact(String),
}

impl NameMatch {
    fn matches(&self, lowered: &str, tokens: &[&str]) -> bool {
        match self {
            NameMatch::Substring(s) => !s.is_empty() && lowered.contains(&s.to_lowercase()),
            NameMatch::Exact(s) => lowered == s.to_lowercase(),
            NameMatch::Words(w) => {
                let w = w.to_lowercase();
                let needle = tokenize(&w);
                !needle.is_empty() && tokens.windows(needle.len()).any(|win| win == needle.as_slice())
            }
        }
    }
}

fn tokenize(s: &str) -> Vec<&str> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    #[serde(rename = "match")]
    pub rule: NameMatch,
    pub category: ActionCategory,
}

/// Ordered list of name rules; the first matching entry decides the
/// category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl Default for ActionCatalog {
    fn default() -> Self {
        use ActionCategory::*;
        let words = |w: &str, c| CatalogEntry {
            rule: NameMatch::Words(w.to_string()),
            category: c,
        };
        Self {
            entries: vec![
                words("absent", Absent),
                words("leave home", Absent),
                words("leaving home", Absent),
                words("sleep", Sleep),
                words("sleeping", Sleep),
                words("good night", Sleep),
                words("standby", Standby),
                words("stand by", Standby),
                words("dim", Dim),
                words("dimmed", Dim),
                words("dimming", Dim),
                words("off", Off),
            ],
        }
    }
}

impl ActionCatalog {
    pub fn category(&self, event_name: &str) -> Option<ActionCategory> {
        let lowered = event_name.to_lowercase();
        let tokens = tokenize(&lowered);
        self.entries
            .iter()
            .find(|e| e.rule.matches(&lowered, &tokens))
            .map(|e| e.category)
    }

    pub fn classify_name(&self, event_name: &str) -> EventClass {
        match self.category(event_name) {
            Some(c) => EventClass::Action(c),
            None => EventClass::Normal,
        }
    }
}

pub fn classify_event(e: &EventRecord, catalog: &ActionCatalog) -> EventClass {
    catalog.classify_name(&e.event_name)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatternItem {
    pub identity: EventIdentity,
    pub class: EventClass,
}

/// A frequent ordered sequence of event identities in one home.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub home_id: String,
    pub items: Vec<PatternItem>,
    pub support_count: u64,
    pub support: f64,
    #[serde(with = "crate::timefmt")]
    pub first_mined: Timestamp,
}

impl Pattern {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn action_count(&self) -> usize {
        self.items.iter().filter(|i| i.class.is_action()).count()
    }

    pub fn normal_count(&self) -> usize {
        self.items.len() - self.action_count()
    }

    /// At least three events, at least one action, at least two normal
    /// events.
    pub fn is_relevant(&self) -> bool {
        self.len() >= 3 && self.action_count() >= 1 && self.normal_count() >= 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleState {
    Active,
    BelowThreshold,
    ExcludedByFeedback,
    ExcludedByPolicy,
}

impl RuleState {
    pub const ALL: [RuleState; 4] = [
        RuleState::Active,
        RuleState::BelowThreshold,
        RuleState::ExcludedByFeedback,
        RuleState::ExcludedByPolicy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleState::Active => "active",
            RuleState::BelowThreshold => "below_threshold",
            RuleState::ExcludedByFeedback => "excluded_by_feedback",
            RuleState::ExcludedByPolicy => "excluded_by_policy",
        }
    }
}

impl std::str::FromStr for RuleState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RuleState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown rule state {s:?}"))
    }
}

/// `condition -> action` derived from one relevant pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRule {
    pub rule_id: String,
    pub home_id: String,
    pub condition: Vec<EventIdentity>,
    pub action: EventIdentity,
    pub action_category: ActionCategory,
    /// Index of the action in the source pattern.
    pub action_position: usize,
    /// The full source pattern, in mined order.
    pub source_pattern: Vec<EventIdentity>,
    pub confidence: f64,
    pub pattern_support: f64,
    pub pattern_support_count: u64,
    pub pattern_length: usize,
    #[serde(with = "crate::timefmt")]
    pub mined_date: Timestamp,
    pub priority: f64,
    pub state: RuleState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationStatus {
    Pending,
    Useful,
    NotUseful,
    Expired,
}

impl RecommendationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecommendationStatus::Pending => "pending",
            RecommendationStatus::Useful => "useful",
            RecommendationStatus::NotUseful => "not_useful",
            RecommendationStatus::Expired => "expired",
        }
    }
}

impl std::str::FromStr for RecommendationStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(Self::Pending),
            "useful" => Ok(Self::Useful),
            "not_useful" => Ok(Self::NotUseful),
            "expired" => Ok(Self::Expired),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

/// What closed the matching instance that produced a recommendation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// A non-action event followed the completed condition.
    NextEvent,
    /// No event arrived within the action-wait window.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub recommendation_id: String,
    pub home_id: String,
    pub rule_id: String,
    pub action: EventIdentity,
    pub text: String,
    pub trigger_events: Vec<EventRecord>,
    #[serde(with = "crate::timefmt")]
    pub created_at: Timestamp,
    pub resolution: Resolution,
    pub status: RecommendationStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Useful,
    NotUseful,
}

impl std::str::FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "useful" | "yes" | "1" => Ok(Verdict::Useful),
            "not_useful" | "no" | "0" => Ok(Verdict::NotUseful),
            other => Err(format!("unknown verdict {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub recommendation_id: String,
    pub verdict: Verdict,
    #[serde(with = "crate::timefmt")]
    pub received_at: Timestamp,
}

/// Text shown to the inhabitant, naming the device and its room.
pub fn recommendation_text(
    action: &EventIdentity,
    subject_name: &str,
    room_name: &str,
    at: Timestamp,
) -> String {
    format!(
        "I would recommend to {} device {} in room {} (on {}).",
        action.event_name,
        subject_name,
        room_name,
        at.format("%Y-%m-%d %H:%M:%S")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn rec(name: &str) -> EventRecord {
        EventRecord::new(
            Utc.with_ymd_and_hms(2014, 11, 16, 23, 19, 16).unwrap(),
            "h1",
            "z1",
            "s1",
            name,
            EventSource::ButtonClick,
        )
    }

    #[test]
    fn classify_examples() {
        let cat = ActionCatalog::default();
        assert_eq!(
            classify_event(&rec("absent"), &cat),
            EventClass::Action(ActionCategory::Absent)
        );
        assert_eq!(classify_event(&rec("turn on light in stairs"), &cat), EventClass::Normal);
        assert_eq!(classify_event(&rec(""), &cat), EventClass::Normal);
        assert_eq!(
            classify_event(&rec("Turn off light in kitchen"), &cat),
            EventClass::Action(ActionCategory::Off)
        );
        assert_eq!(classify_event(&rec("Motion detector garage"), &cat), EventClass::Normal);
        // "off" is a word match, not a substring one
        assert_eq!(classify_event(&rec("light in office"), &cat), EventClass::Normal);
        assert_eq!(
            classify_event(&rec("Standby TV"), &cat),
            EventClass::Action(ActionCategory::Standby)
        );
        assert_eq!(
            classify_event(&rec("dim lights living"), &cat),
            EventClass::Action(ActionCategory::Dim)
        );
        assert_eq!(
            classify_event(&rec("sleep"), &cat),
            EventClass::Action(ActionCategory::Sleep)
        );
    }

    #[test]
    fn catalog_covers_every_category() {
        let cat = ActionCatalog::default();
        for c in ActionCategory::ALL {
            assert!(cat.entries.iter().any(|e| e.category == c), "{c:?}");
        }
    }

    #[test]
    fn identity_projection() {
        let a = rec("turn on");
        let mut b = a.clone();
        b.timestamp += chrono::Duration::seconds(5);
        assert_eq!(event_identity(&a), event_identity(&b));
        let mut c = a.clone();
        c.zone_id = "z2".into();
        assert_ne!(event_identity(&a), event_identity(&c));
    }

    #[test]
    fn topology_validation() {
        let mut t = HomeTopology {
            home_id: "h".into(),
            meters: vec![MeterInfo { meter_id: "m".into(), name: String::new() }],
            zones: vec![ZoneInfo { zone_id: "z".into(), name: "Kitchen".into() }],
            scenes: vec![SceneInfo { scene_id: "s".into(), zone_id: "z".into(), name: "Off".into() }],
            devices: vec![DeviceInfo {
                device_id: "d".into(),
                zone_id: "z".into(),
                name: "Lamp".into(),
                meter_id: "m".into(),
            }],
        };
        assert!(t.validate().is_ok());
        t.devices[0].meter_id = "nope".into();
        assert!(matches!(t.validate(), Err(TopologyError::UnknownMeter { .. })));
        t.devices[0].meter_id = "m".into();
        t.scenes[0].zone_id = "q".into();
        assert!(matches!(t.validate(), Err(TopologyError::UnknownZone { .. })));
    }

    #[test]
    fn text_names_device_and_room() {
        let id = EventIdentity::new("z", "d", "turn off");
        let at = Utc.with_ymd_and_hms(2014, 11, 16, 23, 19, 16).unwrap();
        let text = recommendation_text(&id, "Bed side lamp", "Bedroom", at);
        assert_eq!(
            text,
            "I would recommend to turn off device Bed side lamp in room Bedroom (on 2014-11-16 23:19:16)."
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn classification_ignores_case(name in "[a-zA-Z ]{0,24}") {
                let cat = ActionCatalog::default();
                prop_assert_eq!(cat.classify_name(&name), cat.classify_name(&name.to_uppercase()));
            }

            #[test]
            fn relevance_matches_rule_shape(classes in proptest::collection::vec(any::<bool>(), 0..9)) {
                let items: Vec<PatternItem> = classes.iter().enumerate().map(|(i, &a)| PatternItem {
                    identity: EventIdentity::new("z", &i.to_string(), "x"),
                    class: if a { EventClass::Action(ActionCategory::Off) } else { EventClass::Normal },
                }).collect();
                let p = Pattern {
                    home_id: "h".into(),
                    items,
                    support_count: 1,
                    support: 0.1,
                    first_mined: Utc::now(),
                };
                let actions = classes.iter().filter(|&&a| a).count();
                let normals = classes.len() - actions;
                // a rule needs one action and a condition of two or more normals
                prop_assert_eq!(p.is_relevant(), actions >= 1 && normals >= 2);
            }
        }
    }
}

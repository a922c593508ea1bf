//! Trace universe: events, proposed and realized traces, canonical
//! serialization, hashing and prefixes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Logical time. All window arithmetic is done on integer ticks.
pub type Tick = u64;

/// Param key that carries the constraint expression of an observation slot.
pub const OBSERVE_PARAM: &str = "observe";

/// Prefix marking a commitment digest inside certificate evidence lists.
pub const COMMITMENT_PREFIX: &str = "sha256:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error on `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("prefix length {requested} out of range 0..={len}")]
    OutOfRange { requested: usize, len: usize },
}

impl TraceError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        TraceError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Risk tiers, ordered from log-only (C0) to regulator-grade review (C5).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub enum Tier {
    #[default]
    C0,
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl Tier {
    pub const ALL: [Tier; 6] = [Tier::C0, Tier::C1, Tier::C2, Tier::C3, Tier::C4, Tier::C5];
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Query,
    Retrieval,
    ToolCall,
    Computation,
    Claim,
    Approval,
    MemoryWrite,
    Release,
    ExecutionCall,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::Query,
        EventKind::Retrieval,
        EventKind::ToolCall,
        EventKind::Computation,
        EventKind::Claim,
        EventKind::Approval,
        EventKind::MemoryWrite,
        EventKind::Release,
        EventKind::ExecutionCall,
    ];
}

/// Param value. Decimals are basis points and travel as `{"bp": n}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Decimal { bp: i64 },
    Str(String),
}

impl Scalar {
    pub fn bp(bp: i64) -> Self {
        Scalar::Decimal { bp }
    }

    pub fn str(s: impl Into<String>) -> Self {
        Scalar::Str(s.into())
    }

    /// Exact numeric value; `None` for strings.
    pub fn as_ratio(&self) -> Option<Ratio<i128>> {
        match self {
            Scalar::Int(n) => Some(Ratio::from_integer(*n as i128)),
            Scalar::Decimal { bp } => Some(Ratio::new(*bp as i128, 10_000)),
            Scalar::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Scalar::Int(n) => Some(*n),
            _ => None,
        }
    }

    /// Value equality across representations: `1 == 10000bp`.
    pub fn same_value(&self, other: &Scalar) -> bool {
        match (self.as_ratio(), other.as_ratio()) {
            (Some(a), Some(b)) => a == b,
            (None, None) => self == other,
            _ => false,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(n) => write!(f, "{n}"),
            Scalar::Decimal { bp } => write!(f, "{bp}bp"),
            Scalar::Str(s) => write!(f, "\"{s}\""),
        }
    }
}

impl FromStr for Scalar {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix('"') {
            let inner = inner
                .strip_suffix('"')
                .ok_or_else(|| format!("unterminated string literal `{s}`"))?;
            if inner.contains('"') {
                return Err(format!("embedded quote in `{s}`"));
            }
            return Ok(Scalar::Str(inner.to_string()));
        }
        if let Some(num) = s.strip_suffix("bp") {
            return num
                .parse::<i64>()
                .map(|bp| Scalar::Decimal { bp })
                .map_err(|e| format!("bad basis-point literal `{s}`: {e}"));
        }
        s.parse::<i64>()
            .map(Scalar::Int)
            .map_err(|e| format!("bad literal `{s}`: {e}"))
    }
}

/// What an observation slot promises about the value the environment fills in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotConstraint {
    Any,
    Equals(Scalar),
    /// Inclusive numeric range.
    Range(Scalar, Scalar),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationConstraint {
    pub field: String,
    pub constraint: SlotConstraint,
}

impl ObservationConstraint {
    pub fn admits(&self, value: &Scalar) -> bool {
        match &self.constraint {
            SlotConstraint::Any => true,
            SlotConstraint::Equals(v) => v.same_value(value),
            SlotConstraint::Range(lo, hi) => match (value.as_ratio(), lo.as_ratio(), hi.as_ratio())
            {
                (Some(x), Some(lo), Some(hi)) => lo <= x && x <= hi,
                _ => false,
            },
        }
    }
}

impl fmt::Display for ObservationConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.constraint {
            SlotConstraint::Any => write!(f, "{} any", self.field),
            SlotConstraint::Equals(v) => write!(f, "{} == {v}", self.field),
            SlotConstraint::Range(lo, hi) => write!(f, "{} in [{lo}, {hi}]", self.field),
        }
    }
}

impl FromStr for ObservationConstraint {
    type Err = String;

    /// Grammar: `<field> any` | `<field> == <lit>` | `<field> in [<lit>, <lit>]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (field, rest) = s
            .split_once(char::is_whitespace)
            .ok_or_else(|| format!("constraint `{s}` has no operator"))?;
        let valid_field = field
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && field.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !valid_field {
            return Err(format!("bad slot field name `{field}`"));
        }
        let rest = rest.trim();
        let constraint = if rest == "any" {
            SlotConstraint::Any
        } else if let Some(lit) = rest.strip_prefix("==") {
            SlotConstraint::Equals(lit.parse()?)
        } else if let Some(range) = rest.strip_prefix("in") {
            let body = range
                .trim()
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(|| format!("range in `{s}` must be `[lo, hi]`"))?;
            let (lo, hi) = body
                .split_once(',')
                .ok_or_else(|| format!("range in `{s}` needs two bounds"))?;
            let lo: Scalar = lo.parse()?;
            let hi: Scalar = hi.parse()?;
            match (lo.as_ratio(), hi.as_ratio()) {
                (Some(a), Some(b)) if a <= b => {}
                (Some(_), Some(_)) => return Err(format!("empty range in `{s}`")),
                _ => return Err(format!("range bounds in `{s}` must be numeric")),
            }
            SlotConstraint::Range(lo, hi)
        } else {
            return Err(format!("unknown constraint operator in `{s}`"));
        };
        Ok(ObservationConstraint {
            field: field.to_string(),
            constraint,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub event_id: String,
    pub tick: Tick,
    pub kind: EventKind,
    pub principal: String,
    pub component: String,
    #[serde(default)]
    pub resource: Option<String>,
    #[serde(default)]
    pub data_class: Option<String>,
    #[serde(default)]
    pub purpose: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, Scalar>,
    #[serde(default)]
    pub quantity_deltas: BTreeMap<String, i64>,
    #[serde(default)]
    pub evidence_refs: Vec<String>,
    #[serde(default)]
    pub observation_slot: bool,
    #[serde(default)]
    pub irreversible: bool,
}

impl TraceEvent {
    /// A bare event; the remaining fields default to empty.
    pub fn new(
        event_id: impl Into<String>,
        tick: Tick,
        kind: EventKind,
        principal: impl Into<String>,
        component: impl Into<String>,
    ) -> Self {
        TraceEvent {
            event_id: event_id.into(),
            tick,
            kind,
            principal: principal.into(),
            component: component.into(),
            resource: None,
            data_class: None,
            purpose: None,
            params: BTreeMap::new(),
            quantity_deltas: BTreeMap::new(),
            evidence_refs: Vec::new(),
            observation_slot: false,
            irreversible: false,
        }
    }

    pub fn with_resource(mut self, resource: impl Into<String>) -> Self {
        self.resource = Some(resource.into());
        self
    }

    pub fn with_data_class(mut self, data_class: impl Into<String>) -> Self {
        self.data_class = Some(data_class.into());
        self
    }

    pub fn with_purpose(mut self, purpose: impl Into<String>) -> Self {
        self.purpose = Some(purpose.into());
        self
    }

    pub fn with_param(mut self, key: impl Into<String>, value: Scalar) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    pub fn with_delta(mut self, counter: impl Into<String>, delta: i64) -> Self {
        self.quantity_deltas.insert(counter.into(), delta);
        self
    }

    pub fn with_evidence<I, S>(mut self, refs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.evidence_refs = refs.into_iter().map(Into::into).collect();
        self
    }

    pub fn irreversible(mut self) -> Self {
        self.irreversible = true;
        self
    }

    /// Turns the event into an observation slot governed by `constraint`.
    pub fn observing(mut self, constraint: &str) -> Self {
        self.observation_slot = true;
        self.params
            .insert(OBSERVE_PARAM.to_string(), Scalar::str(constraint));
        self
    }

    /// The declared slot constraint, if this event is an observation slot.
    pub fn slot_constraint(&self) -> Option<ObservationConstraint> {
        if !self.observation_slot {
            return None;
        }
        self.params
            .get(OBSERVE_PARAM)
            .and_then(Scalar::as_str)
            .and_then(|s| s.parse().ok())
    }

    pub fn value(&self) -> Option<&Scalar> {
        self.params.get("value")
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("event serialization is infallible")
    }
}

/// Anything that exposes an ordered event list to the policy engine.
pub trait EventSource {
    fn events(&self) -> &[TraceEvent];
}

impl EventSource for [TraceEvent] {
    fn events(&self) -> &[TraceEvent] {
        self
    }
}

impl EventSource for Vec<TraceEvent> {
    fn events(&self) -> &[TraceEvent] {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposedTrace {
    pub trace_id: String,
    pub proposer_id: String,
    pub task: String,
    pub declared_tier: Tier,
    pub requested_policy_version: String,
    #[serde(default)]
    pub execution_conditions: BTreeMap<String, Scalar>,
    pub events: Vec<TraceEvent>,
}

impl EventSource for ProposedTrace {
    fn events(&self) -> &[TraceEvent] {
        &self.events
    }
}

impl ProposedTrace {
    pub fn new(
        trace_id: impl Into<String>,
        proposer_id: impl Into<String>,
        declared_tier: Tier,
        policy_version: impl Into<String>,
        events: Vec<TraceEvent>,
    ) -> Self {
        ProposedTrace {
            trace_id: trace_id.into(),
            proposer_id: proposer_id.into(),
            task: String::new(),
            declared_tier,
            requested_policy_version: policy_version.into(),
            execution_conditions: BTreeMap::new(),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn event(&self, event_id: &str) -> Option<&TraceEvent> {
        self.events.iter().find(|e| e.event_id == event_id)
    }

    /// Checks every structural invariant of a proposed trace.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.trace_id.is_empty() {
            return Err(TraceError::invalid("trace_id", "must be nonempty"));
        }
        if self.events.is_empty() {
            return Err(TraceError::invalid("events", "must be nonempty"));
        }
        validate_events(&self.events, true)
    }

    /// Canonical serialization: fixed field order, sorted map keys, no
    /// insignificant whitespace.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("trace serialization is infallible")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialization is infallible")
    }
}

fn validate_events(events: &[TraceEvent], proposed: bool) -> Result<(), TraceError> {
    let mut seen: HashSet<&str> = HashSet::with_capacity(events.len());
    let mut last_tick = 0;
    for (i, e) in events.iter().enumerate() {
        let at = |field: &str| format!("events[{i}].{field}");
        if e.event_id.is_empty() {
            return Err(TraceError::invalid(at("event_id"), "must be nonempty"));
        }
        if e.event_id.starts_with(COMMITMENT_PREFIX) {
            return Err(TraceError::invalid(
                at("event_id"),
                format!("must not start with `{COMMITMENT_PREFIX}`"),
            ));
        }
        if i > 0 && e.tick < last_tick {
            return Err(TraceError::invalid(
                at("tick"),
                format!("ticks non-decreasing violated: {} after {last_tick}", e.tick),
            ));
        }
        last_tick = e.tick;
        for r in &e.evidence_refs {
            if !seen.contains(r.as_str()) {
                return Err(TraceError::invalid(
                    at("evidence_refs"),
                    format!("`{r}` does not name an earlier event"),
                ));
            }
        }
        if !seen.insert(&e.event_id) {
            return Err(TraceError::invalid(
                at("event_id"),
                format!("duplicate event id `{}`", e.event_id),
            ));
        }
        match (e.observation_slot, e.params.get(OBSERVE_PARAM)) {
            (true, Some(Scalar::Str(text))) => {
                let c: ObservationConstraint = text
                    .parse()
                    .map_err(|m: String| TraceError::invalid(at("params.observe"), m))?;
                if proposed && e.params.contains_key(&c.field) {
                    return Err(TraceError::invalid(
                        at(&format!("params.{}", c.field)),
                        "observation slot carries a fixed value in a proposed trace",
                    ));
                }
            }
            (true, _) => {
                return Err(TraceError::invalid(
                    at("params.observe"),
                    "observation slot needs a constraint expression",
                ))
            }
            (false, Some(_)) => {
                return Err(TraceError::invalid(
                    at("params.observe"),
                    "only observation slots may carry a constraint",
                ))
            }
            (false, None) => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Completed,
    Halted,
    RolledBack,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deviation {
    pub event_id: String,
    pub field: String,
    pub expected: String,
    pub observed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealizedTrace {
    pub trace_id: String,
    pub events: Vec<TraceEvent>,
    pub outcome: Outcome,
    #[serde(default)]
    pub deviation_log: Vec<Deviation>,
}

impl EventSource for RealizedTrace {
    fn events(&self) -> &[TraceEvent] {
        &self.events
    }
}

impl RealizedTrace {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.outcome == Outcome::Completed && !self.deviation_log.is_empty() {
            return Err(TraceError::invalid(
                "deviation_log",
                "a completed execution has no deviations",
            ));
        }
        validate_events(&self.events, false)
    }
}

/// A 32-byte SHA-256 value, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // Only the canonical lowercase form is accepted.
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(format!("`{s}` is not a 64-digit lowercase hex digest"));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| e.to_string())?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses and validates a trace file.
pub fn parse_trace(bytes: &[u8]) -> Result<ProposedTrace, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError::Parse(e.to_string()))?;
    let trace: ProposedTrace =
        serde_json::from_str(text).map_err(|e| TraceError::Parse(e.to_string()))?;
    trace.validate()?;
    Ok(trace)
}

/// SHA-256 of the canonical serialization.
pub fn canonical_hash(trace: &ProposedTrace) -> Digest {
    Digest::of(&trace.canonical_bytes())
}

/// The hash an approval binds to: the trace with its Approval events removed,
/// so that an approval can sit inside the trace it approves.
pub fn approval_subject_hash(trace: &ProposedTrace) -> Digest {
    if trace.events.iter().all(|e| e.kind != EventKind::Approval) {
        return canonical_hash(trace);
    }
    let mut stripped = trace.clone();
    stripped.events.retain(|e| e.kind != EventKind::Approval);
    canonical_hash(&stripped)
}

/// The first `t` events under the same header.
pub fn prefix(trace: &ProposedTrace, t: usize) -> Result<ProposedTrace, TraceError> {
    if t > trace.events.len() {
        return Err(TraceError::OutOfRange {
            requested: t,
            len: trace.events.len(),
        });
    }
    let mut out = trace.clone();
    out.events.truncate(t);
    Ok(out)
}

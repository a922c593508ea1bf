//! Layered, versioned policy systems and the semantic membership oracle.
//!
//! A [`PolicySystem`] is a conjunction of layers; a trace is permissible iff
//! every layer accepts it. [`evaluate`] decides membership directly from the
//! event list and is the ground truth every certifier is measured against.

mod eval;
mod predicate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Tick, Tier};

pub use eval::{evaluate, LayerVerdict, PermissibilityVerdict, Violation};
pub use predicate::{EventPredicate, Match, ParamMatcher};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error in layer `{layer}` field `{field}`: {message}")]
    Validation {
        layer: String,
        field: String,
        message: String,
    },
    #[error("monitor layer `{layer}` is nondeterministic in state `{state}`: transitions {first} and {second} overlap")]
    NondeterministicMonitor {
        layer: String,
        state: String,
        first: usize,
        second: usize,
    },
    #[error("duplicate layer id `{0}`")]
    DuplicateLayerId(String),
    #[error("strengthened policy needs a new version, `{0}` is already in use")]
    VersionUnchanged(String),
}

/// Raised at evaluation time for malformed layers that slipped past loading.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed layer `{layer}`: {message}")]
pub struct SpecError {
    pub layer: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Monitor,
    Counter,
    Temporal,
    InfoFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefaultRule {
    SelfLoop,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub from: String,
    pub on: EventPredicate,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSpec {
    pub states: Vec<String>,
    pub initial: String,
    pub accepting: Vec<String>,
    pub transitions: Vec<Transition>,
    /// Behaviour on an event no transition matches; required for every state.
    pub defaults: BTreeMap<String, DefaultRule>,
}

impl MonitorSpec {
    pub fn is_accepting(&self, state: &str) -> bool {
        self.accepting.iter().any(|s| s == state)
    }

    pub fn default_rule(&self, state: &str) -> Option<DefaultRule> {
        self.defaults.get(state).copied()
    }

    /// Transitions leaving `state`, with their position in the spec.
    pub fn outgoing<'a>(&'a self, state: &'a str) -> impl Iterator<Item = (usize, &'a Transition)> {
        self.transitions
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.from == state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterScope {
    /// One counter per (principal, resource) pair, as in N(u, R, W).
    #[default]
    PerPrincipalResource,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterDef {
    pub name: String,
    /// `None` is an unbounded window.
    #[serde(default)]
    pub window_ticks: Option<Tick>,
    pub bound: i64,
    #[serde(default)]
    pub scope: CounterScope,
}

impl CounterDef {
    /// Whether an entry recorded at `entry_tick` is still inside the window at `now`.
    pub fn in_window(&self, entry_tick: Tick, now: Tick) -> bool {
        self.window_ticks
            .is_none_or(|w| now.saturating_sub(entry_tick) < w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delta {
    Const(i64),
    /// The event's `quantity_deltas` entry, zero when absent.
    Quantity(String),
}

impl Delta {
    pub fn amount(&self, e: &crate::trace::TraceEvent) -> i64 {
        match self {
            Delta::Const(n) => *n,
            Delta::Quantity(q) => e.quantity_deltas.get(q).copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterUpdate {
    pub on: EventPredicate,
    pub counter: String,
    pub delta: Delta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterSpec {
    pub counters: Vec<CounterDef>,
    pub updates: Vec<CounterUpdate>,
}

impl CounterSpec {
    pub fn counter(&self, name: &str) -> Option<&CounterDef> {
        self.counters.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPattern {
    /// Every `b` is preceded by some `a`.
    Precedence,
    /// No `a` occurs after a `b`.
    AbsenceAfter,
    /// Every `a` is followed by a `b` at most `k` ticks later.
    ResponseWithin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalSpec {
    pub pattern: TemporalPattern,
    pub a: EventPredicate,
    pub b: EventPredicate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Tick>,
}

impl TemporalSpec {
    /// A precedence obligation whose witnesses are Approval events.
    pub fn is_approval_gate(&self) -> bool {
        self.pattern == TemporalPattern::Precedence
            && self.a.kinds == [crate::trace::EventKind::Approval]
    }
}

pub const WILDCARD: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthRow {
    pub principal: String,
    pub component: String,
    pub data_class: String,
    pub purpose: String,
}

impl AuthRow {
    pub fn new(principal: &str, component: &str, data_class: &str, purpose: &str) -> Self {
        AuthRow {
            principal: principal.into(),
            component: component.into(),
            data_class: data_class.into(),
            purpose: purpose.into(),
        }
    }

    pub fn covers(&self, e: &crate::trace::TraceEvent) -> bool {
        let hit = |pat: &str, v: Option<&str>| pat == WILDCARD || Some(pat) == v;
        hit(&self.principal, Some(&e.principal))
            && hit(&self.component, Some(&e.component))
            && hit(&self.data_class, e.data_class.as_deref())
            && hit(&self.purpose, e.purpose.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoFlowSpec {
    /// Allow-list; an access no row covers is denied.
    pub auth_table: Vec<AuthRow>,
    /// Rows under review. They never authorize; certifiers escalate on them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending: Vec<AuthRow>,
    #[serde(default)]
    pub purpose_binding: bool,
    #[serde(default)]
    pub release_constraints: BTreeSet<String>,
}

impl InfoFlowSpec {
    pub fn authorizes(&self, e: &crate::trace::TraceEvent) -> bool {
        self.auth_table.iter().any(|r| r.covers(e))
    }

    pub fn pending_for(&self, e: &crate::trace::TraceEvent) -> bool {
        self.pending.iter().any(|r| r.covers(e))
    }

    /// Whether the layer needs evidence provenance beyond the event itself.
    pub fn needs_provenance(&self) -> bool {
        self.purpose_binding || !self.release_constraints.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum LayerSpec {
    Monitor(MonitorSpec),
    Counter(CounterSpec),
    Temporal(TemporalSpec),
    InfoFlow(InfoFlowSpec),
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Monitor(_) => LayerKind::Monitor,
            LayerSpec::Counter(_) => LayerKind::Counter,
            LayerSpec::Temporal(_) => LayerKind::Temporal,
            LayerSpec::InfoFlow(_) => LayerKind::InfoFlow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct PolicyLayer {
    pub layer_id: String,
    pub tier: Tier,
    pub description: String,
    pub spec: LayerSpec,
}

impl PolicyLayer {
    pub fn new(layer_id: impl Into<String>, tier: Tier, spec: LayerSpec) -> Self {
        PolicyLayer {
            layer_id: layer_id.into(),
            tier,
            description: String::new(),
            spec,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.spec.kind()
    }

    /// Structural checks plus the monitor determinism check.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let err = |field: &str, message: String| PolicyError::Validation {
            layer: self.layer_id.clone(),
            field: field.to_string(),
            message,
        };
        if self.layer_id.is_empty() {
            return Err(err("layer_id", "must be nonempty".into()));
        }
        match &self.spec {
            LayerSpec::Monitor(m) => {
                let states: BTreeSet<&str> = m.states.iter().map(String::as_str).collect();
                if states.len() != m.states.len() {
                    return Err(err("spec.states", "duplicate state".into()));
                }
                if !states.contains(m.initial.as_str()) {
                    return Err(err("spec.initial", format!("`{}` is not a state", m.initial)));
                }
                for s in &m.accepting {
                    if !states.contains(s.as_str()) {
                        return Err(err("spec.accepting", format!("`{s}` is not a state")));
                    }
                }
                for (i, t) in m.transitions.iter().enumerate() {
                    for end in [&t.from, &t.to] {
                        if !states.contains(end.as_str()) {
                            return Err(err(
                                &format!("spec.transitions[{i}]"),
                                format!("`{end}` is not a state"),
                            ));
                        }
                    }
                }
                for s in &m.states {
                    if !m.defaults.contains_key(s) {
                        return Err(err("spec.defaults", format!("state `{s}` has no default rule")));
                    }
                }
                for s in m.defaults.keys() {
                    if !states.contains(s.as_str()) {
                        return Err(err("spec.defaults", format!("`{s}` is not a state")));
                    }
                }
                let report = determinism_report(&self.layer_id, m);
                if let Some((state, first, second)) = report.overlaps.first() {
                    return Err(PolicyError::NondeterministicMonitor {
                        layer: self.layer_id.clone(),
                        state: state.clone(),
                        first: *first,
                        second: *second,
                    });
                }
            }
            LayerSpec::Counter(c) => {
                let mut names = BTreeSet::new();
                for (i, def) in c.counters.iter().enumerate() {
                    if !names.insert(def.name.as_str()) {
                        return Err(err(
                            &format!("spec.counters[{i}].name"),
                            format!("duplicate counter `{}`", def.name),
                        ));
                    }
                    if def.bound < 0 {
                        return Err(err(
                            &format!("spec.counters[{i}].bound"),
                            "bound must be non-negative".into(),
                        ));
                    }
                    if def.window_ticks == Some(0) {
                        return Err(err(
                            &format!("spec.counters[{i}].window_ticks"),
                            "window must be positive".into(),
                        ));
                    }
                }
                for (i, u) in c.updates.iter().enumerate() {
                    if !names.contains(u.counter.as_str()) {
                        return Err(err(
                            &format!("spec.updates[{i}].counter"),
                            format!("unknown counter `{}`", u.counter),
                        ));
                    }
                }
            }
            LayerSpec::Temporal(t) => match (t.pattern, t.k) {
                (TemporalPattern::ResponseWithin, None) => {
                    return Err(err("spec.k", "response_within needs k".into()))
                }
                (TemporalPattern::ResponseWithin, Some(_)) => {}
                (_, Some(_)) => return Err(err("spec.k", "k applies to response_within only".into())),
                (_, None) => {}
            },
            LayerSpec::InfoFlow(f) => {
                for (i, row) in f.auth_table.iter().chain(&f.pending).enumerate() {
                    if [&row.principal, &row.component, &row.data_class, &row.purpose]
                        .iter()
                        .any(|s| s.is_empty())
                    {
                        return Err(err(
                            &format!("spec.auth_table[{i}]"),
                            "empty field; use `*` for a wildcard".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Wire form of a layer: `kind` selects how `spec` is read.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    layer_id: String,
    kind: LayerKind,
    tier: Tier,
    #[serde(default)]
    description: String,
    spec: serde_json::Value,
}

impl TryFrom<RawLayer> for PolicyLayer {
    type Error = String;

    fn try_from(raw: RawLayer) -> Result<Self, Self::Error> {
        let ctx = |e: serde_json::Error| format!("layer `{}` spec: {e}", raw.layer_id);
        let spec = match raw.kind {
            LayerKind::Monitor => LayerSpec::Monitor(serde_json::from_value(raw.spec.clone()).map_err(ctx)?),
            LayerKind::Counter => LayerSpec::Counter(serde_json::from_value(raw.spec.clone()).map_err(ctx)?),
            LayerKind::Temporal => LayerSpec::Temporal(serde_json::from_value(raw.spec.clone()).map_err(ctx)?),
            LayerKind::InfoFlow => LayerSpec::InfoFlow(serde_json::from_value(raw.spec.clone()).map_err(ctx)?),
        };
        Ok(PolicyLayer {
            layer_id: raw.layer_id,
            tier: raw.tier,
            description: raw.description,
            spec,
        })
    }
}

impl From<PolicyLayer> for RawLayer {
    fn from(l: PolicyLayer) -> Self {
        let kind = l.kind();
        let spec = match l.spec {
            LayerSpec::Monitor(s) => serde_json::to_value(s),
            LayerSpec::Counter(s) => serde_json::to_value(s),
            LayerSpec::Temporal(s) => serde_json::to_value(s),
            LayerSpec::InfoFlow(s) => serde_json::to_value(s),
        }
        .expect("layer specs serialize");
        RawLayer {
            layer_id: l.layer_id,
            kind,
            tier: l.tier,
            description: l.description,
            spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySystem {
    pub version: String,
    pub source: String,
    pub effective_from: Tick,
    pub layers: Vec<PolicyLayer>,
}

impl PolicySystem {
    pub fn new(version: impl Into<String>, source: impl Into<String>, layers: Vec<PolicyLayer>) -> Self {
        PolicySystem {
            version: version.into(),
            source: source.into(),
            effective_from: 0,
            layers,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.version.is_empty() {
            return Err(PolicyError::Validation {
                layer: String::new(),
                field: "version".into(),
                message: "must be nonempty".into(),
            });
        }
        let mut ids = BTreeSet::new();
        for layer in &self.layers {
            if !ids.insert(layer.layer_id.as_str()) {
                return Err(PolicyError::DuplicateLayerId(layer.layer_id.clone()));
            }
            layer.validate()?;
        }
        Ok(())
    }

    pub fn layer(&self, layer_id: &str) -> Option<&PolicyLayer> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Single-layer policy with the same header.
    pub fn only(&self, layer_id: &str) -> Option<PolicySystem> {
        let layer = self.layer(layer_id)?.clone();
        Some(PolicySystem {
            layers: vec![layer],
            ..self.clone()
        })
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serialization is infallible")
    }
}

/// Parses and validates a policy file, including monitor determinism.
pub fn parse_policy(bytes: &[u8]) -> Result<PolicySystem, PolicyError> {
    let text = std::str::from_utf8(bytes).map_err(|e| PolicyError::Parse(e.to_string()))?;
    let policy: PolicySystem =
        serde_json::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
    policy.validate()?;
    Ok(policy)
}

/// Conjunctive strengthening `Π ∧ Π_new` under a new version string.
pub fn strengthen(
    policy: &PolicySystem,
    layer: PolicyLayer,
    new_version: impl Into<String>,
) -> Result<PolicySystem, PolicyError> {
    let new_version = new_version.into();
    if new_version == policy.version {
        return Err(PolicyError::VersionUnchanged(new_version));
    }
    if policy.layer(&layer.layer_id).is_some() {
        return Err(PolicyError::DuplicateLayerId(layer.layer_id));
    }
    layer.validate()?;
    let mut out = policy.clone();
    out.version = new_version;
    out.layers.push(layer);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MonitorDeterminism {
    pub layer_id: String,
    pub states: usize,
    pub transitions: usize,
    pub pairs_checked: usize,
    /// (state, first transition index, second transition index)
    pub overlaps: Vec<(String, usize, usize)>,
}

fn determinism_report(layer_id: &str, m: &MonitorSpec) -> MonitorDeterminism {
    let mut pairs_checked = 0;
    let mut overlaps = Vec::new();
    for state in &m.states {
        let out: Vec<_> = m.outgoing(state).collect();
        for (i, (ia, ta)) in out.iter().enumerate() {
            for (ib, tb) in &out[i + 1..] {
                pairs_checked += 1;
                if !ta.on.disjoint_from(&tb.on) {
                    overlaps.push((state.clone(), *ia, *ib));
                }
            }
        }
    }
    MonitorDeterminism {
        layer_id: layer_id.to_string(),
        states: m.states.len(),
        transitions: m.transitions.len(),
        pairs_checked,
        overlaps,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LintReport {
    pub version: String,
    pub layers: Vec<(String, LayerKind)>,
    pub monitors: Vec<MonitorDeterminism>,
    pub error: Option<String>,
}

impl LintReport {
    pub fn ok(&self) -> bool {
        self.error.is_none() && self.monitors.iter().all(|m| m.overlaps.is_empty())
    }
}

/// Lints a policy file without stopping at the first nondeterministic monitor.
pub fn lint_policy(bytes: &[u8]) -> LintReport {
    let parsed: Result<PolicySystem, PolicyError> = std::str::from_utf8(bytes)
        .map_err(|e| PolicyError::Parse(e.to_string()))
        .and_then(|t| serde_json::from_str(t).map_err(|e| PolicyError::Parse(e.to_string())));
    let policy = match parsed {
        Ok(p) => p,
        Err(e) => {
            return LintReport {
                version: String::new(),
                layers: Vec::new(),
                monitors: Vec::new(),
                error: Some(e.to_string()),
            }
        }
    };
    let monitors = policy
        .layers
        .iter()
        .filter_map(|l| match &l.spec {
            LayerSpec::Monitor(m) => Some(determinism_report(&l.layer_id, m)),
            _ => None,
        })
        .collect();
    LintReport {
        version: policy.version.clone(),
        layers: policy.layers.iter().map(|l| (l.layer_id.clone(), l.kind())).collect(),
        monitors,
        error: policy.validate().err().map(|e| e.to_string()),
    }
}

//! Certification state `h_t`: monitor positions, windowed counters, response
//! obligations, an evidence registry and approval records.
//!
//! Updates are functional. Reads go through [`MemoryState::query`], which
//! gates each fact family on the caller's [`MemoryClass`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::Ledger;
use crate::policy::{
    CounterScope, DefaultRule, LayerSpec, Match, PolicyLayer, PolicySystem, TemporalPattern,
    TemporalSpec,
};
use crate::trace::{Digest, EventKind, Scalar, Tick, TraceEvent};

/// Default approval lifetime when an Approval names no `valid_until`.
pub const DEFAULT_APPROVAL_TICKS: Tick = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemoryClass {
    #[serde(rename = "M0_FiniteState")]
    M0FiniteState,
    #[serde(rename = "M1_Counter")]
    M1Counter,
    #[serde(rename = "M2_Provenance")]
    M2Provenance,
    #[serde(rename = "M3_Persistent")]
    M3Persistent,
}

impl MemoryClass {
    pub const ALL: [MemoryClass; 4] = [
        MemoryClass::M0FiniteState,
        MemoryClass::M1Counter,
        MemoryClass::M2Provenance,
        MemoryClass::M3Persistent,
    ];
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("event at tick {tick} precedes memory tick {last}")]
    TimeRegression { last: Tick, tick: Tick },
    #[error("{family} facts need {needed:?}, caller holds {held:?}")]
    CapabilityDenied {
        family: &'static str,
        needed: MemoryClass,
        held: MemoryClass,
    },
    #[error("unknown fact: {0}")]
    UnknownFact(String),
    #[error("persistent memory requested without a ledger handle")]
    MemoryUnavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LayerStatus {
    Active { state: String },
    Blocked {
        event_id: String,
        reason: String,
        /// The block came from an observation slot the predicate cannot decide.
        #[serde(default)]
        undetermined: bool,
    },
}

impl LayerStatus {
    fn active(state: &str) -> Self {
        LayerStatus::Active {
            state: state.to_string(),
        }
    }

    pub fn is_blocked(&self) -> bool {
        matches!(self, LayerStatus::Blocked { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CounterKey {
    pub layer_id: String,
    pub counter: String,
    pub principal: String,
    pub resource: String,
}

impl CounterKey {
    /// `(principal, resource)`, or `global` for globally scoped counters.
    pub fn scope_label(&self) -> String {
        if self.principal.is_empty() && self.resource.is_empty() {
            "global".to_string()
        } else {
            format!("({}, {})", self.principal, self.resource)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterEntry {
    pub tick: Tick,
    pub delta: i64,
    pub event_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Obligation {
    pub layer_id: String,
    pub event_id: String,
    pub deadline: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: EventKind,
    pub source: String,
    #[serde(default)]
    pub data_class: Option<String>,
    #[serde(default)]
    pub purpose: Option<String>,
    #[serde(default)]
    pub evidence_refs: Vec<String>,
    #[serde(default)]
    pub value: Option<Scalar>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalRecord {
    pub approver: String,
    pub event_id: String,
    pub valid_from: Tick,
    pub valid_until: Tick,
}

impl ApprovalRecord {
    pub fn covers(&self, tick: Tick) -> bool {
        self.valid_from <= tick && tick <= self.valid_until
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryState {
    /// Automaton position per monitor and temporal layer.
    pub monitor_states: BTreeMap<String, LayerStatus>,
    #[serde(with = "counter_map")]
    pub counters: BTreeMap<CounterKey, Vec<CounterEntry>>,
    pub obligations: Vec<Obligation>,
    pub provenance: BTreeMap<String, Provenance>,
    pub approvals: BTreeMap<Digest, ApprovalRecord>,
    pub last_updated_tick: Tick,
}

mod counter_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Track {
        #[serde(flatten)]
        key: CounterKey,
        entries: Vec<CounterEntry>,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<CounterKey, Vec<CounterEntry>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let tracks: Vec<Track> = map
            .iter()
            .map(|(k, v)| Track {
                key: k.clone(),
                entries: v.clone(),
            })
            .collect();
        tracks.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<CounterKey, Vec<CounterEntry>>, D::Error> {
        let tracks = Vec::<Track>::deserialize(d)?;
        Ok(tracks.into_iter().map(|t| (t.key, t.entries)).collect())
    }
}

/// A proof-relevant question about the state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fact {
    LayerStatus(String),
    /// Windowed sum for one counter key, evaluated at tick `at`.
    Count {
        key: CounterKey,
        window: Option<Tick>,
        at: Tick,
    },
    Obligations(String),
    Provenance(String),
    Approval(Digest),
    LedgerHead,
    LedgerRecordFor(Digest),
}

impl Fact {
    /// Weakest memory class that may read this fact.
    pub fn required_class(&self) -> MemoryClass {
        match self {
            Fact::LayerStatus(_) => MemoryClass::M0FiniteState,
            Fact::Count { .. } | Fact::Obligations(_) => MemoryClass::M1Counter,
            Fact::Provenance(_) | Fact::Approval(_) => MemoryClass::M2Provenance,
            Fact::LedgerHead | Fact::LedgerRecordFor(_) => MemoryClass::M3Persistent,
        }
    }

    fn family(&self) -> &'static str {
        match self {
            Fact::LayerStatus(_) => "automaton",
            Fact::Count { .. } => "counter",
            Fact::Obligations(_) => "obligation",
            Fact::Provenance(_) => "provenance",
            Fact::Approval(_) => "approval",
            Fact::LedgerHead | Fact::LedgerRecordFor(_) => "ledger",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FactAnswer {
    Status(LayerStatus),
    Count(i64),
    Obligations(Vec<Obligation>),
    Provenance(Provenance),
    Approval(Option<ApprovalRecord>),
    LedgerHead(Digest),
    /// Sequence numbers of ledger entries for the trace hash.
    LedgerRecords(Vec<u64>),
}

fn initial_state(layer: &PolicyLayer) -> Option<&str> {
    match &layer.spec {
        LayerSpec::Monitor(m) => Some(&m.initial),
        LayerSpec::Temporal(t) => Some(match t.pattern {
            TemporalPattern::Precedence => "waiting",
            TemporalPattern::AbsenceAfter => "open",
            TemporalPattern::ResponseWithin => "tracking",
        }),
        _ => None,
    }
}

fn blocked(e: &TraceEvent, reason: String) -> LayerStatus {
    LayerStatus::Blocked {
        event_id: e.event_id.clone(),
        reason,
        undetermined: false,
    }
}

fn undetermined(e: &TraceEvent) -> LayerStatus {
    LayerStatus::Blocked {
        event_id: e.event_id.clone(),
        reason: "undetermined observation slot".into(),
        undetermined: true,
    }
}

impl MemoryState {
    /// Initial state `h_0` for a policy.
    pub fn new(policy: &PolicySystem) -> Self {
        let mut state = MemoryState::default();
        state.reset_session(policy);
        state
    }

    /// Restarts every automaton for a new trace while keeping counters,
    /// evidence and approvals carried over from earlier sessions.
    pub fn reset_session(&mut self, policy: &PolicySystem) {
        self.monitor_states = policy
            .layers
            .iter()
            .filter_map(|l| Some((l.layer_id.clone(), LayerStatus::active(initial_state(l)?))))
            .collect();
        self.obligations.clear();
    }

    /// `h_t = Update(h_{t-1}, e_t)`.
    pub fn update(&self, policy: &PolicySystem, e: &TraceEvent) -> Result<MemoryState, MemoryError> {
        if e.tick < self.last_updated_tick {
            return Err(MemoryError::TimeRegression {
                last: self.last_updated_tick,
                tick: e.tick,
            });
        }
        let mut next = self.clone();
        next.last_updated_tick = e.tick;
        for layer in &policy.layers {
            match &layer.spec {
                LayerSpec::Monitor(_) | LayerSpec::Temporal(_) => next.step_automaton(layer, e),
                LayerSpec::Counter(c) => {
                    for u in &c.updates {
                        let Some(def) = c.counter(&u.counter) else { continue };
                        if u.on.evaluate(e) != Match::Yes {
                            continue;
                        }
                        let (principal, resource) = match def.scope {
                            CounterScope::PerPrincipalResource => {
                                (e.principal.clone(), e.resource.clone().unwrap_or_default())
                            }
                            CounterScope::Global => (String::new(), String::new()),
                        };
                        let key = CounterKey {
                            layer_id: layer.layer_id.clone(),
                            counter: def.name.clone(),
                            principal,
                            resource,
                        };
                        next.counters.entry(key).or_default().push(CounterEntry {
                            tick: e.tick,
                            delta: u.delta.amount(e),
                            event_id: e.event_id.clone(),
                        });
                    }
                    for (key, entries) in next.counters.iter_mut() {
                        if key.layer_id != layer.layer_id {
                            continue;
                        }
                        if let Some(def) = c.counter(&key.counter) {
                            entries.retain(|x| def.in_window(x.tick, e.tick));
                        }
                    }
                }
                LayerSpec::InfoFlow(_) => {}
            }
        }
        next.counters.retain(|_, v| !v.is_empty());
        next.register(e);
        Ok(next)
    }

    /// Folds a whole event list.
    pub fn fold<'a>(
        &self,
        policy: &PolicySystem,
        events: impl IntoIterator<Item = &'a TraceEvent>,
    ) -> Result<MemoryState, MemoryError> {
        events
            .into_iter()
            .try_fold(self.clone(), |s, e| s.update(policy, e))
    }

    fn step_automaton(&mut self, layer: &PolicyLayer, e: &TraceEvent) {
        let id = &layer.layer_id;
        let current = match self.monitor_states.get(id) {
            Some(LayerStatus::Active { state }) => state.clone(),
            Some(LayerStatus::Blocked { .. }) => return,
            None => match initial_state(layer) {
                Some(s) => s.to_string(),
                None => return,
            },
        };
        let next = match &layer.spec {
            LayerSpec::Monitor(m) => {
                let mut found = None;
                for (_, t) in m.outgoing(&current) {
                    match t.on.evaluate(e) {
                        Match::Yes => {
                            found = Some(LayerStatus::active(&t.to));
                            break;
                        }
                        Match::Undetermined => {
                            found = Some(undetermined(e));
                            break;
                        }
                        Match::No => {}
                    }
                }
                found.unwrap_or_else(|| match m.default_rule(&current) {
                    Some(DefaultRule::SelfLoop) => LayerStatus::active(&current),
                    _ => blocked(e, format!("no transition from `{current}`")),
                })
            }
            LayerSpec::Temporal(t) => self.step_temporal(id, t, &current, e),
            _ => return,
        };
        self.monitor_states.insert(id.clone(), next);
    }

    fn step_temporal(&mut self, id: &str, t: &TemporalSpec, current: &str, e: &TraceEvent) -> LayerStatus {
        let (a, b) = match (t.a.evaluate(e), t.b.evaluate(e)) {
            (Match::Undetermined, _) | (_, Match::Undetermined) => return undetermined(e),
            (a, b) => (a == Match::Yes, b == Match::Yes),
        };
        match t.pattern {
            TemporalPattern::Precedence => {
                if b && current == "waiting" {
                    blocked(e, "required predecessor event is missing".into())
                } else if a {
                    LayerStatus::active("armed")
                } else {
                    LayerStatus::active(current)
                }
            }
            TemporalPattern::AbsenceAfter => {
                if a && current == "closed" {
                    blocked(e, "event forbidden after its trigger".into())
                } else if b {
                    LayerStatus::active("closed")
                } else {
                    LayerStatus::active(current)
                }
            }
            TemporalPattern::ResponseWithin => {
                let expired = self
                    .obligations
                    .iter()
                    .find(|o| o.layer_id == id && o.deadline < e.tick)
                    .map(|o| o.event_id.clone());
                if let Some(missed) = expired {
                    return blocked(e, format!("no response to `{missed}` in time"));
                }
                if b {
                    self.obligations.retain(|o| o.layer_id != id);
                }
                if a {
                    self.obligations.push(Obligation {
                        layer_id: id.to_string(),
                        event_id: e.event_id.clone(),
                        deadline: e.tick + t.k.unwrap_or(0),
                    });
                }
                LayerStatus::active(current)
            }
        }
    }

    fn register(&mut self, e: &TraceEvent) {
        let tracked = matches!(
            e.kind,
            EventKind::Retrieval | EventKind::Computation | EventKind::Claim
        ) || e.data_class.is_some()
            || !e.evidence_refs.is_empty();
        if tracked {
            self.provenance.insert(
                e.event_id.clone(),
                Provenance {
                    kind: e.kind,
                    source: e.component.clone(),
                    data_class: e.data_class.clone(),
                    purpose: e.purpose.clone(),
                    evidence_refs: e.evidence_refs.clone(),
                    value: e.value().cloned(),
                },
            );
        }
        if e.kind == EventKind::Approval {
            let binds = e
                .params
                .get("binds")
                .and_then(Scalar::as_str)
                .and_then(|h| h.parse::<Digest>().ok());
            if let Some(digest) = binds {
                let tick_param = |k: &str| {
                    e.params
                        .get(k)
                        .and_then(Scalar::as_int)
                        .and_then(|v| Tick::try_from(v).ok())
                };
                let valid_from = tick_param("valid_from").unwrap_or(e.tick);
                let valid_until =
                    tick_param("valid_until").unwrap_or(valid_from + DEFAULT_APPROVAL_TICKS);
                self.approvals.insert(
                    digest,
                    ApprovalRecord {
                        approver: e.principal.clone(),
                        event_id: e.event_id.clone(),
                        valid_from,
                        valid_until,
                    },
                );
            }
        }
    }

    /// Answers `fact` for a caller holding `class`.
    pub fn query(
        &self,
        fact: &Fact,
        class: MemoryClass,
        ledger: Option<&Ledger>,
    ) -> Result<FactAnswer, MemoryError> {
        let needed = fact.required_class();
        if class < needed {
            return Err(MemoryError::CapabilityDenied {
                family: fact.family(),
                needed,
                held: class,
            });
        }
        Ok(match fact {
            Fact::LayerStatus(id) => FactAnswer::Status(
                self.monitor_states
                    .get(id)
                    .cloned()
                    .ok_or_else(|| MemoryError::UnknownFact(format!("layer `{id}`")))?,
            ),
            Fact::Count { key, window, at } => FactAnswer::Count(
                self.counters
                    .get(key)
                    .map(|entries| {
                        entries
                            .iter()
                            .filter(|x| x.tick <= *at && window.is_none_or(|w| at - x.tick < w))
                            .map(|x| x.delta)
                            .sum()
                    })
                    .unwrap_or(0),
            ),
            Fact::Obligations(id) => FactAnswer::Obligations(
                self.obligations
                    .iter()
                    .filter(|o| &o.layer_id == id)
                    .cloned()
                    .collect(),
            ),
            Fact::Provenance(id) => FactAnswer::Provenance(
                self.provenance
                    .get(id)
                    .cloned()
                    .ok_or_else(|| MemoryError::UnknownFact(format!("evidence `{id}`")))?,
            ),
            Fact::Approval(digest) => FactAnswer::Approval(self.approvals.get(digest).cloned()),
            Fact::LedgerHead => {
                FactAnswer::LedgerHead(ledger.ok_or(MemoryError::MemoryUnavailable)?.head())
            }
            Fact::LedgerRecordFor(digest) => FactAnswer::LedgerRecords(
                ledger
                    .ok_or(MemoryError::MemoryUnavailable)?
                    .entries()
                    .iter()
                    .filter(|x| &x.trace_hash == digest)
                    .map(|x| x.seq)
                    .collect(),
            ),
        })
    }

    /// Counter keys belonging to one layer.
    pub fn counter_keys<'a>(&'a self, layer_id: &'a str) -> impl Iterator<Item = &'a CounterKey> {
        self.counters.keys().filter(move |k| k.layer_id == layer_id)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("memory serialization is infallible")
    }
}

//! The permissibility machine: `(τ, Π, h) ↦ certificate | reject | escalate`.
//!
//! A sound certifier certifies only when every layer obligation is witnessed
//! from what its observation mask shows and what its memory class may read.
//! Anything it cannot witness becomes an escalation, never a certificate.

mod certificate;
mod replay;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_rational::BigRational;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::ledger::Ledger;
use crate::memory::{CounterKey, Fact, FactAnswer, LayerStatus, MemoryClass, MemoryError, MemoryState};
use crate::policy::{
    evaluate, CounterScope, Delta, LayerSpec, Match, PolicyError, PolicyLayer, PolicySystem,
    SpecError, TemporalPattern,
};
use crate::trace::{
    approval_subject_hash, canonical_hash, EventKind, ProposedTrace, Tick, Tier, TraceEvent,
};

pub use certificate::{
    check_certificate, commitment, inspect_certificate, open_commitments, Certificate,
    CertificateCheck, CertificateComponent, CommitmentStatus, ComponentKind, MacKey,
};
pub use replay::{eval_expr, references, scalar_value, ReplayError};

/// Environment variable that overrides the configured MAC key (hex).
pub const MAC_KEY_ENV: &str = "CERTGATE_MAC_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ObservationMask {
    #[default]
    FullTrace,
    FinalEventOnly,
    EventKindsOnly,
}

fn key_from_hex<'de, D: Deserializer<'de>>(d: D) -> Result<MacKey, D::Error> {
    let s = String::deserialize(d)?;
    MacKey::from_hex(&s).map_err(serde::de::Error::custom)
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifierConfig {
    pub certifier_id: String,
    pub authority_tier: Tier,
    pub memory_class: MemoryClass,
    #[serde(default)]
    pub observation_mask: ObservationMask,
    #[serde(deserialize_with = "key_from_hex")]
    pub mac_key: MacKey,
    /// `false` only for baselines that certify whatever their view permits.
    #[serde(default = "yes")]
    pub sound: bool,
    /// Data classes whose events are committed to rather than cited.
    #[serde(default)]
    pub commit_data_classes: BTreeSet<String>,
}

impl CertifierConfig {
    pub fn new(certifier_id: impl Into<String>, authority_tier: Tier, memory_class: MemoryClass, mac_key: MacKey) -> Self {
        CertifierConfig {
            certifier_id: certifier_id.into(),
            authority_tier,
            memory_class,
            observation_mask: ObservationMask::FullTrace,
            mac_key,
            sound: true,
            commit_data_classes: BTreeSet::new(),
        }
    }

    /// Output-only guardrail: inspects the final event and certifies if it looks fine.
    pub fn guardrail_baseline(certifier_id: impl Into<String>, authority_tier: Tier, mac_key: MacKey) -> Self {
        CertifierConfig {
            observation_mask: ObservationMask::FinalEventOnly,
            sound: false,
            ..CertifierConfig::new(certifier_id, authority_tier, MemoryClass::M0FiniteState, mac_key)
        }
    }

    pub fn with_mask(mut self, mask: ObservationMask) -> Self {
        self.observation_mask = mask;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    SelfApproval,
    PolicyVersionMismatch,
    InvalidTrace,
    LayerViolation,
    CrossSessionBudget,
    Unauthorized,
    ComputeMismatch,
    ApproverIsProposer,
    AuthorityShortfall,
    MaskedInformation,
    CapabilityDenied,
    UndeterminedSlot,
    StaleApproval,
    PendingAuthorization,
    ComputeUnverifiable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reason {
    pub code: ReasonCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
    pub detail: String,
}

impl Reason {
    fn new(code: ReasonCode, detail: impl Into<String>) -> Self {
        Reason {
            code,
            layer_id: None,
            event_id: None,
            detail: detail.into(),
        }
    }

    fn layer(mut self, layer_id: &str) -> Self {
        self.layer_id = Some(layer_id.to_string());
        self
    }

    fn at(mut self, event_id: &str) -> Self {
        self.event_id = Some(event_id.to_string());
        self
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let code = serde_json::to_value(self.code).expect("code serializes");
        write!(f, "{}", code.as_str().unwrap_or("?"))?;
        if let Some(l) = &self.layer_id {
            write!(f, " [{l}]")?;
        }
        if let Some(e) = &self.event_id {
            write!(f, " at {e}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Verdict {
    Certified { certificate: Certificate },
    Rejected { reasons: Vec<Reason> },
    Escalate { reasons: Vec<Reason>, required_tier: Tier },
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certified { .. })
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        match self {
            Verdict::Certified { certificate } => Some(certificate),
            _ => None,
        }
    }

    pub fn reasons(&self) -> &[Reason] {
        match self {
            Verdict::Certified { .. } => &[],
            Verdict::Rejected { reasons } | Verdict::Escalate { reasons, .. } => reasons,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Certified { .. } => "certified",
            Verdict::Rejected { .. } => "rejected",
            Verdict::Escalate { .. } => "escalate",
        }
    }

    /// CLI exit code: 0 certified, 10 escalate, 20 rejected.
    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Certified { .. } => 0,
            Verdict::Escalate { .. } => 10,
            Verdict::Rejected { .. } => 20,
        }
    }

    fn rejected(reason: Reason) -> Self {
        Verdict::Rejected {
            reasons: vec![reason],
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CertifyError {
    #[error("persistent memory class requires a ledger handle")]
    MemoryUnavailable,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

/// Events as the mask presents them.
pub fn masked_view(trace: &ProposedTrace, mask: ObservationMask) -> Vec<TraceEvent> {
    match mask {
        ObservationMask::FullTrace => trace.events.clone(),
        ObservationMask::FinalEventOnly => trace.events.last().cloned().into_iter().collect(),
        ObservationMask::EventKindsOnly => trace
            .events
            .iter()
            .map(|e| TraceEvent::new(e.event_id.clone(), 0, e.kind, "", ""))
            .collect(),
    }
}

pub fn certify(
    trace: &ProposedTrace,
    policy: &PolicySystem,
    memory: &MemoryState,
    cfg: &CertifierConfig,
) -> Result<Verdict, CertifyError> {
    certify_with_ledger(trace, policy, memory, None, cfg)
}

/// [`certify`] with a ledger handle, required for the persistent memory class.
pub fn certify_with_ledger(
    trace: &ProposedTrace,
    policy: &PolicySystem,
    memory: &MemoryState,
    ledger: Option<&Ledger>,
    cfg: &CertifierConfig,
) -> Result<Verdict, CertifyError> {
    if trace.proposer_id == cfg.certifier_id {
        return Ok(Verdict::rejected(Reason::new(
            ReasonCode::SelfApproval,
            format!("`{}` cannot certify its own proposal", cfg.certifier_id),
        )));
    }
    if let Err(e) = trace.validate() {
        return Ok(Verdict::rejected(Reason::new(ReasonCode::InvalidTrace, e.to_string())));
    }
    if trace.requested_policy_version != policy.version {
        return Ok(Verdict::rejected(Reason::new(
            ReasonCode::PolicyVersionMismatch,
            format!(
                "policy version mismatch: trace requests `{}`, policy is `{}`",
                trace.requested_policy_version, policy.version
            ),
        )));
    }
    if cfg.memory_class == MemoryClass::M3Persistent && ledger.is_none() {
        return Err(CertifyError::MemoryUnavailable);
    }
    policy.validate()?;
    if trace.declared_tier > cfg.authority_tier {
        return Ok(Verdict::Escalate {
            reasons: vec![Reason::new(
                ReasonCode::AuthorityShortfall,
                format!(
                    "declared tier {} exceeds certifier authority {}",
                    trace.declared_tier, cfg.authority_tier
                ),
            )],
            required_tier: trace.declared_tier,
        });
    }
    let mut w = Witness::new(trace, policy, memory, ledger, cfg);
    if cfg.sound {
        w.sound()?;
    } else {
        w.baseline()?;
    }
    Ok(w.finish())
}

/// Memory after a certified trace is committed: counters, evidence and
/// approvals carry over to later sessions.
pub fn commit_memory(
    trace: &ProposedTrace,
    policy: &PolicySystem,
    memory: &MemoryState,
) -> Result<MemoryState, MemoryError> {
    let mut start = memory.clone();
    start.reset_session(policy);
    start.fold(policy, &trace.events)
}

struct Witness<'a> {
    trace: &'a ProposedTrace,
    policy: &'a PolicySystem,
    memory: &'a MemoryState,
    ledger: Option<&'a Ledger>,
    cfg: &'a CertifierConfig,
    rejections: Vec<Reason>,
    escalations: Vec<Reason>,
    /// Layers already decided; later events no longer consult them.
    resolved: BTreeSet<String>,
    layer_refs: BTreeMap<String, Vec<String>>,
    layer_claims: BTreeMap<String, (ComponentKind, String)>,
    extra: Vec<CertificateComponent>,
}

impl<'a> Witness<'a> {
    fn new(
        trace: &'a ProposedTrace,
        policy: &'a PolicySystem,
        memory: &'a MemoryState,
        ledger: Option<&'a Ledger>,
        cfg: &'a CertifierConfig,
    ) -> Self {
        Witness {
            trace,
            policy,
            memory,
            ledger,
            cfg,
            rejections: Vec::new(),
            escalations: Vec::new(),
            resolved: BTreeSet::new(),
            layer_refs: BTreeMap::new(),
            layer_claims: BTreeMap::new(),
            extra: Vec::new(),
        }
    }

    fn reject(&mut self, layer: Option<&PolicyLayer>, reason: Reason) {
        if let Some(l) = layer {
            self.resolved.insert(l.layer_id.clone());
        }
        self.rejections.push(reason);
    }

    fn escalate(&mut self, layer: Option<&PolicyLayer>, reason: Reason) {
        if let Some(l) = layer {
            self.resolved.insert(l.layer_id.clone());
        }
        self.escalations.push(reason);
    }

    fn query(&self, state: &MemoryState, fact: &Fact) -> Result<FactAnswer, MemoryError> {
        state.query(fact, self.cfg.memory_class, self.ledger)
    }

    /// Runs the oracle on the masked view and believes it.
    fn baseline(&mut self) -> Result<(), CertifyError> {
        let view = masked_view(self.trace, self.cfg.observation_mask);
        let verdict = evaluate(self.policy, &view)?;
        for l in verdict.rejecting_layers() {
            let v = l.violation.as_ref();
            let mut r = Reason::new(
                ReasonCode::LayerViolation,
                v.map_or(String::new(), |v| v.reason.clone()),
            )
            .layer(&l.layer_id);
            r.event_id = v.and_then(|v| v.event_id.clone());
            self.rejections.push(r);
        }
        let mask = format!("{:?}", self.cfg.observation_mask);
        for layer in &self.policy.layers {
            let refs = view.iter().map(|e| e.event_id.clone()).collect();
            self.layer_refs.insert(layer.layer_id.clone(), refs);
            self.layer_claims.insert(
                layer.layer_id.clone(),
                (ComponentKind::Policy, format!("accepted on the {mask} view")),
            );
        }
        Ok(())
    }

    fn sound(&mut self) -> Result<(), CertifyError> {
        let events = &self.trace.events;
        let multi = events.len() > 1 && !self.policy.layers.is_empty();
        match self.cfg.observation_mask {
            ObservationMask::FullTrace => self.witness(events.clone()),
            ObservationMask::FinalEventOnly if multi => {
                self.escalate(
                    None,
                    Reason::new(
                        ReasonCode::MaskedInformation,
                        format!("only the final event of {} is visible", events.len()),
                    ),
                );
                Ok(())
            }
            ObservationMask::FinalEventOnly => self.witness(events.clone()),
            ObservationMask::EventKindsOnly => {
                let opaque: Vec<&PolicyLayer> = self
                    .policy
                    .layers
                    .iter()
                    .filter(|l| !kind_determined(l))
                    .collect();
                for l in &opaque {
                    self.escalate(
                        Some(l),
                        Reason::new(
                            ReasonCode::MaskedInformation,
                            "layer reads fields beyond event kinds",
                        )
                        .layer(&l.layer_id),
                    );
                }
                if events.iter().any(|e| e.kind == EventKind::Computation) {
                    self.escalate(
                        None,
                        Reason::new(ReasonCode::MaskedInformation, "computation parameters are masked"),
                    );
                }
                if self.escalations.is_empty() {
                    self.witness(masked_view(self.trace, ObservationMask::EventKindsOnly))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn witness(&mut self, events: Vec<TraceEvent>) -> Result<(), CertifyError> {
        let policy = self.policy;
        let fresh = MemoryState::new(policy);
        for layer in &policy.layers {
            if matches!(&layer.spec, LayerSpec::Temporal(t) if t.pattern == TemporalPattern::ResponseWithin) {
                if let Err(e) = self.query(&fresh, &Fact::Obligations(layer.layer_id.clone())) {
                    self.escalate(
                        Some(layer),
                        Reason::new(ReasonCode::CapabilityDenied, e.to_string()).layer(&layer.layer_id),
                    );
                }
            }
        }

        let mut state = fresh;
        let mut peaks: BTreeMap<String, i64> = BTreeMap::new();
        for e in &events {
            state = match state.update(policy, e) {
                Ok(s) => s,
                Err(err) => {
                    self.reject(None, Reason::new(ReasonCode::InvalidTrace, err.to_string()).at(&e.event_id));
                    return Ok(());
                }
            };
            for layer in &policy.layers {
                if self.resolved.contains(&layer.layer_id) {
                    continue;
                }
                if touches(layer, e) {
                    self.layer_refs
                        .entry(layer.layer_id.clone())
                        .or_default()
                        .push(e.event_id.clone());
                }
                self.step_layer(layer, &state, e, &mut peaks);
            }
        }

        for layer in &policy.layers {
            if self.resolved.contains(&layer.layer_id) {
                continue;
            }
            self.close_layer(layer, &state, &peaks);
        }

        let lookup = if self.cfg.memory_class >= MemoryClass::M1Counter {
            self.cross_session(&events)
        } else {
            None
        };
        let lookup = lookup.as_ref().unwrap_or(&state);
        self.approval_gates(lookup);
        self.compute(&events, &state);
        self.sources(&events);
        Ok(())
    }

    fn step_layer(&mut self, layer: &PolicyLayer, state: &MemoryState, e: &TraceEvent, peaks: &mut BTreeMap<String, i64>) {
        let id = layer.layer_id.as_str();
        match &layer.spec {
            LayerSpec::Monitor(_) | LayerSpec::Temporal(_) => {
                let status = match self.query(state, &Fact::LayerStatus(id.to_string())) {
                    Ok(FactAnswer::Status(s)) => s,
                    _ => return,
                };
                if let LayerStatus::Blocked {
                    event_id,
                    reason,
                    undetermined,
                } = status
                {
                    let r = if undetermined {
                        Reason::new(ReasonCode::UndeterminedSlot, reason)
                    } else {
                        Reason::new(ReasonCode::LayerViolation, reason)
                    }
                    .layer(id)
                    .at(&event_id);
                    if undetermined {
                        self.escalate(Some(layer), r);
                    } else {
                        self.reject(Some(layer), r);
                    }
                }
            }
            LayerSpec::Counter(c) => {
                if c.updates.iter().any(|u| u.on.evaluate(e) == Match::Undetermined) {
                    self.escalate(
                        Some(layer),
                        Reason::new(ReasonCode::UndeterminedSlot, "slot may or may not update the counter")
                            .layer(id)
                            .at(&e.event_id),
                    );
                    return;
                }
                let keys: Vec<CounterKey> = state.counter_keys(id).cloned().collect();
                for key in keys {
                    let Some(def) = c.counter(&key.counter) else { continue };
                    let fact = Fact::Count {
                        key: key.clone(),
                        window: def.window_ticks,
                        at: e.tick,
                    };
                    match self.query(state, &fact) {
                        Ok(FactAnswer::Count(n)) => {
                            let peak = peaks.entry(format!("{id}/{}", def.name)).or_insert(n);
                            *peak = (*peak).max(n);
                            if n > def.bound {
                                self.reject(
                                    Some(layer),
                                    Reason::new(
                                        ReasonCode::LayerViolation,
                                        format!(
                                            "counter `{}` for {} reaches {n}, bound {}",
                                            def.name,
                                            key.scope_label(),
                                            def.bound
                                        ),
                                    )
                                    .layer(id)
                                    .at(&e.event_id),
                                );
                                return;
                            }
                        }
                        Ok(_) => {}
                        Err(err) => {
                            self.escalate(
                                Some(layer),
                                Reason::new(ReasonCode::CapabilityDenied, err.to_string()).layer(id),
                            );
                            return;
                        }
                    }
                }
            }
            LayerSpec::InfoFlow(f) => {
                if let Some(class) = &e.data_class {
                    if !f.authorizes(e) {
                        let who = format!(
                            "({}, {}, {class}, {})",
                            e.principal,
                            e.component,
                            e.purpose.as_deref().unwrap_or("-")
                        );
                        if f.pending_for(e) {
                            self.escalate(
                                Some(layer),
                                Reason::new(ReasonCode::PendingAuthorization, format!("{who} is under review"))
                                    .layer(id)
                                    .at(&e.event_id),
                            );
                        } else {
                            self.reject(
                                Some(layer),
                                Reason::new(ReasonCode::Unauthorized, format!("{who} is not in the auth table"))
                                    .layer(id)
                                    .at(&e.event_id),
                            );
                        }
                        return;
                    }
                }
                let mut classes: Vec<&str> = e.data_class.as_deref().into_iter().collect();
                let mut ancestors = Vec::new();
                if f.needs_provenance() && !e.evidence_refs.is_empty() {
                    match self.ancestors(state, e) {
                        Ok(a) => ancestors = a,
                        Err(err) => {
                            self.escalate(
                                Some(layer),
                                Reason::new(ReasonCode::CapabilityDenied, err.to_string())
                                    .layer(id)
                                    .at(&e.event_id),
                            );
                            return;
                        }
                    }
                }
                if f.purpose_binding {
                    for (src, p) in &ancestors {
                        if p.kind == EventKind::Retrieval {
                            if let Some(purpose) = &p.purpose {
                                if e.purpose.as_ref() != Some(purpose) {
                                    self.reject(
                                        Some(layer),
                                        Reason::new(
                                            ReasonCode::LayerViolation,
                                            format!("uses `{src}` retrieved for purpose `{purpose}`"),
                                        )
                                        .layer(id)
                                        .at(&e.event_id),
                                    );
                                    return;
                                }
                            }
                        }
                    }
                }
                if e.kind == EventKind::Release {
                    classes.extend(ancestors.iter().filter_map(|(_, p)| p.data_class.as_deref()));
                    if let Some(c) = classes.iter().find(|c| f.release_constraints.contains(**c)) {
                        self.reject(
                            Some(layer),
                            Reason::new(ReasonCode::LayerViolation, format!("release depends on restricted class `{c}`"))
                                .layer(id)
                                .at(&e.event_id),
                        );
                    }
                }
            }
        }
    }

    /// Transitive evidence of `e`, read through the provenance registry.
    fn ancestors(
        &self,
        state: &MemoryState,
        e: &TraceEvent,
    ) -> Result<Vec<(String, crate::memory::Provenance)>, MemoryError> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<String> = e.evidence_refs.clone();
        let mut out = Vec::new();
        while let Some(id) = stack.pop() {
            if !seen.insert(id.clone()) {
                continue;
            }
            match self.query(state, &Fact::Provenance(id.clone())) {
                Ok(FactAnswer::Provenance(p)) => {
                    stack.extend(p.evidence_refs.iter().cloned());
                    out.push((id, p));
                }
                Ok(_) | Err(MemoryError::UnknownFact(_)) => {}
                Err(err) => return Err(err),
            }
        }
        Ok(out)
    }

    fn close_layer(&mut self, layer: &PolicyLayer, state: &MemoryState, peaks: &BTreeMap<String, i64>) {
        let id = layer.layer_id.as_str();
        let last = self.trace.events.last().map(|e| e.event_id.clone()).unwrap_or_default();
        let claim = match &layer.spec {
            LayerSpec::Monitor(m) => {
                let Ok(FactAnswer::Status(LayerStatus::Active { state: q })) =
                    self.query(state, &Fact::LayerStatus(id.to_string()))
                else {
                    return;
                };
                if !m.is_accepting(&q) {
                    self.reject(
                        Some(layer),
                        Reason::new(ReasonCode::LayerViolation, format!("run ends in non-accepting state `{q}`"))
                            .layer(id)
                            .at(&last),
                    );
                    return;
                }
                (ComponentKind::Policy, format!("monitor run ends in accepting state `{q}`"))
            }
            LayerSpec::Temporal(t) => {
                if t.pattern == TemporalPattern::ResponseWithin {
                    if let Ok(FactAnswer::Obligations(open)) =
                        self.query(state, &Fact::Obligations(id.to_string()))
                    {
                        if let Some(o) = open.first() {
                            self.reject(
                                Some(layer),
                                Reason::new(
                                    ReasonCode::LayerViolation,
                                    format!("no response to `{}` by tick {}", o.event_id, o.deadline),
                                )
                                .layer(id)
                                .at(&last),
                            );
                            return;
                        }
                    }
                }
                let kind = if t.is_approval_gate() {
                    ComponentKind::Human
                } else {
                    ComponentKind::Policy
                };
                (kind, format!("{:?} obligation holds", t.pattern))
            }
            LayerSpec::Counter(c) => {
                let parts: Vec<String> = c
                    .counters
                    .iter()
                    .map(|def| {
                        let peak = peaks.get(&format!("{id}/{}", def.name)).copied().unwrap_or(0);
                        format!("{} peak {peak} <= {}", def.name, def.bound)
                    })
                    .collect();
                (ComponentKind::Risk, parts.join("; "))
            }
            LayerSpec::InfoFlow(f) => (
                ComponentKind::Auth,
                format!(
                    "accesses authorized{}{}",
                    if f.purpose_binding { "; purposes bound" } else { "" },
                    if f.release_constraints.is_empty() { "" } else { "; releases clear" }
                ),
            ),
        };
        self.layer_claims.insert(id.to_string(), claim);
    }

    /// Replays the trace on top of remembered counters; a budget that only
    /// breaks across sessions is still a breach.
    fn cross_session(&mut self, events: &[TraceEvent]) -> Option<MemoryState> {
        let m = self.memory;
        if m.counters.is_empty() && m.approvals.is_empty() && m.last_updated_tick == 0 {
            return None;
        }
        let mut state = self.memory.clone();
        state.reset_session(self.policy);
        for e in events {
            state = match state.update(self.policy, e) {
                Ok(s) => s,
                Err(err) => {
                    self.reject(
                        None,
                        Reason::new(ReasonCode::InvalidTrace, format!("trace predates memory: {err}"))
                            .at(&e.event_id),
                    );
                    return None;
                }
            };
            for layer in &self.policy.layers {
                let LayerSpec::Counter(c) = &layer.spec else { continue };
                if self.resolved.contains(&layer.layer_id) {
                    continue;
                }
                let keys: Vec<CounterKey> = state.counter_keys(&layer.layer_id).cloned().collect();
                for key in keys {
                    let Some(def) = c.counter(&key.counter) else { continue };
                    let fact = Fact::Count {
                        key: key.clone(),
                        window: def.window_ticks,
                        at: e.tick,
                    };
                    if let Ok(FactAnswer::Count(n)) = self.query(&state, &fact) {
                        if n > def.bound {
                            self.reject(
                                Some(layer),
                                Reason::new(
                                    ReasonCode::CrossSessionBudget,
                                    format!(
                                        "counter `{}` for {} reaches {n} with remembered usage, bound {}",
                                        def.name,
                                        key.scope_label(),
                                        def.bound
                                    ),
                                )
                                .layer(&layer.layer_id)
                                .at(&e.event_id),
                            );
                            break;
                        }
                    }
                }
            }
        }
        Some(state)
    }

    fn issued_tick(&self) -> Tick {
        self.trace.events.last().map_or(0, |e| e.tick)
    }

    fn approval_gates(&mut self, state: &MemoryState) {
        let subject = approval_subject_hash(self.trace);
        let tick = self.issued_tick();
        for layer in &self.policy.layers {
            let LayerSpec::Temporal(t) = &layer.spec else { continue };
            if !t.is_approval_gate() || self.resolved.contains(&layer.layer_id) {
                continue;
            }
            let gated = self
                .trace
                .events
                .iter()
                .any(|e| t.b.evaluate(e) == Match::Yes);
            if !gated {
                continue;
            }
            let id = layer.layer_id.as_str();
            let record = match self.query(state, &Fact::Approval(subject)) {
                Ok(FactAnswer::Approval(r)) => r,
                Ok(_) => None,
                Err(err) => {
                    self.escalate(
                        Some(layer),
                        Reason::new(ReasonCode::CapabilityDenied, err.to_string()).layer(id),
                    );
                    continue;
                }
            };
            let Some(rec) = record else {
                self.escalate(
                    Some(layer),
                    Reason::new(ReasonCode::StaleApproval, format!("no approval binds trace {subject}"))
                        .layer(id),
                );
                continue;
            };
            if rec.approver == self.trace.proposer_id {
                self.reject(
                    Some(layer),
                    Reason::new(ReasonCode::ApproverIsProposer, format!("`{}` approved its own proposal", rec.approver))
                        .layer(id)
                        .at(&rec.event_id),
                );
                continue;
            }
            if !rec.covers(tick) {
                self.escalate(
                    Some(layer),
                    Reason::new(
                        ReasonCode::StaleApproval,
                        format!(
                            "approval valid [{}, {}] does not cover tick {tick}",
                            rec.valid_from, rec.valid_until
                        ),
                    )
                    .layer(id)
                    .at(&rec.event_id),
                );
                continue;
            }
            let in_trace = self.trace.event(&rec.event_id).is_some();
            let claim = format!(
                "approved by `{}` for {subject}, valid [{}, {}]{}",
                rec.approver,
                rec.valid_from,
                rec.valid_until,
                if in_trace { "" } else { " (remembered)" }
            );
            self.layer_claims.insert(id.to_string(), (ComponentKind::Human, claim));
            if in_trace {
                let refs = self.layer_refs.entry(id.to_string()).or_default();
                if !refs.contains(&rec.event_id) {
                    refs.push(rec.event_id.clone());
                }
            }
        }
    }

    fn compute(&mut self, events: &[TraceEvent], state: &MemoryState) {
        let mut refs = Vec::new();
        let mut values: BTreeMap<&str, BigRational> = BTreeMap::new();
        for e in events.iter().filter(|e| e.kind == EventKind::Computation) {
            let expr = e.params.get("expr").and_then(|s| s.as_str());
            let claimed = e.value().and_then(scalar_value);
            let (Some(expr), Some(claimed)) = (expr, claimed) else {
                self.escalate(
                    None,
                    Reason::new(ReasonCode::ComputeUnverifiable, "computation lacks `expr` or numeric `value`")
                        .at(&e.event_id),
                );
                continue;
            };
            let cited = references(expr);
            if let Some(r) = cited.iter().find(|r| !e.evidence_refs.contains(r)) {
                self.reject(
                    None,
                    Reason::new(ReasonCode::ComputeMismatch, format!("expression uses `@{r}` without citing it"))
                        .at(&e.event_id),
                );
                continue;
            }
            let mut inputs = BTreeMap::new();
            let mut blocked = false;
            for r in &cited {
                match self.query(state, &Fact::Provenance(r.clone())) {
                    Ok(FactAnswer::Provenance(p)) => {
                        if let Some(v) = p.value.as_ref().and_then(scalar_value) {
                            inputs.insert(r.clone(), v);
                        }
                    }
                    Ok(_) | Err(MemoryError::UnknownFact(_)) => {}
                    Err(err) => {
                        self.escalate(
                            None,
                            Reason::new(ReasonCode::CapabilityDenied, err.to_string()).at(&e.event_id),
                        );
                        blocked = true;
                        break;
                    }
                }
            }
            if blocked {
                continue;
            }
            match eval_expr(expr, &|id| inputs.get(id).cloned()) {
                Ok(v) if v == claimed => {
                    values.insert(&e.event_id, v);
                    refs.push(e.event_id.clone());
                }
                Ok(v) => self.reject(
                    None,
                    Reason::new(
                        ReasonCode::ComputeMismatch,
                        format!("`{expr}` recomputes to {v}, claimed {claimed}"),
                    )
                    .at(&e.event_id),
                ),
                Err(err) => self.reject(
                    None,
                    Reason::new(ReasonCode::ComputeMismatch, err.to_string()).at(&e.event_id),
                ),
            }
        }
        for e in events.iter().filter(|e| e.kind == EventKind::Claim) {
            let Some(claimed) = e.value().and_then(scalar_value) else { continue };
            for r in &e.evidence_refs {
                if let Some(v) = values.get(r.as_str()) {
                    if *v != claimed {
                        self.reject(
                            None,
                            Reason::new(
                                ReasonCode::ComputeMismatch,
                                format!("claims {claimed} but `{r}` computed {v}"),
                            )
                            .at(&e.event_id),
                        );
                    } else {
                        refs.push(e.event_id.clone());
                    }
                }
            }
        }
        if !refs.is_empty() {
            refs.dedup();
            self.extra.push(
                CertificateComponent::new(ComponentKind::Compute, "computations replayed exactly").citing(refs),
            );
        }
    }

    fn sources(&mut self, events: &[TraceEvent]) {
        let retrievals: BTreeSet<&str> = events
            .iter()
            .filter(|e| e.kind == EventKind::Retrieval)
            .map(|e| e.event_id.as_str())
            .collect();
        let mut refs = BTreeSet::new();
        for e in events.iter().filter(|e| e.kind == EventKind::Claim) {
            for r in &e.evidence_refs {
                if retrievals.contains(r.as_str()) {
                    refs.insert(r.clone());
                    refs.insert(e.event_id.clone());
                }
            }
        }
        if !refs.is_empty() {
            self.extra.push(
                CertificateComponent::new(ComponentKind::Source, "claims cite retrieved sources").citing(refs),
            );
        }
    }

    fn finish(self) -> Verdict {
        if !self.rejections.is_empty() {
            return Verdict::Rejected {
                reasons: self.rejections,
            };
        }
        if !self.escalations.is_empty() {
            let required_tier = self
                .escalations
                .iter()
                .filter_map(|r| r.layer_id.as_deref())
                .filter_map(|id| self.policy.layer(id))
                .map(|l| l.tier)
                .fold(self.trace.declared_tier, Tier::max);
            return Verdict::Escalate {
                reasons: self.escalations,
                required_tier,
            };
        }
        let trace = self.trace;
        let issued_tick = self.issued_tick();
        let mut components = vec![
            CertificateComponent::new(
                ComponentKind::Id,
                format!("proposed by `{}`, certified by `{}`", trace.proposer_id, self.cfg.certifier_id),
            ),
            CertificateComponent::new(
                ComponentKind::Policy,
                format!("policy `{}` from `{}`, {} layers", self.policy.version, self.policy.source, self.policy.layers.len()),
            ),
        ];
        for layer in &self.policy.layers {
            let Some(refs) = self.layer_refs.get(&layer.layer_id) else { continue };
            let (kind, claim) = self
                .layer_claims
                .get(&layer.layer_id)
                .cloned()
                .unwrap_or((ComponentKind::Policy, "accepted".into()));
            let mut refs = refs.clone();
            refs.dedup();
            components.push(CertificateComponent::new(kind, claim).for_layer(&layer.layer_id).citing(refs));
        }
        components.extend(self.extra);
        let committed: BTreeMap<String, String> = trace
            .events
            .iter()
            .filter(|e| {
                e.data_class
                    .as_ref()
                    .is_some_and(|c| self.cfg.commit_data_classes.contains(c))
            })
            .map(|e| (e.event_id.clone(), commitment(e)))
            .collect();
        if !committed.is_empty() {
            let mut c = CertificateComponent::new(
                ComponentKind::Privacy,
                format!("{} payloads committed, not disclosed", committed.len()),
            );
            c.commitments = committed;
            components.push(c);
        }
        let mut lineage = format!(
            "policy `{}` effective from tick {}",
            self.policy.version, self.policy.effective_from
        );
        if let Ok(FactAnswer::LedgerHead(h)) = self
            .memory
            .query(&Fact::LedgerHead, self.cfg.memory_class, self.ledger)
        {
            lineage.push_str(&format!("; ledger head {h}"));
        }
        components.push(CertificateComponent::new(ComponentKind::Lineage, lineage));
        Verdict::Certified {
            certificate: Certificate::issue(
                canonical_hash(trace),
                &self.policy.version,
                &self.cfg.certifier_id,
                self.cfg.authority_tier,
                issued_tick,
                components,
                &self.cfg.mac_key,
            ),
        }
    }
}

/// Whether the event is relevant to the layer at all.
fn touches(layer: &PolicyLayer, e: &TraceEvent) -> bool {
    let hit = |m: Match| m != Match::No;
    match &layer.spec {
        LayerSpec::Monitor(m) => m.transitions.iter().any(|t| hit(t.on.evaluate(e))),
        LayerSpec::Counter(c) => c.updates.iter().any(|u| hit(u.on.evaluate(e))),
        LayerSpec::Temporal(t) => hit(t.a.evaluate(e)) || hit(t.b.evaluate(e)),
        LayerSpec::InfoFlow(f) => {
            e.data_class.is_some()
                || e.kind == EventKind::Release
                || (f.needs_provenance() && !e.evidence_refs.is_empty())
        }
    }
}

/// Whether a layer's verdict depends only on the sequence of event kinds.
fn kind_determined(layer: &PolicyLayer) -> bool {
    match &layer.spec {
        LayerSpec::Monitor(m) => m.transitions.iter().all(|t| t.on.is_kind_only()),
        LayerSpec::Counter(c) => {
            c.counters
                .iter()
                .all(|d| d.scope == CounterScope::Global && d.window_ticks.is_none())
                && c
                    .updates
                    .iter()
                    .all(|u| u.on.is_kind_only() && matches!(u.delta, Delta::Const(_)))
        }
        LayerSpec::Temporal(t) => {
            t.pattern != TemporalPattern::ResponseWithin
                && !t.is_approval_gate()
                && t.a.is_kind_only()
                && t.b.is_kind_only()
        }
        LayerSpec::InfoFlow(_) => false,
    }
}

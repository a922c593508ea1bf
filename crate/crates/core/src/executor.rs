//! Runs certified traces against a scripted environment, checking each event
//! for conformance before it takes effect.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certifier::{check_certificate, Certificate, MacKey};
use crate::ledger::{EntryDraft, Ledger, LedgerError, LedgerRecord};
use crate::policy::PolicySystem;
use crate::trace::{
    canonical_hash, Deviation, Outcome, ProposedTrace, RealizedTrace, Scalar, Tick, TraceEvent,
};

/// Ticks a certificate stays usable when the trace sets no `valid_until`.
pub const DEFAULT_VALIDITY_TICKS: Tick = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub event_id: String,
    /// Dotted path into the event, e.g. `params.amount` or `component`.
    pub field: String,
    pub value: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    /// component → event_id → value returned for that event's observation slot.
    #[serde(default)]
    pub tool_behaviors: BTreeMap<String, BTreeMap<String, Scalar>>,
    #[serde(default)]
    pub deviation_injections: Vec<Injection>,
    #[serde(default)]
    pub clock: Tick,
    /// Event ids whose effects reached the world, in order.
    #[serde(skip)]
    pub effects: Vec<String>,
}

impl Environment {
    pub fn respond(&mut self, component: &str, event_id: &str, value: Scalar) {
        self.tool_behaviors
            .entry(component.to_string())
            .or_default()
            .insert(event_id.to_string(), value);
    }

    pub fn inject(&mut self, event_id: &str, field: &str, value: serde_json::Value) {
        self.deviation_injections.push(Injection {
            event_id: event_id.to_string(),
            field: field.to_string(),
            value,
        });
    }

    fn response(&self, e: &TraceEvent) -> Option<&Scalar> {
        self.tool_behaviors.get(&e.component)?.get(&e.event_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutionResult {
    pub realized: RealizedTrace,
    pub halted_before: Option<String>,
    pub ledger_seq: u64,
}

impl ExecutionResult {
    pub fn exit_code(&self) -> i32 {
        outcome_exit_code(self.realized.outcome)
    }
}

pub fn outcome_exit_code(outcome: Outcome) -> i32 {
    match outcome {
        Outcome::Completed => 0,
        Outcome::Halted => 30,
        Outcome::RolledBack => 31,
        Outcome::Escalated => 32,
    }
}

#[derive(Debug, Error)]
pub enum ExecuteError {
    #[error("refused to execute: {reason} (ledger seq {ledger_seq})")]
    NoCertificate { reason: String, ledger_seq: u64 },
    #[error("certificate expired at tick {valid_until}, clock is {clock} (ledger seq {ledger_seq})")]
    StaleCertificate {
        valid_until: Tick,
        clock: Tick,
        ledger_seq: u64,
    },
    #[error("realized trace `{realized}` does not belong to proposed trace `{proposed}`")]
    TraceMismatch { realized: String, proposed: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl ExecuteError {
    /// Refusals share one exit code; other errors are operational failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExecuteError::NoCertificate { .. } | ExecuteError::StaleCertificate { .. } => 40,
            _ => 1,
        }
    }
}

/// Last tick at which `cert` may be acted on.
pub fn valid_until(trace: &ProposedTrace, cert: &Certificate) -> Tick {
    trace
        .execution_conditions
        .get("valid_until")
        .and_then(Scalar::as_int)
        .and_then(|t| Tick::try_from(t).ok())
        .unwrap_or(cert.issued_tick.saturating_add(DEFAULT_VALIDITY_TICKS))
}

pub fn execute(
    trace: &ProposedTrace,
    cert: Option<&Certificate>,
    policy: &PolicySystem,
    key: &MacKey,
    env: &mut Environment,
    ledger: &mut Ledger,
) -> Result<ExecutionResult, ExecuteError> {
    let trace_hash = canonical_hash(trace);
    let record = |ledger: &mut Ledger, record: LedgerRecord, tick: Tick| {
        ledger
            .append(EntryDraft::new(trace_hash, record, policy, tick))
            .map(|e| e.seq)
    };

    let cert = match cert {
        Some(c) if check_certificate(c, trace, policy, key) => c,
        Some(c) => {
            let reason = format!(
                "certificate does not verify: {}",
                crate::certifier::inspect_certificate(c, trace, policy, key)
                    .failures()
                    .join(", ")
            );
            let seq = record(ledger, LedgerRecord::Refusal { reason: reason.clone() }, env.clock)?;
            return Err(ExecuteError::NoCertificate { reason, ledger_seq: seq });
        }
        None => {
            let reason = "no certificate".to_string();
            let seq = record(ledger, LedgerRecord::Refusal { reason: reason.clone() }, env.clock)?;
            return Err(ExecuteError::NoCertificate { reason, ledger_seq: seq });
        }
    };

    let until = valid_until(trace, cert);
    if env.clock > until {
        let reason = format!("certificate expired at tick {until}, clock is {}", env.clock);
        let seq = record(ledger, LedgerRecord::Refusal { reason }, env.clock)?;
        return Err(ExecuteError::StaleCertificate {
            valid_until: until,
            clock: env.clock,
            ledger_seq: seq,
        });
    }

    let mut realized: Vec<TraceEvent> = Vec::with_capacity(trace.events.len());
    let mut deviations = Vec::new();
    let mut halted_before = None;
    for proposed in &trace.events {
        env.clock = env.clock.max(proposed.tick);
        let (candidate, mut found) = realize(proposed, env);
        found.extend(conform_event(&candidate, proposed));
        if !found.is_empty() {
            deviations = found;
            halted_before = Some(proposed.event_id.clone());
            break;
        }
        env.effects.push(candidate.event_id.clone());
        realized.push(candidate);
    }

    let outcome = match &halted_before {
        None => Outcome::Completed,
        Some(_) if realized.iter().any(|e| e.irreversible) => Outcome::RolledBack,
        Some(_) => Outcome::Halted,
    };
    if outcome == Outcome::RolledBack {
        for e in realized.iter().rev() {
            let action = if e.irreversible {
                format!("compensate {:?} on {}", e.kind, e.component)
            } else {
                format!("discard {:?} on {}", e.kind, e.component)
            };
            record(
                ledger,
                LedgerRecord::Compensation {
                    event_id: e.event_id.clone(),
                    action,
                },
                env.clock,
            )?;
        }
    }
    let ledger_seq = record(
        ledger,
        LedgerRecord::Execution {
            outcome,
            executed_events: realized.len(),
            deviations: deviations.clone(),
        },
        env.clock,
    )?;
    Ok(ExecutionResult {
        realized: RealizedTrace {
            trace_id: trace.trace_id.clone(),
            events: realized,
            outcome,
            deviation_log: deviations,
        },
        halted_before,
        ledger_seq,
    })
}

/// What the environment actually does for `proposed`: slot filled, injections applied.
fn realize(proposed: &TraceEvent, env: &Environment) -> (TraceEvent, Vec<Deviation>) {
    let mut e = proposed.clone();
    let mut problems = Vec::new();
    if let Some(c) = proposed.slot_constraint() {
        match env.response(proposed) {
            Some(v) => {
                e.params.insert(c.field.clone(), v.clone());
            }
            None => problems.push(Deviation {
                event_id: proposed.event_id.clone(),
                field: format!("params.{}", c.field),
                expected: c.to_string(),
                observed: "no response".into(),
            }),
        }
    }
    for inj in env
        .deviation_injections
        .iter()
        .filter(|i| i.event_id == proposed.event_id)
    {
        match apply_injection(&e, inj) {
            Some(changed) => e = changed,
            None => problems.push(Deviation {
                event_id: proposed.event_id.clone(),
                field: inj.field.clone(),
                expected: "a well-formed value".into(),
                observed: inj.value.to_string(),
            }),
        }
    }
    (e, problems)
}

fn apply_injection(e: &TraceEvent, inj: &Injection) -> Option<TraceEvent> {
    let mut doc = serde_json::to_value(e).ok()?;
    let mut parts = inj.field.split('.').peekable();
    let mut node = &mut doc;
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut()?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), inj.value.clone());
            break;
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    serde_json::from_value(doc).ok()
}

fn show<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("event fields serialize")
}

/// Field-by-field comparison of one realized event with its proposal.
pub fn conform_event(real: &TraceEvent, prop: &TraceEvent) -> Vec<Deviation> {
    let mut out = Vec::new();
    let mut check = |field: &str, expected: String, observed: String| {
        if expected != observed {
            out.push(Deviation {
                event_id: prop.event_id.clone(),
                field: field.to_string(),
                expected,
                observed,
            });
        }
    };
    check("event_id", show(&prop.event_id), show(&real.event_id));
    check("tick", show(&prop.tick), show(&real.tick));
    check("kind", show(&prop.kind), show(&real.kind));
    check("principal", show(&prop.principal), show(&real.principal));
    check("component", show(&prop.component), show(&real.component));
    check("resource", show(&prop.resource), show(&real.resource));
    check("data_class", show(&prop.data_class), show(&real.data_class));
    check("purpose", show(&prop.purpose), show(&real.purpose));
    check("quantity_deltas", show(&prop.quantity_deltas), show(&real.quantity_deltas));
    check("evidence_refs", show(&prop.evidence_refs), show(&real.evidence_refs));
    check("observation_slot", show(&prop.observation_slot), show(&real.observation_slot));
    check("irreversible", show(&prop.irreversible), show(&real.irreversible));

    let slot = prop.slot_constraint();
    let slot_field = slot.as_ref().map(|c| c.field.as_str());
    let keys: std::collections::BTreeSet<&String> =
        prop.params.keys().chain(real.params.keys()).collect();
    for k in keys {
        let field = format!("params.{k}");
        let (p, r) = (prop.params.get(k), real.params.get(k));
        if Some(k.as_str()) == slot_field {
            let c = slot.as_ref().expect("slot field implies constraint");
            match r {
                Some(v) if c.admits(v) => {}
                Some(v) => check(&field, c.to_string(), v.to_string()),
                None => check(&field, c.to_string(), "unfilled".into()),
            }
        } else {
            check(&field, show(&p), show(&r));
        }
    }
    out
}

/// Whole-trace conformance. Pure; ignores the recorded outcome.
pub fn conform(
    realized: &RealizedTrace,
    proposed: &ProposedTrace,
) -> Result<(bool, Vec<Deviation>), ExecuteError> {
    if realized.trace_id != proposed.trace_id {
        return Err(ExecuteError::TraceMismatch {
            realized: realized.trace_id.clone(),
            proposed: proposed.trace_id.clone(),
        });
    }
    let mut out = Vec::new();
    let n = realized.events.len().max(proposed.events.len());
    for i in 0..n {
        match (realized.events.get(i), proposed.events.get(i)) {
            (Some(r), Some(p)) => out.extend(conform_event(r, p)),
            (Some(r), None) => out.push(Deviation {
                event_id: r.event_id.clone(),
                field: "event".into(),
                expected: "end of trace".into(),
                observed: "extra event".into(),
            }),
            (None, Some(p)) => out.push(Deviation {
                event_id: p.event_id.clone(),
                field: "event".into(),
                expected: "event".into(),
                observed: "missing event".into(),
            }),
            (None, None) => unreachable!(),
        }
    }
    Ok((out.is_empty(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certifier::{certify, CertifierConfig};
    use crate::memory::{MemoryClass, MemoryState};
    use crate::policy::evaluate;
    use crate::trace::{EventKind, Tier};
    use serde_json::json;

    fn key() -> MacKey {
        MacKey::new(b"exec-key".to_vec())
    }

    fn payment_trace() -> ProposedTrace {
        ProposedTrace::new(
            "pay-1",
            "agent",
            Tier::C2,
            "budget-v1",
            vec![
                TraceEvent::new("q", 1, EventKind::ToolCall, "agent", "quotes")
                    .with_param("amount", Scalar::Int(150)),
                TraceEvent::new("px", 2, EventKind::Retrieval, "agent", "quotes")
                    .observing("price in [100, 200]"),
                TraceEvent::new("pay", 3, EventKind::ExecutionCall, "agent", "payments")
                    .with_param("amount", Scalar::Int(150))
                    .irreversible(),
                TraceEvent::new("note", 4, EventKind::ToolCall, "agent", "crm"),
            ],
        )
    }

    fn certified(trace: &ProposedTrace) -> (PolicySystem, Certificate) {
        let policy = crate::fixtures::query_budget_policy();
        let cfg = CertifierConfig::new("cert-A", Tier::C3, MemoryClass::M1Counter, key());
        let verdict = certify(trace, &policy, &MemoryState::new(&policy), &cfg).unwrap();
        (policy, verdict.certificate().expect("certified").clone())
    }

    fn env() -> Environment {
        let mut env = Environment::default();
        env.respond("quotes", "px", Scalar::Int(180));
        env
    }

    #[test]
    fn clean_run_completes_with_slots_filled() {
        let trace = payment_trace();
        let (policy, cert) = certified(&trace);
        let mut ledger = Ledger::in_memory();
        let mut env = env();
        let res = execute(&trace, Some(&cert), &policy, &key(), &mut env, &mut ledger).unwrap();
        assert_eq!(res.realized.outcome, Outcome::Completed);
        assert_eq!(res.halted_before, None);
        assert_eq!(res.realized.events[1].params["price"], Scalar::Int(180));
        assert_eq!(conform(&res.realized, &trace).unwrap(), (true, vec![]));
        assert!(evaluate(&policy, &res.realized).unwrap().permitted);
        res.realized.validate().unwrap();
        assert!(matches!(
            ledger.get(res.ledger_seq).unwrap().record,
            LedgerRecord::Execution { outcome: Outcome::Completed, executed_events: 4, .. }
        ));
    }

    #[test]
    fn injected_amount_halts_before_irreversible_event() {
        let trace = payment_trace();
        let (policy, cert) = certified(&trace);
        let mut ledger = Ledger::in_memory();
        let mut env = env();
        env.inject("pay", "params.amount", json!(9000));
        let res = execute(&trace, Some(&cert), &policy, &key(), &mut env, &mut ledger).unwrap();
        assert_eq!(res.realized.outcome, Outcome::Halted);
        assert_eq!(res.halted_before.as_deref(), Some("pay"));
        assert_eq!(res.realized.deviation_log.len(), 1);
        assert_eq!(res.realized.deviation_log[0].field, "params.amount");
        assert_eq!(env.effects, vec!["q", "px"]);
        assert_eq!(res.exit_code(), 30);
    }

    #[test]
    fn deviation_after_irreversible_event_rolls_back() {
        let trace = payment_trace();
        let (policy, cert) = certified(&trace);
        let mut ledger = Ledger::in_memory();
        let mut env = env();
        env.inject("note", "component", json!("email"));
        let res = execute(&trace, Some(&cert), &policy, &key(), &mut env, &mut ledger).unwrap();
        assert_eq!(res.realized.outcome, Outcome::RolledBack);
        let comps: Vec<&str> = ledger
            .entries()
            .iter()
            .filter_map(|e| match &e.record {
                LedgerRecord::Compensation { event_id, .. } => Some(event_id.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(comps, vec!["pay", "px", "q"]);
        assert_eq!(res.exit_code(), 31);
    }

    #[test]
    fn slot_outside_constraint_is_a_deviation() {
        let trace = payment_trace();
        let (policy, cert) = certified(&trace);
        let mut ledger = Ledger::in_memory();
        let mut env = Environment::default();
        env.respond("quotes", "px", Scalar::Int(250));
        let res = execute(&trace, Some(&cert), &policy, &key(), &mut env, &mut ledger).unwrap();
        assert_eq!(res.realized.outcome, Outcome::Halted);
        assert_eq!(res.halted_before.as_deref(), Some("px"));
        assert_eq!(res.realized.deviation_log[0].field, "params.price");
        assert_eq!(res.realized.deviation_log[0].observed, "250");

        let mut env = Environment::default();
        let res = execute(&trace, Some(&cert), &policy, &key(), &mut env, &mut ledger).unwrap();
        assert_eq!(res.realized.deviation_log[0].observed, "no response");
    }

    #[test]
    fn refuses_without_valid_certificate() {
        let trace = payment_trace();
        let (policy, cert) = certified(&trace);
        let mut ledger = Ledger::in_memory();
        let mut env = env();
        let err = execute(&trace, None, &policy, &key(), &mut env, &mut ledger).unwrap_err();
        assert_eq!(err.exit_code(), 40);
        assert!(env.effects.is_empty());
        assert!(matches!(ledger.entries()[0].record, LedgerRecord::Refusal { .. }));

        let mut forged = cert.clone();
        forged.issued_tick += 1;
        let err = execute(&trace, Some(&forged), &policy, &key(), &mut env, &mut ledger).unwrap_err();
        assert!(matches!(err, ExecuteError::NoCertificate { ref reason, .. } if reason.contains("mac")));

        let wrong_key = MacKey::new(b"other".to_vec());
        assert!(execute(&trace, Some(&cert), &policy, &wrong_key, &mut env, &mut ledger).is_err());
        assert!(env.effects.is_empty());
    }

    #[test]
    fn stale_certificate_is_refused() {
        let trace = payment_trace();
        let (policy, cert) = certified(&trace);
        let mut ledger = Ledger::in_memory();
        let mut env = env();
        env.clock = cert.issued_tick + DEFAULT_VALIDITY_TICKS + 1;
        let err = execute(&trace, Some(&cert), &policy, &key(), &mut env, &mut ledger).unwrap_err();
        assert!(matches!(err, ExecuteError::StaleCertificate { valid_until: 54, .. }));
        env.clock = cert.issued_tick + DEFAULT_VALIDITY_TICKS;
        assert!(execute(&trace, Some(&cert), &policy, &key(), &mut env, &mut ledger).is_ok());
    }

    #[test]
    fn conform_structural_cases() {
        let trace = payment_trace();
        let mut events = trace.events.clone();
        events[1].params.insert("price".into(), Scalar::Int(120));
        let mut realized = RealizedTrace {
            trace_id: trace.trace_id.clone(),
            events,
            outcome: Outcome::Completed,
            deviation_log: vec![],
        };
        assert!(conform(&realized, &trace).unwrap().0);

        realized.events.push(TraceEvent::new("extra", 9, EventKind::ToolCall, "agent", "crm"));
        let (ok, devs) = conform(&realized, &trace).unwrap();
        assert!(!ok);
        assert_eq!(devs[0].observed, "extra event");

        realized.events.pop();
        realized.events[1].params.insert("price".into(), Scalar::Int(250));
        let (ok, devs) = conform(&realized, &trace).unwrap();
        assert!(!ok);
        assert_eq!(devs[0].field, "params.price");

        realized.trace_id = "other".into();
        assert!(matches!(conform(&realized, &trace), Err(ExecuteError::TraceMismatch { .. })));
    }
}

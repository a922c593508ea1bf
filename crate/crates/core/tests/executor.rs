mod common;

use proptest::prelude::*;
use serde_json::json;

use certgate_core::certifier::{certify, Certificate, Verdict};
use certgate_core::executor::{conform, execute, Environment, ExecuteError};
use certgate_core::ledger::{Ledger, LedgerRecord};
use certgate_core::memory::{MemoryClass, MemoryState};
use certgate_core::policy::{evaluate, PolicySystem};
use certgate_core::trace::{EventKind, Outcome, ProposedTrace, Scalar, Tier, TraceEvent};

use common::*;

fn certified(t: &ProposedTrace, p: &PolicySystem) -> Option<Certificate> {
    match certify(t, p, &MemoryState::new(p), &certifier(MemoryClass::M2Provenance)).unwrap() {
        Verdict::Certified { certificate } => Some(certificate),
        _ => None,
    }
}

fn injection() -> impl Strategy<Value = (String, serde_json::Value)> {
    prop_oneof![
        Just(("component".to_string(), json!("rogue"))),
        Just(("principal".to_string(), json!("agent"))),
        (0i64..150).prop_map(|v| ("params.value".to_string(), json!(v))),
        (0i64..1200).prop_map(|v| ("quantity_deltas.exposure".to_string(), json!(v))),
        Just(("tick".to_string(), json!("soon"))),
    ]
}

/// Scripted responses for every slot (values sometimes outside the declared
/// range) plus a few field injections.
fn environment(t: &ProposedTrace) -> impl Strategy<Value = Environment> {
    let slots: Vec<TraceEvent> = t.events.iter().filter(|e| e.observation_slot).cloned().collect();
    let ids: Vec<String> = t.events.iter().map(|e| e.event_id.clone()).collect();
    (
        prop::collection::vec(prop::option::weighted(0.9, 0i64..120), slots.len()),
        prop::collection::vec((prop::sample::select(ids), injection()), 0..2),
    )
        .prop_map(move |(values, injections)| {
            let mut env = Environment::default();
            for (e, v) in slots.iter().zip(values) {
                if let Some(v) = v {
                    env.respond(&e.component, &e.event_id, Scalar::Int(v));
                }
            }
            for (id, (field, value)) in injections {
                env.inject(&id, &field, value);
            }
            env
        })
}

fn case() -> impl Strategy<Value = (ProposedTrace, PolicySystem, Environment)> {
    (traces(6), policies()).prop_flat_map(|(t, p)| {
        let env = environment(&t);
        (Just(t), Just(p), env)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn execution_respects_the_certificate((t, p, mut env) in case()) {
        let Some(cert) = certified(&t, &p) else { return Ok(()) };
        let mut ledger = Ledger::in_memory();
        let r = execute(&t, Some(&cert), &p, &key(), &mut env, &mut ledger).unwrap();
        let realized = &r.realized;
        prop_assert!(realized.validate().is_ok());

        // Only conforming events reach the world, in proposal order.
        let (ok, _) = conform(realized, &t).unwrap();
        let ids: Vec<_> = realized.events.iter().map(|e| e.event_id.clone()).collect();
        prop_assert_eq!(&env.effects, &ids);
        prop_assert_eq!(ok, realized.outcome == Outcome::Completed);
        for (real, prop) in realized.events.iter().zip(&t.events) {
            prop_assert_eq!(&real.event_id, &prop.event_id);
            prop_assert_eq!(real.irreversible, prop.irreversible);
        }

        match realized.outcome {
            Outcome::Completed => {
                prop_assert_eq!(realized.events.len(), t.len());
                prop_assert!(evaluate(&p, realized).unwrap().permitted);
            }
            Outcome::Halted => {
                prop_assert!(realized.events.iter().all(|e| !e.irreversible));
                prop_assert!(!realized.deviation_log.is_empty());
            }
            Outcome::RolledBack => {
                prop_assert!(realized.events.iter().any(|e| e.irreversible));
                let compensated: Vec<_> = ledger
                    .entries()
                    .iter()
                    .filter_map(|e| match &e.record {
                        LedgerRecord::Compensation { event_id, .. } => Some(event_id.clone()),
                        _ => None,
                    })
                    .collect();
                let mut expected = ids.clone();
                expected.reverse();
                prop_assert_eq!(compensated, expected);
            }
            Outcome::Escalated => prop_assert!(false, "executor never escalates on its own"),
        }
        prop_assert_eq!(r.ledger_seq as usize, ledger.len() - 1);
        prop_assert!(ledger.verify_chain().intact);
    }

    #[test]
    fn uncertified_traces_never_run((t, p, mut env) in case()) {
        let mut ledger = Ledger::in_memory();
        let err = execute(&t, None, &p, &key(), &mut env, &mut ledger).unwrap_err();
        let refused = matches!(err, ExecuteError::NoCertificate { .. });
        prop_assert!(refused);
        prop_assert!(env.effects.is_empty());
        prop_assert_eq!(err.exit_code(), 40);
    }
}

fn payment_trace() -> (ProposedTrace, PolicySystem) {
    let p = certgate_core::fixtures::exposure_policy();
    let mut t = ProposedTrace::new(
        "pay",
        "agent",
        Tier::C2,
        &p.version,
        vec![
            TraceEvent::new("quote", 1, EventKind::Retrieval, "agent", "market_data").observing("price in [90, 110]"),
            TraceEvent::new("buy", 2, EventKind::ExecutionCall, "agent", "broker")
                .with_delta("exposure", 500)
                .irreversible(),
            TraceEvent::new("note", 3, EventKind::MemoryWrite, "agent", "journal"),
        ],
    );
    t.task = "buy on quote".into();
    (t, p)
}

#[test]
fn completes_when_the_world_conforms() {
    let (t, p) = payment_trace();
    let cert = certified(&t, &p).expect("payment trace certifies");
    let mut env = Environment::default();
    env.respond("market_data", "quote", Scalar::Int(100));
    let mut ledger = Ledger::in_memory();
    let r = execute(&t, Some(&cert), &p, &key(), &mut env, &mut ledger).unwrap();
    assert_eq!(r.realized.outcome, Outcome::Completed);
    assert_eq!(r.exit_code(), 0);
    assert_eq!(r.realized.events[0].params["price"], Scalar::Int(100));
}

#[test]
fn halts_before_anything_irreversible() {
    let (t, p) = payment_trace();
    let cert = certified(&t, &p).unwrap();
    let mut env = Environment::default();
    env.respond("market_data", "quote", Scalar::Int(130));
    let mut ledger = Ledger::in_memory();
    let r = execute(&t, Some(&cert), &p, &key(), &mut env, &mut ledger).unwrap();
    assert_eq!(r.realized.outcome, Outcome::Halted);
    assert_eq!(r.halted_before.as_deref(), Some("quote"));
    assert!(env.effects.is_empty());
    assert_eq!(r.exit_code(), 30);
}

#[test]
fn rolls_back_after_an_irreversible_step() {
    let (t, p) = payment_trace();
    let cert = certified(&t, &p).unwrap();
    let mut env = Environment::default();
    env.respond("market_data", "quote", Scalar::Int(95));
    env.inject("note", "component", json!("public_blog"));
    let mut ledger = Ledger::in_memory();
    let r = execute(&t, Some(&cert), &p, &key(), &mut env, &mut ledger).unwrap();
    assert_eq!(r.realized.outcome, Outcome::RolledBack);
    assert_eq!(r.exit_code(), 31);
    assert_eq!(r.realized.deviation_log[0].field, "component");
    assert_eq!(env.effects, ["quote", "buy"]);
}

#[test]
fn stale_and_forged_certificates_are_refused() {
    let (t, p) = payment_trace();
    let cert = certified(&t, &p).unwrap();
    let mut ledger = Ledger::in_memory();

    let mut late = Environment { clock: 500, ..Default::default() };
    let err = execute(&t, Some(&cert), &p, &key(), &mut late, &mut ledger).unwrap_err();
    assert!(matches!(err, ExecuteError::StaleCertificate { valid_until: 53, clock: 500, .. }));

    let mut forged = cert.clone();
    forged.certifier_tier = Tier::C0;
    let err = execute(&t, Some(&forged), &p, &key(), &mut Environment::default(), &mut ledger).unwrap_err();
    assert!(matches!(err, ExecuteError::NoCertificate { ref reason, .. } if reason.contains("mac does not verify")));
    assert_eq!(ledger.len(), 2);
    assert!(ledger
        .entries()
        .iter()
        .all(|e| matches!(e.record, LedgerRecord::Refusal { .. })));
}

use certgate_core::certifier::{certify, CertifierConfig, MacKey};
use certgate_core::fixtures::*;
use certgate_core::memory::{MemoryClass, MemoryState};
use certgate_core::policy::{evaluate, lint_policy};
use certgate_core::trace::{canonical_hash, EventKind, ProposedTrace, Scalar, Tier, TraceEvent};
use sha2::{Digest as _, Sha256};

/// SHA-256 of the fixture's canonical bytes, computed outside this crate by
/// re-serializing the file with struct field order and sorted maps.
const EXPOSURE_TRACE_DIGEST: &str = "a38dfc250e076a94f587363ba248c45f34c9bbf527f3ff8d11397d2e9a7cc176";

#[test]
fn exposure_trace_digest_is_pinned() {
    let t = exposure_orders_trace();
    assert_eq!(canonical_hash(&t).to_hex(), EXPOSURE_TRACE_DIGEST);
    assert_eq!(hex::encode(Sha256::digest(t.canonical_bytes())), EXPOSURE_TRACE_DIGEST);
}

#[test]
fn bundled_policies_lint_clean() {
    for (name, text) in [
        ("query_budget", QUERY_BUDGET_POLICY),
        ("exposure", EXPOSURE_POLICY),
        ("finance_layered", FINANCE_LAYERED_POLICY),
    ] {
        let report = lint_policy(text.as_bytes());
        assert!(report.ok(), "{name}: {report:?}");
    }
}

#[test]
fn exposure_breach_is_at_the_third_order() {
    let v = evaluate(&exposure_policy(), &exposure_orders_trace()).unwrap();
    assert!(!v.permitted);
    let bad = v.rejecting_layers().next().unwrap();
    assert_eq!(bad.violation.as_ref().unwrap().event_id.as_deref(), Some("o3"));
}

fn finance(events: Vec<TraceEvent>) -> ProposedTrace {
    ProposedTrace::new("fin", "desk-agent", Tier::C2, "finance-v1", events)
}

/// Sourced claim, a small buy, then a payment with no approval before it.
fn unapproved_payment() -> ProposedTrace {
    finance(vec![
        TraceEvent::new("r1", 1, EventKind::Retrieval, "desk-agent", "filings")
            .with_data_class("financials")
            .with_purpose("analysis")
            .with_param("value", Scalar::Int(1200)),
        TraceEvent::new("cl", 2, EventKind::Claim, "desk-agent", "report")
            .with_purpose("analysis")
            .with_evidence(["r1"]),
        TraceEvent::new("buy", 3, EventKind::ExecutionCall, "desk-agent", "broker")
            .with_delta("exposure", 500)
            .irreversible(),
        TraceEvent::new("pay", 4, EventKind::ExecutionCall, "desk-agent", "payments")
            .with_param("amount", Scalar::bp(50_000))
            .irreversible(),
    ])
}

#[test]
fn finance_trace_fails_only_the_temporal_layer() {
    let p = finance_layered_policy();
    let v = evaluate(&p, &unapproved_payment()).unwrap();
    let failing: Vec<_> = v.rejecting_layers().map(|l| l.layer_id.as_str()).collect();
    assert_eq!(failing, ["payment_approval"]);
    assert_eq!(v.per_layer.len(), p.layers.len());
}

#[test]
fn finance_certifier_names_the_missing_approval() {
    let p = finance_layered_policy();
    let cfg = CertifierConfig::new("risk-desk", Tier::C4, MemoryClass::M2Provenance, MacKey::new(b"k".to_vec()));
    let v = certify(&unapproved_payment(), &p, &MemoryState::new(&p), &cfg).unwrap();
    assert!(!v.is_certified());
    let layers: Vec<_> = v.reasons().iter().filter_map(|r| r.layer_id.as_deref()).collect();
    assert_eq!(layers, ["payment_approval"], "{:?}", v.reasons());
}

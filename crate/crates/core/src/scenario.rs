//! End-to-end scenarios. Each wires the modules together and compares the
//! results against machine-checkable expectations.

use std::collections::BTreeSet;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::boundary::{drift_eval, exact_measures, ratio_string, GeneratorSpec, Mode, Prob};
use crate::certifier::{
    certify, certify_with_ledger, check_certificate, inspect_certificate, CertifierConfig, ComponentKind, MacKey,
    ObservationMask, ReasonCode, Verdict,
};
use crate::executor::{execute, Environment, ExecuteError};
use crate::fixtures;
use crate::ledger::{recertify, EntryDraft, Ledger, LedgerRecord, MemoryTraceStore};
use crate::memory::{MemoryClass, MemoryState};
use crate::policy::{evaluate, LayerSpec, PolicySystem};
use crate::trace::{approval_subject_hash, canonical_hash, EventKind, ProposedTrace, Scalar, Tier, TraceEvent};

pub const SCENARIOS: [&str; 13] = [
    "query_budget",
    "impermissible_strategy",
    "optimality_without_permissibility",
    "exposure_noncompositional",
    "wrong_derivation",
    "escalation",
    "proof_carrying_trade",
    "persistent_memory_drift",
    "self_approval",
    "stale_approval",
    "tool_deviation",
    "guardrail_baseline",
    "certificate_laundering",
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`; known: {list}", list = SCENARIOS.join(", "))]
    UnknownScenario(String),
    #[error("scenario `{name}` failed to run: {message}")]
    Internal { name: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub check: String,
    pub expected: Value,
    pub actual: Value,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub description: String,
    /// Invented fixture demonstrating a category, not a worked number.
    pub illustrative: bool,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

struct Run {
    report: ScenarioReport,
}

impl Run {
    fn new(name: &str, description: &str) -> Self {
        Run {
            report: ScenarioReport {
                name: name.to_string(),
                description: description.to_string(),
                illustrative: false,
                passed: true,
                checks: Vec::new(),
            },
        }
    }

    fn check(&mut self, name: &str, expected: impl Serialize, actual: impl Serialize) {
        let expected = serde_json::to_value(expected).expect("expectation serializes");
        let actual = serde_json::to_value(actual).expect("result serializes");
        let pass = expected == actual;
        self.report.passed &= pass;
        self.report.checks.push(Check {
            check: name.to_string(),
            expected,
            actual,
            pass,
        });
    }

    fn finish(self) -> ScenarioReport {
        self.report
    }
}

type Outcome = Result<ScenarioReport, String>;

pub fn run_scenario(name: &str, key: &MacKey) -> Result<ScenarioReport, ScenarioError> {
    let f: fn(&MacKey) -> Outcome = match name {
        "query_budget" => query_budget,
        "impermissible_strategy" => impermissible_strategy,
        "optimality_without_permissibility" => optimality_without_permissibility,
        "exposure_noncompositional" => exposure_noncompositional,
        "wrong_derivation" => wrong_derivation,
        "escalation" => escalation,
        "proof_carrying_trade" => proof_carrying_trade,
        "persistent_memory_drift" => persistent_memory_drift,
        "self_approval" => self_approval,
        "stale_approval" => stale_approval,
        "tool_deviation" => tool_deviation,
        "guardrail_baseline" => guardrail_baseline,
        "certificate_laundering" => certificate_laundering,
        other => return Err(ScenarioError::UnknownScenario(other.to_string())),
    };
    f(key).map_err(|message| ScenarioError::Internal {
        name: name.to_string(),
        message,
    })
}

pub fn run_all(key: &MacKey) -> Result<Vec<ScenarioReport>, ScenarioError> {
    SCENARIOS.iter().map(|n| run_scenario(n, key)).collect()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn sound(key: &MacKey) -> CertifierConfig {
    CertifierConfig::new("certifier-1", Tier::C5, MemoryClass::M2Provenance, key.clone())
}

fn run(trace: &ProposedTrace, policy: &PolicySystem, cfg: &CertifierConfig) -> Result<Verdict, String> {
    certify(trace, policy, &MemoryState::new(policy), cfg).map_err(err)
}

fn permitted(trace: &ProposedTrace, policy: &PolicySystem) -> Result<bool, String> {
    Ok(evaluate(policy, trace).map_err(err)?.permitted)
}

fn codes(v: &Verdict) -> Vec<ReasonCode> {
    v.reasons().iter().map(|r| r.code).collect::<BTreeSet<_>>().into_iter().collect()
}

fn kinds(v: &Verdict) -> Vec<ComponentKind> {
    v.certificate().map(|c| c.kinds().into_iter().collect()).unwrap_or_default()
}

fn policy_from(v: Value) -> Result<PolicySystem, String> {
    let p: PolicySystem = serde_json::from_value(v).map_err(err)?;
    p.validate().map_err(err)?;
    Ok(p)
}

/// Each event judged alone, as an action-level filter would.
fn locally_permitted(trace: &ProposedTrace, policy: &PolicySystem) -> Result<Vec<bool>, String> {
    trace
        .events
        .iter()
        .map(|e| {
            let single = ProposedTrace::new(
                format!("{}-{}", trace.trace_id, e.event_id),
                trace.proposer_id.clone(),
                trace.declared_tier,
                trace.requested_policy_version.clone(),
                vec![e.clone()],
            );
            permitted(&single, policy)
        })
        .collect()
}

fn queries(policy: &PolicySystem, n: usize, resource: &str) -> ProposedTrace {
    ProposedTrace::new(
        format!("queries-{n}-{resource}"),
        "agent",
        Tier::C2,
        policy.version.clone(),
        (1..=n)
            .map(|i| {
                TraceEvent::new(format!("q{i}"), i as u64, EventKind::Query, "agent", "search").with_resource(resource)
            })
            .collect(),
    )
}

fn payment(approver: &str, valid_until: Option<i64>, pay_tick: u64, binds: Option<String>) -> ProposedTrace {
    let pay = TraceEvent::new("pay", pay_tick, EventKind::ExecutionCall, "agent", "payments")
        .with_param("amount", Scalar::bp(50_000))
        .irreversible();
    let mut t = ProposedTrace::new("payment", "agent", Tier::C4, "finance-v1", vec![pay]);
    let subject = binds.unwrap_or_else(|| approval_subject_hash(&t).to_hex());
    let mut ap = TraceEvent::new("ap", 0, EventKind::Approval, approver, "desk").with_param("binds", Scalar::str(subject));
    if let Some(until) = valid_until {
        ap = ap.with_param("valid_until", Scalar::Int(until));
    }
    t.events.insert(0, ap);
    t
}

fn sourced_claim(source: &str, claimed: i64) -> ProposedTrace {
    let retrieval = |id: &str, tick: u64, component: &str, value: i64| {
        TraceEvent::new(id, tick, EventKind::Retrieval, "analyst", component)
            .with_data_class("financials")
            .with_purpose("analysis")
            .with_param("value", Scalar::Int(value))
    };
    ProposedTrace::new(
        format!("margin-claim-{claimed}"),
        "analyst",
        Tier::C3,
        "finance-v1",
        vec![
            retrieval("rev", 1, source, 1200),
            retrieval("cost", 2, "filings", 1159),
            TraceEvent::new("margin", 3, EventKind::Computation, "analyst", "calc")
                .with_purpose("analysis")
                .with_param("expr", Scalar::str("@rev - @cost"))
                .with_param("value", Scalar::Int(claimed))
                .with_evidence(["rev", "cost"]),
            TraceEvent::new("claim", 4, EventKind::Claim, "analyst", "report")
                .with_purpose("analysis")
                .with_param("value", Scalar::Int(claimed))
                .with_evidence(["margin"]),
        ],
    )
}

fn query_budget(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "query_budget",
        "Six queries, each allowed on its own, exceed a budget of five per principal and resource.",
    );
    let policy = fixtures::query_budget_policy();
    let cfg = sound(key);
    let six = queries(&policy, 6, "R1");
    r.check("locally_permitted", vec![true; 6], locally_permitted(&six, &policy)?);
    let up_to_five: Vec<&str> = (1..=5)
        .map(|n| run(&queries(&policy, n, "R1"), &policy, &cfg).map(|v| v.label()))
        .collect::<Result<_, _>>()?;
    r.check("verdicts_for_1_to_5_queries", vec!["certified"; 5], up_to_five);
    let oracle = evaluate(&policy, &six).map_err(err)?;
    let violation = oracle.per_layer[0].violation.as_ref().and_then(|v| v.event_id.clone());
    r.check("oracle_permits_six", false, oracle.permitted);
    r.check("oracle_violation_at", Some("q6"), violation);
    let v = run(&six, &policy, &cfg)?;
    r.check("six_query_verdict", "rejected", v.label());
    r.check("six_query_reasons", vec![ReasonCode::LayerViolation], codes(&v));
    r.check(
        "reported_count",
        true,
        v.reasons().iter().any(|x| x.detail.contains("reaches 6, bound 5")),
    );
    Ok(r.finish())
}

fn spoofing_policy() -> Result<PolicySystem, String> {
    let place = json!({ "kinds": ["ToolCall"], "component": "orders", "params": { "action": { "eq": "place_large" } } });
    let cancel = json!({ "kinds": ["ToolCall"], "component": "orders", "params": { "action": { "eq": "cancel" } } });
    policy_from(json!({
        "version": "conduct-v1",
        "source": "market-conduct",
        "effective_from": 0,
        "layers": [{
            "layer_id": "no_spoofing",
            "kind": "Monitor",
            "tier": "C3",
            "description": "A large resting order may not be cancelled and followed by a trade on the other side.",
            "spec": {
                "states": ["clean", "resting", "spoofed"],
                "initial": "clean",
                "accepting": ["clean", "resting"],
                "transitions": [
                    { "from": "clean", "on": place, "to": "resting" },
                    { "from": "resting", "on": cancel, "to": "spoofed" },
                    { "from": "resting", "on": { "kinds": ["ExecutionCall"] }, "to": "clean" }
                ],
                "defaults": { "clean": "SelfLoop", "resting": "SelfLoop", "spoofed": "Reject" }
            }
        }]
    }))
}

fn order(id: &str, tick: u64, action: &str) -> TraceEvent {
    TraceEvent::new(id, tick, EventKind::ToolCall, "trader", "orders")
        .with_resource("ACME")
        .with_param("action", Scalar::str(action))
}

fn impermissible_strategy(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "impermissible_strategy",
        "A place-cancel-trade pattern is rejected by a monitor even though every step is an ordinary order action.",
    );
    let policy = spoofing_policy()?;
    let cfg = sound(key);
    let fill = |tick| {
        TraceEvent::new("fill", tick, EventKind::ExecutionCall, "trader", "broker")
            .with_resource("ACME")
            .irreversible()
    };
    let spoof = ProposedTrace::new(
        "spoof",
        "trader",
        Tier::C3,
        "conduct-v1",
        vec![order("big", 1, "place_large"), order("pull", 2, "cancel"), fill(3)],
    );
    let honest = ProposedTrace::new(
        "honest",
        "trader",
        Tier::C3,
        "conduct-v1",
        vec![order("big", 1, "place_large"), fill(2)],
    );
    r.check("spoof_steps_locally_permitted", vec![true; 3], locally_permitted(&spoof, &policy)?);
    r.check("oracle_permits_spoof", false, permitted(&spoof, &policy)?);
    let v = run(&spoof, &policy, &cfg)?;
    r.check("spoof_verdict", "rejected", v.label());
    let layers: BTreeSet<_> = v.reasons().iter().filter_map(|x| x.layer_id.clone()).collect();
    r.check("spoof_rejecting_layers", vec!["no_spoofing"], layers);
    r.check("honest_verdict", "certified", run(&honest, &policy, &cfg)?.label());
    Ok(r.finish())
}

fn optimality_without_permissibility(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "optimality_without_permissibility",
        "The strategy with the best objective breaches an issuer concentration limit; the best certified strategy is selected instead.",
    );
    r.report.illustrative = true;
    let policy = policy_from(json!({
        "version": "concentration-v1",
        "source": "risk-committee",
        "effective_from": 0,
        "layers": [{
            "layer_id": "issuer_concentration",
            "kind": "Counter",
            "tier": "C3",
            "description": "Exposure to any single issuer stays at or below 2500 bp.",
            "spec": {
                "counters": [{ "name": "issuer_bp", "window_ticks": null, "bound": 2500, "scope": "per_principal_resource" }],
                "updates": [{ "on": { "kinds": ["ExecutionCall"] }, "counter": "issuer_bp", "delta": { "quantity": "exposure" } }]
            }
        }]
    }))?;
    let cfg = sound(key);
    let buy = |id: &str, tick, issuer: &str, ret_bp| {
        TraceEvent::new(id, tick, EventKind::ExecutionCall, "pm", "broker")
            .with_resource(issuer)
            .with_delta("exposure", 2000)
            .with_param("expected_return", Scalar::bp(ret_bp))
            .irreversible()
    };
    let strategies = [
        ProposedTrace::new(
            "concentrated",
            "pm",
            Tier::C3,
            "concentration-v1",
            vec![buy("b1", 1, "ACME", 450), buy("b2", 2, "ACME", 450)],
        ),
        ProposedTrace::new(
            "diversified",
            "pm",
            Tier::C3,
            "concentration-v1",
            vec![buy("b1", 1, "ACME", 450), buy("b2", 2, "BETA", 150)],
        ),
    ];
    let objective = |t: &ProposedTrace| -> i64 {
        t.events
            .iter()
            .filter_map(|e| match e.params.get("expected_return") {
                Some(Scalar::Decimal { bp }) => Some(*bp),
                _ => None,
            })
            .sum()
    };
    let scores: Vec<i64> = strategies.iter().map(objective).collect();
    r.check("objective_bp", vec![900, 600], &scores);
    let best = strategies.iter().max_by_key(|t| objective(t)).expect("two strategies");
    r.check("argmax_strategy", "concentrated", &best.trace_id);
    let verdicts: Vec<&str> = strategies
        .iter()
        .map(|t| run(t, &policy, &cfg).map(|v| v.label()))
        .collect::<Result<_, _>>()?;
    r.check("verdicts", vec!["rejected", "certified"], verdicts);
    let mut selected = None;
    for t in &strategies {
        if run(t, &policy, &cfg)?.is_certified() && selected.is_none_or(|s: &ProposedTrace| objective(t) > objective(s)) {
            selected = Some(t);
        }
    }
    r.check("selected_for_execution", Some("diversified"), selected.map(|t| t.trace_id.as_str()));
    Ok(r.finish())
}

/// Largest single order an action-level check allows, in bp.
const SINGLE_ORDER_LIMIT_BP: i64 = 1000;

fn exposure_noncompositional(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "exposure_noncompositional",
        "Three 1000 bp orders each pass a single-order check; together they reach 3000 bp against a 2000 bp limit.",
    );
    let policy = fixtures::exposure_policy();
    let trace = fixtures::exposure_orders_trace();
    let cfg = sound(key);
    let sizes: Vec<i64> = trace.events.iter().map(|e| e.quantity_deltas["exposure"]).collect();
    r.check(
        "orders_within_single_order_limit",
        vec![true; 3],
        sizes.iter().map(|s| *s <= SINGLE_ORDER_LIMIT_BP).collect::<Vec<_>>(),
    );
    r.check("orders_locally_permitted", vec![true; 3], locally_permitted(&trace, &policy)?);
    let cumulative: Vec<i64> = sizes
        .iter()
        .scan(0, |acc, s| {
            *acc += s;
            Some(*acc)
        })
        .collect();
    r.check("cumulative_bp", vec![1000, 2000, 3000], cumulative);
    let oracle = evaluate(&policy, &trace).map_err(err)?;
    r.check(
        "oracle_violation_at",
        Some("o3"),
        oracle.per_layer[0].violation.as_ref().and_then(|v| v.event_id.as_deref()),
    );
    let v = run(&trace, &policy, &cfg)?;
    r.check("trace_verdict", "rejected", v.label());
    r.check(
        "rejection_cites_3000_bp",
        true,
        v.reasons().iter().any(|x| x.detail.contains("3000") && x.event_id.as_deref() == Some("o3")),
    );
    let two = crate::trace::prefix(&trace, 2).map_err(err)?;
    r.check("two_order_prefix", "certified", run(&two, &policy, &cfg)?.label());
    Ok(r.finish())
}

fn wrong_derivation(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "wrong_derivation",
        "A claim of 42 rests on a computation that replays to 41 and is rejected; the correct claim is certified.",
    );
    let policy = fixtures::finance_layered_policy();
    let cfg = sound(key);
    let wrong = sourced_claim("filings", 42);
    let right = sourced_claim("filings", 41);
    r.check("oracle_permits_wrong_claim", true, permitted(&wrong, &policy)?);
    let v = run(&wrong, &policy, &cfg)?;
    r.check("wrong_verdict", "rejected", v.label());
    r.check("wrong_reasons", vec![ReasonCode::ComputeMismatch], codes(&v));
    r.check(
        "replayed_value",
        true,
        v.reasons().iter().any(|x| x.detail.contains("recomputes to 41, claimed 42")),
    );
    let v = run(&right, &policy, &cfg)?;
    r.check("right_verdict", "certified", v.label());
    r.check("right_has_compute_component", true, kinds(&v).contains(&ComponentKind::Compute));
    Ok(r.finish())
}

fn escalation(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "escalation",
        "Insufficient authority, pending authorization and missing memory capability escalate instead of deciding.",
    );
    let finance = fixtures::finance_layered_policy();
    let orders = prefix_orders(2, "finance-v1");
    let low = CertifierConfig::new("desk-certifier", Tier::C3, MemoryClass::M2Provenance, key.clone());
    let v = run(&orders, &finance, &low)?;
    r.check("authority_shortfall", vec![ReasonCode::AuthorityShortfall], codes(&v));
    r.check("required_tier", Some(Tier::C4), required_tier(&v));
    r.check("authority_exit_code", 10, v.exit_code());

    let vendor = sourced_claim("vendor_feed", 41);
    let v = run(&vendor, &finance, &sound(key))?;
    r.check("pending_verdict", "escalate", v.label());
    r.check("pending_reasons", vec![ReasonCode::PendingAuthorization], codes(&v));
    r.check("oracle_permits_pending", false, permitted(&vendor, &finance)?);

    let budget = fixtures::query_budget_policy();
    let m0 = CertifierConfig::new("fsm-certifier", Tier::C5, MemoryClass::M0FiniteState, key.clone());
    let v = run(&queries(&budget, 3, "R1"), &budget, &m0)?;
    r.check("finite_state_memory_verdict", "escalate", v.label());
    r.check("finite_state_memory_reasons", vec![ReasonCode::CapabilityDenied], codes(&v));
    Ok(r.finish())
}

fn required_tier(v: &Verdict) -> Option<Tier> {
    match v {
        Verdict::Escalate { required_tier, .. } => Some(*required_tier),
        _ => None,
    }
}

fn prefix_orders(n: usize, version: &str) -> ProposedTrace {
    let mut t = fixtures::exposure_orders_trace();
    t.events.truncate(n);
    t.trace_id = format!("orders-{n}x1000");
    t.requested_policy_version = version.to_string();
    t
}

fn trade() -> ProposedTrace {
    let mut t = ProposedTrace::new(
        "settled-trade",
        "trading-agent",
        Tier::C4,
        "finance-v1",
        vec![
            TraceEvent::new("research", 1, EventKind::Retrieval, "trading-agent", "filings")
                .with_data_class("financials")
                .with_purpose("analysis")
                .with_param("value", Scalar::Int(1200)),
            TraceEvent::new("thesis", 2, EventKind::Claim, "trading-agent", "report")
                .with_purpose("analysis")
                .with_evidence(["research"]),
            TraceEvent::new("buy", 4, EventKind::ExecutionCall, "trading-agent", "broker")
                .with_resource("ACME")
                .with_delta("exposure", 1000)
                .irreversible(),
            TraceEvent::new("settle", 5, EventKind::ExecutionCall, "trading-agent", "payments")
                .with_param("amount", Scalar::bp(100_000))
                .irreversible(),
        ],
    );
    let subject = approval_subject_hash(&t).to_hex();
    t.events.insert(
        2,
        TraceEvent::new("approve", 3, EventKind::Approval, "risk-officer", "desk").with_param("binds", Scalar::str(subject)),
    );
    t
}

fn proof_carrying_trade(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "proof_carrying_trade",
        "A sourced, approved trade within limits is certified, independently checked, executed and logged.",
    );
    let policy = fixtures::finance_layered_policy();
    let cfg = CertifierConfig::new("certifier-1", Tier::C5, MemoryClass::M3Persistent, key.clone());
    let trace = trade();
    let mut ledger = Ledger::in_memory();
    let v = certify_with_ledger(&trace, &policy, &MemoryState::new(&policy), Some(&ledger), &cfg).map_err(err)?;
    r.check("verdict", "certified", v.label());
    r.check(
        "component_kinds",
        vec![
            ComponentKind::Id,
            ComponentKind::Policy,
            ComponentKind::Risk,
            ComponentKind::Auth,
            ComponentKind::Source,
            ComponentKind::Human,
            ComponentKind::Lineage,
        ],
        kinds(&v),
    );
    let Some(cert) = v.certificate().cloned() else {
        return Ok(r.finish());
    };
    r.check("independent_check", true, check_certificate(&cert, &trace, &policy, key));
    let mut edited = cert.clone();
    edited.components[0].claim.push_str(" (edited)");
    r.check("edited_certificate_check", false, check_certificate(&edited, &trace, &policy, key));
    ledger
        .append(EntryDraft::new(
            canonical_hash(&trace),
            LedgerRecord::Certified { certificate: cert.clone() },
            &policy,
            cert.issued_tick,
        ))
        .map_err(err)?;
    let mut env = Environment::default();
    let res = execute(&trace, Some(&cert), &policy, key, &mut env, &mut ledger).map_err(err)?;
    r.check("execution_outcome", crate::trace::Outcome::Completed, res.realized.outcome);
    r.check("realized_permitted", true, permitted_realized(&res.realized, &policy)?);
    let chain = ledger.verify_chain();
    r.check("ledger_entries", 2, chain.entries);
    r.check("ledger_intact", true, chain.intact);
    Ok(r.finish())
}

fn permitted_realized(t: &crate::trace::RealizedTrace, policy: &PolicySystem) -> Result<bool, String> {
    Ok(evaluate(policy, t).map_err(err)?.permitted)
}

fn with_bound(policy: &PolicySystem, version: &str, bound: i64) -> PolicySystem {
    let mut p = policy.clone();
    p.version = version.to_string();
    for layer in &mut p.layers {
        if let LayerSpec::Counter(c) = &mut layer.spec {
            for def in &mut c.counters {
                def.bound = bound;
            }
        }
    }
    p
}

fn persistent_memory_drift(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "persistent_memory_drift",
        "Tightening the query budget from 5 to 3 flags exactly the certified traces that used 4 or 5 queries.",
    );
    let old = fixtures::query_budget_policy();
    let new = with_bound(&old, "budget-v2", 3);
    let cfg = sound(key);
    let mut ledger = Ledger::in_memory();
    let mut store = MemoryTraceStore::default();
    let mut certified = Vec::new();
    for n in 1..=7 {
        let t = queries(&old, n, &format!("R{n}"));
        let h = store.put(t.clone());
        let v = run(&t, &old, &cfg)?;
        let record = match &v {
            Verdict::Certified { certificate } => LedgerRecord::Certified {
                certificate: certificate.clone(),
            },
            _ => LedgerRecord::Rejected {
                reasons: v.reasons().iter().map(|x| x.to_string()).collect(),
            },
        };
        let seq = ledger.append(EntryDraft::new(h, record, &old, n as u64)).map_err(err)?.seq;
        if v.is_certified() {
            certified.push((n, seq));
        }
    }
    r.check("certified_query_counts", vec![1, 2, 3, 4, 5], certified.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    let mut flagged = Vec::new();
    for (n, seq) in &certified {
        let rc = recertify(&mut ledger, *seq, &new, &store, 100).map_err(err)?;
        if rc.drift {
            flagged.push(*n);
        }
    }
    r.check("flagged_query_counts", vec![4, 5], flagged);
    let chain = ledger.verify_chain();
    r.check("ledger_intact_after_recertification", true, chain.intact);
    r.check("ledger_entries", 12, chain.entries);
    let universe = GeneratorSpec::query_universe(7, Prob::new(2, 7), Mode::Enumerate(1000));
    let d = drift_eval(&universe, &cfg, &old, &new).map_err(err)?;
    r.check("drift_mass", "2/7", ratio_string(&d.drift.value));
    let same = drift_eval(&universe, &cfg, &old, &old).map_err(err)?;
    r.check("unchanged_policy_drift", "0", ratio_string(&same.drift.value));
    Ok(r.finish())
}

fn self_approval(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "self_approval",
        "A proposer may not certify or approve its own trace, and a certificate relabelled to the proposer fails checking.",
    );
    let policy = fixtures::finance_layered_policy();
    let own = payment("controller", None, 5, None);
    let self_cfg = CertifierConfig::new("agent", Tier::C5, MemoryClass::M2Provenance, key.clone());
    let v = run(&own, &policy, &self_cfg)?;
    r.check("self_certification", vec![ReasonCode::SelfApproval], codes(&v));
    r.check("self_certification_verdict", "rejected", v.label());

    let self_approved = payment("agent", None, 5, None);
    let v = run(&self_approved, &policy, &sound(key))?;
    r.check("self_approved_payment", vec![ReasonCode::ApproverIsProposer], codes(&v));

    let v = run(&own, &policy, &sound(key))?;
    r.check("independent_approval_verdict", "certified", v.label());
    if let Some(cert) = v.certificate() {
        let mut relabelled = cert.clone();
        relabelled.certifier_id = "agent".into();
        let check = inspect_certificate(&relabelled, &own, &policy, key);
        r.check("relabelled_failures", vec!["mac does not verify", "certifier is the proposer"], check.failures());
    }
    Ok(r.finish())
}

fn stale_approval(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "stale_approval",
        "Expired approvals and approvals bound to another trace never witness the human component.",
    );
    let policy = fixtures::finance_layered_policy();
    let cfg = sound(key);
    let fresh = run(&payment("controller", None, 5, None), &policy, &cfg)?;
    r.check("fresh_has_human", true, kinds(&fresh).contains(&ComponentKind::Human));

    let expired = payment("controller", Some(10), 50, None);
    r.check("oracle_permits_expired", true, permitted(&expired, &policy)?);
    let v = run(&expired, &policy, &cfg)?;
    r.check("expired_verdict", "escalate", v.label());
    r.check("expired_reasons", vec![ReasonCode::StaleApproval], codes(&v));

    let other = crate::trace::Digest::of(b"a different payment").to_hex();
    let v = run(&payment("controller", None, 5, Some(other)), &policy, &cfg)?;
    r.check("unbound_verdict", "escalate", v.label());
    r.check("unbound_reasons", vec![ReasonCode::StaleApproval], codes(&v));
    r.check("unbound_has_human", false, kinds(&v).contains(&ComponentKind::Human));
    Ok(r.finish())
}

fn deviation_trace(version: &str) -> ProposedTrace {
    ProposedTrace::new(
        "quoted-payment",
        "agent",
        Tier::C2,
        version,
        vec![
            TraceEvent::new("quote", 1, EventKind::ToolCall, "agent", "quotes").observing("price in [100, 200]"),
            TraceEvent::new("pay", 2, EventKind::ToolCall, "agent", "payments")
                .with_param("amount", Scalar::Int(150))
                .irreversible(),
            TraceEvent::new("notify", 3, EventKind::ToolCall, "agent", "email"),
        ],
    )
}

fn tool_deviation(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "tool_deviation",
        "A tool that deviates from the certified trace halts execution, or rolls it back once something irreversible happened.",
    );
    let policy = fixtures::query_budget_policy();
    let trace = deviation_trace(&policy.version);
    let v = run(&trace, &policy, &sound(key))?;
    let Some(cert) = v.certificate().cloned() else {
        r.check("verdict", "certified", v.label());
        return Ok(r.finish());
    };
    let env = || {
        let mut env = Environment::default();
        env.respond("quotes", "quote", Scalar::Int(180));
        env
    };
    let mut ledger = Ledger::in_memory();
    let mut outcomes = Vec::new();
    let mut codes = Vec::new();

    let res = execute(&trace, Some(&cert), &policy, key, &mut env(), &mut ledger).map_err(err)?;
    outcomes.push(res.realized.outcome);
    codes.push(res.exit_code());

    let mut e = env();
    e.inject("pay", "params.amount", json!(9000));
    let res = execute(&trace, Some(&cert), &policy, key, &mut e, &mut ledger).map_err(err)?;
    r.check("halted_before", Some("pay"), res.halted_before.as_deref());
    r.check("halt_deviations", 1, res.realized.deviation_log.len());
    r.check("effects_before_halt", vec!["quote"], &e.effects);
    outcomes.push(res.realized.outcome);
    codes.push(res.exit_code());

    let mut e = env();
    e.inject("notify", "component", json!("sms"));
    let res = execute(&trace, Some(&cert), &policy, key, &mut e, &mut ledger).map_err(err)?;
    outcomes.push(res.realized.outcome);
    codes.push(res.exit_code());

    let mut e = env();
    match execute(&trace, None, &policy, key, &mut e, &mut ledger) {
        Err(x @ ExecuteError::NoCertificate { .. }) => codes.push(x.exit_code()),
        other => return Err(format!("uncertified execution was not refused: {other:?}")),
    }
    r.check("nothing_executed_without_certificate", 0, e.effects.len());
    use crate::trace::Outcome as O;
    r.check("outcomes", vec![O::Completed, O::Halted, O::RolledBack], outcomes);
    r.check("exit_codes", vec![0, 30, 31, 40], codes);
    let compensated: Vec<&str> = ledger
        .entries()
        .iter()
        .filter_map(|e| match &e.record {
            LedgerRecord::Compensation { event_id, .. } => Some(event_id.as_str()),
            _ => None,
        })
        .collect();
    r.check("compensated_events", vec!["pay", "quote"], compensated);
    r.check("ledger_intact", true, ledger.verify_chain().intact);
    Ok(r.finish())
}

fn guardrail_baseline(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "guardrail_baseline",
        "A final-output filter certifies over-budget query runs; a certifier with the same view but sound behaviour escalates them.",
    );
    let policy = fixtures::query_budget_policy();
    let baseline = CertifierConfig::guardrail_baseline("output-filter", Tier::C5, key.clone());
    let masked = sound(key).with_mask(ObservationMask::FinalEventOnly);
    let six = queries(&policy, 6, "R1");
    r.check("oracle_permits_six", false, permitted(&six, &policy)?);
    r.check("baseline_on_six", "certified", run(&six, &policy, &baseline)?.label());
    r.check("masked_sound_on_six", "escalate", run(&six, &policy, &masked)?.label());

    let g = GeneratorSpec::query_universe(7, Prob::new(1, 2), Mode::Enumerate(1000));
    let b = exact_measures(&g, &baseline, &policy).map_err(err)?;
    let m = exact_measures(&g, &masked, &policy).map_err(err)?;
    let s = exact_measures(&g, &sound(key), &policy).map_err(err)?;
    let show = |x: &crate::boundary::Measure| ratio_string(&x.value);
    r.check("baseline_u", "1/2", show(&b.u));
    r.check("masked_sound_u", "0", show(&m.u));
    r.check("masked_sound_m", "2/5", show(&m.m));
    r.check("full_sound_u_m", ("0", "0"), (show(&s.u), show(&s.m)));
    r.check(
        "identity_residuals",
        vec!["0"; 3],
        [&b, &m, &s].iter().map(|x| ratio_string(&x.identity_residual)).collect::<Vec<_>>(),
    );
    Ok(r.finish())
}

fn certificate_laundering(key: &MacKey) -> Outcome {
    let mut r = Run::new(
        "certificate_laundering",
        "A low-tier certificate cannot be reused for a higher-tier trace, and raising its tier breaks the MAC.",
    );
    let policy = fixtures::finance_layered_policy();
    let high = prefix_orders(2, "finance-v1");
    let junior = CertifierConfig::new("junior-certifier", Tier::C2, MemoryClass::M2Provenance, key.clone());
    let v = run(&high, &policy, &junior)?;
    r.check("junior_on_c4", vec![ReasonCode::AuthorityShortfall], codes(&v));

    let mut low = high.clone();
    low.declared_tier = Tier::C2;
    let v = run(&low, &policy, &junior)?;
    r.check("junior_on_c2_copy", "certified", v.label());
    let Some(cert) = v.certificate().cloned() else {
        return Ok(r.finish());
    };
    let reused = inspect_certificate(&cert, &high, &policy, key);
    r.check(
        "reused_failures",
        vec!["trace hash mismatch", "certifier tier below declared tier"],
        reused.failures(),
    );
    let mut forged = cert.clone();
    forged.certifier_tier = Tier::C4;
    forged.trace_hash = canonical_hash(&high);
    let check = inspect_certificate(&forged, &high, &policy, key);
    r.check("forged_failures", vec!["mac does not verify"], check.failures());

    let mut ledger = Ledger::in_memory();
    let mut env = Environment::default();
    let refused = execute(&high, Some(&forged), &policy, key, &mut env, &mut ledger);
    r.check(
        "executor_refuses_forged",
        40,
        refused.err().map(|e| e.exit_code()).unwrap_or(0),
    );
    r.check("nothing_executed", 0, env.effects.len());
    Ok(r.finish())
}

//! Random traces and policies over a small shared vocabulary, so that
//! generated predicates actually hit generated events.
#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;

use certgate_core::certifier::{CertifierConfig, MacKey};
use certgate_core::memory::MemoryClass;
use certgate_core::policy::{
    AuthRow, CounterDef, CounterScope, CounterSpec, CounterUpdate, DefaultRule, Delta, EventPredicate, InfoFlowSpec,
    LayerSpec, MonitorSpec, ParamMatcher, PolicyLayer, PolicySystem, TemporalPattern, TemporalSpec, Transition,
};
use certgate_core::trace::{EventKind, ProposedTrace, Scalar, Tier, TraceEvent};

pub const VERSION: &str = "gen-v1";

pub const KINDS: [EventKind; 6] = [
    EventKind::Query,
    EventKind::Retrieval,
    EventKind::ToolCall,
    EventKind::ExecutionCall,
    EventKind::Claim,
    EventKind::Release,
];
const PRINCIPALS: [&str; 2] = ["agent", "helper"];
const COMPONENTS: [&str; 3] = ["search", "broker", "crm"];
const RESOURCES: [&str; 2] = ["R1", "R2"];
const CLASSES: [&str; 2] = ["public", "client_pii"];
const PURPOSES: [&str; 2] = ["analysis", "kyc"];

pub fn key() -> MacKey {
    MacKey::new(b"integration-test-key".to_vec())
}

pub fn certifier(class: MemoryClass) -> CertifierConfig {
    CertifierConfig::new("cert-1", Tier::C5, class, key())
}

fn kind() -> impl Strategy<Value = EventKind> {
    prop::sample::select(KINDS.to_vec())
}

fn pick(xs: &'static [&'static str]) -> impl Strategy<Value = String> {
    prop::sample::select(xs).prop_map(str::to_string)
}

/// One event minus id and tick. Some retrievals become observation slots.
fn event_body() -> impl Strategy<Value = TraceEvent> {
    (
        kind(),
        pick(&PRINCIPALS),
        pick(&COMPONENTS),
        prop::option::of(pick(&RESOURCES)),
        prop::option::of(pick(&CLASSES)),
        prop::option::of(pick(&PURPOSES)),
        0i64..1200,
        any::<bool>(),
        0u8..6,
    )
        .prop_map(|(kind, principal, component, resource, class, purpose, qty, irrev, slot)| {
            let mut e = TraceEvent::new("", 0, kind, principal, component);
            e.resource = resource;
            e.data_class = class;
            e.purpose = purpose;
            e.quantity_deltas.insert("exposure".into(), qty);
            e.irreversible = irrev && kind == EventKind::ExecutionCall;
            if kind == EventKind::Retrieval && slot == 0 {
                e = e.observing("value in [0, 100]");
            } else {
                e.params.insert("value".into(), Scalar::Int(qty / 12));
            }
            e
        })
}

pub fn events(max: usize) -> impl Strategy<Value = Vec<TraceEvent>> {
    prop::collection::vec((event_body(), 0u64..4), 1..=max).prop_map(|v| {
        let mut tick = 0;
        v.into_iter()
            .enumerate()
            .map(|(i, (mut e, gap))| {
                tick += gap;
                e.event_id = format!("e{i}");
                e.tick = tick;
                e
            })
            .collect()
    })
}

pub fn trace_of(events: Vec<TraceEvent>, declared: Tier) -> ProposedTrace {
    ProposedTrace::new("t", "agent-proposer", declared, VERSION, events)
}

pub fn traces(max: usize) -> impl Strategy<Value = ProposedTrace> {
    (events(max), prop::sample::select(Tier::ALL.to_vec())).prop_map(|(e, t)| trace_of(e, t))
}

fn predicate() -> impl Strategy<Value = EventPredicate> {
    (
        kind(),
        prop::option::of(pick(&COMPONENTS)),
        prop::option::of(pick(&PRINCIPALS)),
        prop::option::weighted(0.2, 0i64..100),
    )
        .prop_map(|(k, component, principal, value_max)| {
            let mut p = EventPredicate::kind(k);
            p.component = component;
            p.principal = principal;
            if let Some(max) = value_max {
                p.params.insert(
                    "value".into(),
                    ParamMatcher::Range {
                        min: None,
                        max: Some(Scalar::Int(max)),
                    },
                );
            }
            p
        })
}

fn tier() -> impl Strategy<Value = Tier> {
    prop::sample::select(vec![Tier::C0, Tier::C1, Tier::C2, Tier::C3])
}

/// Deterministic monitor: transitions out of a state use distinct kinds.
fn monitor(all_accepting: bool) -> impl Strategy<Value = LayerSpec> {
    let n = 3usize;
    (
        prop::collection::vec((0..n, prop::sample::subsequence(KINDS.to_vec(), 0..3), 0..n), n),
        prop::collection::vec(any::<bool>(), n),
        prop::collection::vec(any::<bool>(), n),
    )
        .prop_map(move |(rows, accept, self_loop)| {
            let states: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let mut transitions = Vec::new();
            for (from, (_, kinds, to)) in rows.into_iter().enumerate() {
                for (j, k) in kinds.into_iter().enumerate() {
                    transitions.push(Transition {
                        from: states[from].clone(),
                        on: EventPredicate::kind(k),
                        to: states[(to + j) % n].clone(),
                    });
                }
            }
            let accepting = states
                .iter()
                .zip(&accept)
                .filter(|(_, a)| all_accepting || **a)
                .map(|(s, _)| s.clone())
                .collect();
            let defaults = states
                .iter()
                .zip(&self_loop)
                .map(|(s, l)| {
                    let rule = if *l || all_accepting { DefaultRule::SelfLoop } else { DefaultRule::Reject };
                    (s.clone(), rule)
                })
                .collect();
            LayerSpec::Monitor(MonitorSpec {
                states: states.clone(),
                initial: states[0].clone(),
                accepting,
                transitions,
                defaults,
            })
        })
}

fn counter() -> impl Strategy<Value = LayerSpec> {
    (
        predicate(),
        any::<bool>(),
        prop::option::of(1u64..8),
        any::<bool>(),
    )
        .prop_map(|(on, by_quantity, window, global)| {
            let (delta, bound) = if by_quantity {
                (Delta::Quantity("exposure".into()), 2000)
            } else {
                (Delta::Const(1), 2)
            };
            LayerSpec::Counter(CounterSpec {
                counters: vec![CounterDef {
                    name: "c".into(),
                    window_ticks: window,
                    bound,
                    scope: if global { CounterScope::Global } else { CounterScope::PerPrincipalResource },
                }],
                updates: vec![CounterUpdate {
                    on,
                    counter: "c".into(),
                    delta,
                }],
            })
        })
}

fn temporal(patterns: Vec<TemporalPattern>) -> impl Strategy<Value = LayerSpec> {
    (prop::sample::select(patterns), predicate(), predicate(), 0u64..4).prop_map(|(pattern, a, b, k)| {
        LayerSpec::Temporal(TemporalSpec {
            pattern,
            a,
            b,
            k: (pattern == TemporalPattern::ResponseWithin).then_some(k),
        })
    })
}

fn row() -> impl Strategy<Value = AuthRow> {
    let star = |xs: &'static [&'static str]| {
        prop_oneof![Just("*".to_string()), pick(xs)]
    };
    (star(&PRINCIPALS), star(&COMPONENTS), star(&CLASSES), star(&PURPOSES))
        .prop_map(|(p, c, d, u)| AuthRow::new(&p, &c, &d, &u))
}

fn info_flow() -> impl Strategy<Value = LayerSpec> {
    (
        prop::collection::vec(row(), 1..4),
        prop::collection::vec(row(), 0..2),
        prop::option::weighted(0.3, Just("client_pii".to_string())),
    )
        .prop_map(|(auth_table, pending, release)| {
            LayerSpec::InfoFlow(InfoFlowSpec {
                auth_table,
                pending,
                purpose_binding: false,
                release_constraints: release.into_iter().collect(),
            })
        })
}

pub fn layer_spec() -> BoxedStrategy<LayerSpec> {
    prop_oneof![
        monitor(false),
        monitor(true),
        counter(),
        temporal(vec![
            TemporalPattern::Precedence,
            TemporalPattern::AbsenceAfter,
            TemporalPattern::ResponseWithin
        ]),
        info_flow(),
    ]
    .boxed()
}

/// Layers whose languages are closed under prefixes.
pub fn prefix_closed_spec() -> BoxedStrategy<LayerSpec> {
    prop_oneof![
        monitor(true),
        counter(),
        temporal(vec![TemporalPattern::Precedence, TemporalPattern::AbsenceAfter]),
        info_flow(),
    ]
    .boxed()
}

pub fn assemble(specs: Vec<(LayerSpec, Tier)>) -> PolicySystem {
    let layers = specs
        .into_iter()
        .enumerate()
        .map(|(i, (spec, tier))| PolicyLayer::new(format!("l{i}"), tier, spec))
        .collect();
    let p = PolicySystem::new(VERSION, "generated", layers);
    p.validate().expect("generated policy validates");
    p
}

pub fn policies_from(spec: BoxedStrategy<LayerSpec>, max_layers: usize) -> impl Strategy<Value = PolicySystem> {
    prop::collection::vec((spec, tier()), 1..=max_layers).prop_map(assemble)
}

pub fn policies() -> impl Strategy<Value = PolicySystem> {
    policies_from(layer_spec(), 3)
}

/// Direct windowed recount of one counter key from the raw events, at `at`.
pub fn recount(
    events: &[TraceEvent],
    on: &EventPredicate,
    delta: &Delta,
    scope: CounterScope,
    key: (&str, &str),
    window: Option<u64>,
    at: u64,
) -> i64 {
    events
        .iter()
        .filter(|e| e.tick <= at && window.is_none_or(|w| at - e.tick < w))
        .filter(|e| on.evaluate(e) == certgate_core::policy::Match::Yes)
        .filter(|e| match scope {
            CounterScope::Global => true,
            CounterScope::PerPrincipalResource => {
                e.principal == key.0 && e.resource.as_deref().unwrap_or("") == key.1
            }
        })
        .map(|e| delta.amount(e))
        .sum()
}

pub fn params(pairs: &[(&str, Scalar)]) -> BTreeMap<String, Scalar> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Budget traces of 1..=n queries, certified and appended in order.
pub fn certified_query_ledger(ledger: &mut certgate_core::ledger::Ledger, n: u64) {
    use certgate_core::certifier::{certify, Verdict};
    use certgate_core::ledger::{EntryDraft, LedgerRecord};
    use certgate_core::memory::MemoryState;

    let p = certgate_core::fixtures::query_budget_policy();
    for len in 1..=n {
        let events = (1..=len)
            .map(|i| TraceEvent::new(format!("q{i}"), i, EventKind::Query, "agent", "search").with_resource("R1"))
            .collect();
        let t = ProposedTrace::new(format!("burst-{len}"), "agent", Tier::C2, &p.version, events);
        let record = match certify(&t, &p, &MemoryState::new(&p), &certifier(MemoryClass::M1Counter)).unwrap() {
            Verdict::Certified { certificate } => LedgerRecord::Certified { certificate },
            other => LedgerRecord::Rejected {
                reasons: other.reasons().iter().map(|r| r.to_string()).collect(),
            },
        };
        let hash = certgate_core::trace::canonical_hash(&t);
        ledger.append(EntryDraft::new(hash, record, &p, len)).unwrap();
    }
}

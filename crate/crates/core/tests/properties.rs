mod common;

use proptest::prelude::*;

use certgate_core::certifier::{certify, certify_with_ledger, inspect_certificate, CertifierConfig, ObservationMask, Verdict};
use certgate_core::ledger::Ledger;
use certgate_core::memory::{Fact, MemoryClass, MemoryError, MemoryState};
use certgate_core::policy::{
    evaluate, parse_policy, strengthen, EventPredicate, LayerSpec, PolicyLayer, PolicySystem, TemporalPattern,
    TemporalSpec,
};
use certgate_core::trace::{canonical_hash, parse_trace, prefix, EventKind, ProposedTrace, Tier, TraceEvent};

use common::*;

fn permitted(p: &PolicySystem, t: &ProposedTrace) -> bool {
    evaluate(p, t).unwrap().permitted
}

fn rejecting(p: &PolicySystem, t: &ProposedTrace) -> Vec<String> {
    evaluate(p, t)
        .unwrap()
        .rejecting_layers()
        .map(|l| l.layer_id.clone())
        .collect()
}

fn run(t: &ProposedTrace, p: &PolicySystem, cfg: &CertifierConfig) -> Verdict {
    if cfg.memory_class == MemoryClass::M3Persistent {
        let ledger = Ledger::in_memory();
        certify_with_ledger(t, p, &MemoryState::new(p), Some(&ledger), cfg).unwrap()
    } else {
        certify(t, p, &MemoryState::new(p), cfg).unwrap()
    }
}

const CLASSES: [MemoryClass; 4] = [
    MemoryClass::M0FiniteState,
    MemoryClass::M1Counter,
    MemoryClass::M2Provenance,
    MemoryClass::M3Persistent,
];
const MASKS: [ObservationMask; 3] = [
    ObservationMask::FullTrace,
    ObservationMask::FinalEventOnly,
    ObservationMask::EventKindsOnly,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn trace_json_round_trips(t in traces(8)) {
        let back = parse_trace(t.to_pretty_json().as_bytes()).unwrap();
        prop_assert_eq!(canonical_hash(&back), canonical_hash(&t));
        prop_assert_eq!(back, t);
    }

    #[test]
    fn policy_json_round_trips(p in policies()) {
        let back = parse_policy(p.to_pretty_json().as_bytes()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn hash_binds_every_event(t in traces(6), which in any::<prop::sample::Index>(), field in 0u8..5) {
        let mut u = t.clone();
        let e = &mut u.events[which.index(t.len())];
        match field {
            0 => e.principal.push('x'),
            1 => e.tick += 1_000,
            2 => e.irreversible = !e.irreversible,
            3 => { e.quantity_deltas.insert("exposure".into(), -1); }
            _ => e.evidence_refs.push("e0".into()),
        }
        prop_assert_ne!(canonical_hash(&u), canonical_hash(&t));
    }

    #[test]
    fn certificate_does_not_transfer_to_an_edited_trace(t in traces(6), p in policies(), which in any::<prop::sample::Index>()) {
        let v = run(&t, &p, &certifier(MemoryClass::M2Provenance));
        if let Some(cert) = v.certificate() {
            let mut u = t.clone();
            u.events[which.index(t.len())].component.push('x');
            let check = inspect_certificate(cert, &u, &p, &key());
            prop_assert!(!check.ok());
            prop_assert!(check.failures().contains(&"trace hash mismatch"));
        }
    }

    #[test]
    fn conjunction_is_layerwise(t in traces(8), p in policies()) {
        let all = permitted(&p, &t);
        let each = p.layers.iter().all(|l| permitted(&p.only(&l.layer_id).unwrap(), &t));
        prop_assert_eq!(all, each);
    }

    #[test]
    fn prefix_closed_layers_are_prefix_monotone(t in traces(8), p in policies_from(prefix_closed_spec(), 3)) {
        let full = rejecting(&p, &t);
        for k in 1..=t.len() {
            let pre = prefix(&t, k).unwrap();
            for layer in rejecting(&p, &pre) {
                prop_assert!(full.contains(&layer), "layer {} rejects prefix {} but not the full trace", layer, k);
            }
        }
    }

    #[test]
    fn strengthening_shrinks_both_languages(t in traces(8), p in policies(), extra in layer_spec()) {
        let q = strengthen(&p, PolicyLayer::new("extra", Tier::C1, extra), "gen-v2").unwrap();
        let mut t2 = t.clone();
        t2.requested_policy_version = "gen-v2".into();
        if permitted(&q, &t2) {
            prop_assert!(permitted(&p, &t));
        }
        let cfg = certifier(MemoryClass::M2Provenance);
        if run(&t2, &q, &cfg).is_certified() {
            prop_assert!(run(&t, &p, &cfg).is_certified());
        }
    }

    #[test]
    fn certify_is_deterministic(t in traces(8), p in policies()) {
        let cfg = certifier(MemoryClass::M2Provenance);
        prop_assert_eq!(run(&t, &p, &cfg), run(&t, &p, &cfg));
    }

    #[test]
    fn sound_certifiers_certify_only_permitted_traces(
        t in traces(8),
        p in policies(),
        class in prop::sample::select(CLASSES.to_vec()),
        mask in prop::sample::select(MASKS.to_vec()),
    ) {
        let cfg = certifier(class).with_mask(mask);
        if run(&t, &p, &cfg).is_certified() {
            prop_assert!(permitted(&p, &t), "{:?}/{:?} certified a trace outside the policy", class, mask);
        }
    }

    #[test]
    fn masked_certification_implies_full_view_certification(
        t in traces(8),
        p in policies(),
        mask in prop::sample::select(MASKS.to_vec()),
    ) {
        let full = certifier(MemoryClass::M2Provenance);
        if run(&t, &p, &full.clone().with_mask(mask)).is_certified() {
            prop_assert!(run(&t, &p, &full).is_certified());
        }
    }

    #[test]
    fn no_certifier_certifies_its_own_proposal(t in traces(6), p in policies(), class in prop::sample::select(CLASSES.to_vec())) {
        let mut own = t.clone();
        own.proposer_id = "cert-1".into();
        let v = run(&own, &p, &certifier(class));
        prop_assert_eq!(v.label(), "rejected");
    }

    #[test]
    fn certificates_carry_enough_authority(t in traces(6), p in policies(), authority in prop::sample::select(Tier::ALL.to_vec())) {
        let cfg = CertifierConfig::new("cert-1", authority, MemoryClass::M2Provenance, key());
        match run(&t, &p, &cfg) {
            Verdict::Certified { certificate } => {
                prop_assert!(certificate.certifier_tier >= t.declared_tier);
                prop_assert!(authority >= t.declared_tier);
            }
            Verdict::Escalate { required_tier, .. } if authority < t.declared_tier => {
                prop_assert_eq!(required_tier, t.declared_tier);
            }
            _ => {}
        }
    }

    #[test]
    fn more_memory_never_loses_a_certificate(t in traces(8), p in policies()) {
        let mut prev = false;
        for class in CLASSES {
            let now = run(&t, &p, &certifier(class)).is_certified();
            prop_assert!(!prev || now, "certified below {:?} but not at it", class);
            prev = now;
        }
    }

    #[test]
    fn capability_grants_are_upward_closed(t in traces(4), p in policies()) {
        let m = MemoryState::new(&p).fold(&p, &t.events).unwrap();
        let facts = [
            Fact::LayerStatus(p.layers[0].layer_id.clone()),
            Fact::Obligations(p.layers[0].layer_id.clone()),
            Fact::Approval(canonical_hash(&t)),
            Fact::LedgerHead,
        ];
        let ledger = Ledger::in_memory();
        for fact in &facts {
            let mut granted = false;
            for class in CLASSES {
                let ok = !matches!(m.query(fact, class, Some(&ledger)), Err(MemoryError::CapabilityDenied { .. }));
                prop_assert!(!granted || ok);
                prop_assert_eq!(ok, class >= fact.required_class());
                granted = ok;
            }
        }
    }

    #[test]
    fn folded_counters_match_a_recount(t in traces(10), p in policies()) {
        let Ok(m) = MemoryState::new(&p).fold(&p, &t.events) else { return Ok(()) };
        let at = t.events.last().unwrap().tick;
        for layer in &p.layers {
            let LayerSpec::Counter(c) = &layer.spec else { continue };
            let (u, def) = (&c.updates[0], &c.counters[0]);
            for k in m.counter_keys(&layer.layer_id) {
                let fact = Fact::Count { key: k.clone(), window: def.window_ticks, at };
                let certgate_core::memory::FactAnswer::Count(n) = m.query(&fact, MemoryClass::M1Counter, None).unwrap() else {
                    unreachable!()
                };
                let direct = recount(&t.events, &u.on, &u.delta, def.scope, (&k.principal, &k.resource), def.window_ticks, at);
                prop_assert_eq!(n, direct, "key {:?}", k);
            }
        }
    }

    #[test]
    fn fold_splits_at_any_point(t in traces(8), p in policies(), cut in any::<prop::sample::Index>()) {
        let h0 = MemoryState::new(&p);
        let k = cut.index(t.len() + 1);
        let whole = h0.fold(&p, &t.events);
        let split = h0.fold(&p, &t.events[..k]).and_then(|h| h.fold(&p, &t.events[k..]));
        prop_assert_eq!(whole.ok(), split.ok());
    }
}

#[test]
fn response_within_is_not_prefix_closed() {
    let p = assemble(vec![(
        LayerSpec::Temporal(TemporalSpec {
            pattern: TemporalPattern::ResponseWithin,
            a: EventPredicate::kind(EventKind::Query),
            b: EventPredicate::kind(EventKind::Claim),
            k: Some(5),
        }),
        Tier::C1,
    )]);
    let full = trace_of(
        vec![
            TraceEvent::new("q", 0, EventKind::Query, "agent", "search"),
            TraceEvent::new("c", 2, EventKind::Claim, "agent", "report"),
        ],
        Tier::C1,
    );
    assert!(permitted(&p, &full));
    assert!(!permitted(&p, &prefix(&full, 1).unwrap()));
}

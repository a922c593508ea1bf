mod common;

use std::collections::BTreeMap;

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use proptest::prelude::*;

use certgate_core::boundary::{
    enumerate, estimate_measures, exact_measures, sample, BoundaryReport, GeneratorSpec, Measure, Mode, Prob, Template,
};
use certgate_core::certifier::CertifierConfig;
use certgate_core::fixtures;
use certgate_core::memory::MemoryClass;
use certgate_core::trace::{approval_subject_hash, canonical_hash, ProposedTrace};

use common::*;

fn sound() -> CertifierConfig {
    certifier(MemoryClass::M2Provenance)
}

fn finance_mixture(q: (i64, i64)) -> GeneratorSpec {
    let third = Prob::new(1, 3);
    let mut g = GeneratorSpec::new(
        5,
        vec![
            (Template::ExposureOrders, third.clone()),
            (Template::ApprovedPayment, third.clone()),
            (Template::SourcedClaim, third),
        ],
        4,
        Mode::Enumerate(1000),
    );
    let p = Prob::new(q.0, q.1);
    g.knobs.p_over_exposure = p.clone();
    g.knobs.p_missing_approval = p.clone();
    g.knobs.p_unauthorized_source = p.clone();
    g.knobs.p_bad_compute = p;
    g
}

fn f(r: &BigRational) -> f64 {
    r.to_f64().unwrap()
}

/// Each unconditional sample proportion lies within 3 binomial standard errors of the exact value.
fn within_three_sigma(exact: &BoundaryReport, est: &BoundaryReport) -> Result<(), String> {
    let n = est.n as f64;
    let pairs: [(&str, &Measure, &Measure); 4] = [
        ("gap", &exact.gap, &est.gap),
        ("u", &exact.u, &est.u),
        ("m", &exact.m, &est.m),
        ("y", &exact.y, &est.y),
    ];
    for (name, e, s) in pairs {
        let p = f(&e.value);
        let sigma = (p * (1.0 - p) / n).sqrt();
        if (s.approx - p).abs() > 3.0 * sigma {
            return Err(format!("{name}: estimate {} vs exact {p} (sigma {sigma})", s.approx));
        }
    }
    Ok(())
}

#[test]
fn sampled_measures_agree_with_enumeration() {
    let cases = [
        (
            GeneratorSpec::query_universe(7, Prob::new(2, 7), Mode::Enumerate(1000)),
            fixtures::query_budget_policy(),
        ),
        (finance_mixture((1, 2)), fixtures::finance_layered_policy()),
    ];
    for (g, policy) in cases {
        let exact = exact_measures(&g, &sound(), &policy).unwrap();
        for seed in [1, 2] {
            let est = estimate_measures(&g.clone().with_mode(Mode::Sample(20_000)).with_seed(seed), &sound(), &policy)
                .unwrap();
            within_three_sigma(&exact, &est).unwrap();
        }
    }
}

#[test]
fn sampler_frequencies_match_enumerated_masses() {
    let g = finance_mixture((1, 3));
    let universe = enumerate(&g, "finance-v1", 1000).unwrap();
    let mass: BTreeMap<_, _> = universe
        .iter()
        .map(|(t, p)| (canonical_hash(&strip_id(t.clone())), f(p)))
        .collect();
    let n = 30_000u64;
    let mut seen: BTreeMap<_, u64> = BTreeMap::new();
    for i in 0..n {
        let t = strip_id(sample(&g, "finance-v1", i));
        *seen.entry(canonical_hash(&t)).or_default() += 1;
    }
    assert!(seen.keys().all(|h| mass.contains_key(h)), "sampler left the enumerated support");
    for (h, p) in &mass {
        let k = *seen.get(h).unwrap_or(&0) as f64;
        let sigma = (p * (1.0 - p) * n as f64).sqrt();
        assert!((k - p * n as f64).abs() <= 4.0 * sigma, "trace {h}: {k} draws, mass {p}");
    }
}

/// The trace with its id removed. Approval bindings depend on the id, so they
/// are checked here and then dropped.
fn strip_id(mut t: ProposedTrace) -> ProposedTrace {
    let subject = approval_subject_hash(&t).to_hex();
    for e in &mut t.events {
        if let Some(b) = e.params.remove("binds") {
            assert_eq!(b.as_str(), Some(subject.as_str()));
        }
    }
    t.trace_id.clear();
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_identities_hold(a in 0i64..=6, b in 1i64..=6, horizon in 6usize..=8, masked in any::<bool>()) {
        let q = (a.min(b), b);
        let policy = fixtures::query_budget_policy();
        let cfg = if masked {
            sound().with_mask(certgate_core::certifier::ObservationMask::FinalEventOnly)
        } else {
            sound()
        };
        let g = GeneratorSpec::query_universe(horizon, Prob::new(q.0, q.1), Mode::Enumerate(1000));
        let rep = exact_measures(&g, &cfg, &policy).unwrap();
        let one = BigRational::from_integer(1.into());
        prop_assert!(rep.identity_residual.is_zero());
        prop_assert_eq!(&rep.y.value, &(one.clone() - &rep.gap.value - &rep.m.value + &rep.u.value));
        prop_assert_eq!(&rep.d.value, &(rep.u.value.clone() + &rep.m.value));
        prop_assert!(rep.u.value.is_zero());
        prop_assert_eq!(rep.gap.value, BigRational::new(q.0.into(), q.1.into()));
        if let Some(recall) = &rep.recall {
            let permitted = one - BigRational::new(q.0.into(), q.1.into());
            prop_assert_eq!(&recall.value, &(BigRational::from_integer(1.into()) - &rep.m.value / permitted));
        }
    }
}

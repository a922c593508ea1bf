mod common;

use std::fs;

use proptest::prelude::*;

use certgate_core::fixtures::query_budget_policy;
use certgate_core::ledger::{recertify, verify_bytes, verify_file, DirTraceStore, Ledger, LedgerError, LedgerRecord};
use certgate_core::policy::parse_policy;
use certgate_core::trace::{EventKind, ProposedTrace, Tier, TraceEvent};

use common::*;

fn ledger_bytes(n: u64) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.ndjson");
    certified_query_ledger(&mut Ledger::open(&path).unwrap(), n);
    fs::read(path).unwrap()
}

#[test]
fn file_ledger_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.ndjson");
    certified_query_ledger(&mut Ledger::open(&path).unwrap(), 3);
    let mut again = Ledger::open(&path).unwrap();
    assert_eq!(again.len(), 3);
    certified_query_ledger(&mut again, 2);
    let report = verify_file(&path).unwrap();
    assert!(report.intact);
    assert_eq!(report.entries, 5);
}

#[test]
fn corrupt_ledger_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.ndjson");
    certified_query_ledger(&mut Ledger::open(&path).unwrap(), 3);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"recorded_tick\":2", "\"recorded_tick\":9", 1)).unwrap();
    assert!(matches!(Ledger::open(&path), Err(LedgerError::Corrupt { seq: 1 })));
}

#[test]
fn dropping_whole_tail_lines_leaves_a_valid_prefix() {
    // The chain has no external anchor, so losing complete trailing entries is
    // indistinguishable from a shorter ledger. Partial lines are caught.
    let bytes = ledger_bytes(3);
    let cut = bytes.iter().position(|b| *b == b'\n').unwrap() + 1;
    assert!(verify_bytes(&bytes[..cut]).intact);
    assert!(!verify_bytes(&bytes[..cut - 2]).intact);
}

#[test]
fn recertify_reads_traces_from_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let store = DirTraceStore::new(dir.path().join("traces"));
    let p = query_budget_policy();
    let mut ledger = Ledger::open(dir.path().join("ledger.ndjson")).unwrap();
    certified_query_ledger(&mut ledger, 5);
    for len in 1..=5u64 {
        let events = (1..=len)
            .map(|i| TraceEvent::new(format!("q{i}"), i, EventKind::Query, "agent", "search").with_resource("R1"))
            .collect();
        store
            .put(&ProposedTrace::new(format!("burst-{len}"), "agent", Tier::C2, &p.version, events))
            .unwrap();
    }
    let tight = parse_policy(
        certgate_core::fixtures::QUERY_BUDGET_POLICY
            .replace("\"bound\": 5", "\"bound\": 3")
            .replace("budget-v1", "budget-v2")
            .as_bytes(),
    )
    .unwrap();
    let drifted: Vec<u64> = (0..5)
        .filter(|&seq| recertify(&mut ledger, seq, &tight, &store, 100).unwrap().drift)
        .collect();
    assert_eq!(drifted, [3, 4]);
    assert_eq!(ledger.len(), 10);
    assert!(matches!(ledger.get(0).unwrap().record, LedgerRecord::Certified { .. }));
    assert!(ledger.verify_chain().intact);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn any_byte_change_breaks_the_chain(pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let bytes = ledger_bytes(3);
        let mut bad = bytes.clone();
        let i = pos.index(bad.len());
        bad[i] ^= flip;
        prop_assert!(!verify_bytes(&bad).intact, "byte {} changed without detection", i);
    }
}

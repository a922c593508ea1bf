//! Append-only, hash-chained audit ledger persisted as NDJSON.
//!
//! Each line is the canonical JSON of one [`LedgerEntry`]. `entry_hash` is
//! SHA-256 over the canonical body followed by the 32 bytes of `prev_hash`,
//! so any byte change to a stored line breaks verification at that line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::certifier::Certificate;
use crate::policy::{evaluate, PermissibilityVerdict, PolicySystem, SpecError};
use crate::trace::{canonical_hash, Deviation, Digest, Outcome, ProposedTrace, Tick, Tier};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger is corrupt at seq {seq}")]
    Corrupt { seq: u64 },
    #[error("no ledger entry with seq {0}")]
    UnknownEntry(u64),
    #[error("trace {0} not found in trace store")]
    TraceNotFound(Digest),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LedgerRecord {
    Certified {
        certificate: Certificate,
    },
    Rejected {
        reasons: Vec<String>,
    },
    Escalated {
        reasons: Vec<String>,
        required_tier: Tier,
    },
    Execution {
        outcome: Outcome,
        executed_events: usize,
        deviations: Vec<Deviation>,
    },
    Compensation {
        event_id: String,
        action: String,
    },
    Refusal {
        reason: String,
    },
    Recertification {
        of_seq: u64,
        permitted: bool,
        drift: bool,
        violations: Vec<String>,
    },
}

/// What a caller supplies; the ledger assigns `seq` and the chain links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryDraft {
    pub trace_hash: Digest,
    pub record: LedgerRecord,
    pub policy_version: String,
    pub policy_source: String,
    pub policy_effective_from: Tick,
    pub recorded_tick: Tick,
}

impl EntryDraft {
    pub fn new(trace_hash: Digest, record: LedgerRecord, policy: &PolicySystem, recorded_tick: Tick) -> Self {
        EntryDraft {
            trace_hash,
            record,
            policy_version: policy.version.clone(),
            policy_source: policy.source.clone(),
            policy_effective_from: policy.effective_from,
            recorded_tick,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub seq: u64,
    pub trace_hash: Digest,
    pub record: LedgerRecord,
    pub policy_version: String,
    pub policy_source: String,
    pub policy_effective_from: Tick,
    pub recorded_tick: Tick,
    pub prev_hash: Digest,
    pub entry_hash: Digest,
}

#[derive(Serialize)]
struct EntryBody<'a> {
    seq: u64,
    trace_hash: &'a Digest,
    record: &'a LedgerRecord,
    policy_version: &'a str,
    policy_source: &'a str,
    policy_effective_from: Tick,
    recorded_tick: Tick,
    prev_hash: &'a Digest,
}

impl LedgerEntry {
    pub fn compute_hash(&self) -> Digest {
        let body = serde_json::to_vec(&EntryBody {
            seq: self.seq,
            trace_hash: &self.trace_hash,
            record: &self.record,
            policy_version: &self.policy_version,
            policy_source: &self.policy_source,
            policy_effective_from: self.policy_effective_from,
            recorded_tick: self.recorded_tick,
            prev_hash: &self.prev_hash,
        })
        .expect("ledger serialization is infallible");
        let mut h = Sha256::new();
        h.update(&body);
        h.update(self.prev_hash.0);
        Digest(h.finalize().into())
    }

    pub fn canonical_line(&self) -> String {
        serde_json::to_string(self).expect("ledger serialization is infallible")
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        match &self.record {
            LedgerRecord::Certified { certificate } => Some(certificate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainReport {
    pub intact: bool,
    pub entries: usize,
    pub first_bad_seq: Option<u64>,
}

fn check_links(entries: &[LedgerEntry]) -> Option<u64> {
    let mut prev = Digest::ZERO;
    for (i, e) in entries.iter().enumerate() {
        if e.seq != i as u64 || e.prev_hash != prev || e.compute_hash() != e.entry_hash {
            return Some(i as u64);
        }
        prev = e.entry_hash;
    }
    None
}

/// Verifies raw NDJSON bytes, including that every line is byte-for-byte canonical.
pub fn verify_bytes(bytes: &[u8]) -> ChainReport {
    let mut lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    let mut entries = Vec::with_capacity(lines.len());
    let mut first_bad = None;
    for (i, line) in lines.iter().enumerate() {
        let parsed = serde_json::from_slice::<LedgerEntry>(line)
            .ok()
            .filter(|e| e.canonical_line().as_bytes() == *line);
        match parsed {
            Some(e) => entries.push(e),
            None => {
                first_bad = Some(i as u64);
                break;
            }
        }
    }
    if let Some(bad) = check_links(&entries) {
        first_bad = Some(first_bad.map_or(bad, |f| f.min(bad)));
    }
    ChainReport {
        intact: first_bad.is_none(),
        entries: lines.len(),
        first_bad_seq: first_bad,
    }
}

pub fn verify_file(path: &Path) -> std::io::Result<ChainReport> {
    Ok(verify_bytes(&std::fs::read(path)?))
}

/// The only mutation is [`Ledger::append`].
#[derive(Debug, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    file: Option<File>,
    path: Option<PathBuf>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger::default()
    }

    /// Opens or creates a ledger file, refusing one whose chain is broken.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let report = verify_bytes(&bytes);
        if let Some(seq) = report.first_bad_seq {
            return Err(LedgerError::Corrupt { seq });
        }
        let entries = bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_slice(l).expect("verified above"))
            .collect();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Ledger {
            entries,
            file: Some(file),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&mut self, draft: EntryDraft) -> Result<&LedgerEntry, LedgerError> {
        let mut entry = LedgerEntry {
            seq: self.entries.len() as u64,
            trace_hash: draft.trace_hash,
            record: draft.record,
            policy_version: draft.policy_version,
            policy_source: draft.policy_source,
            policy_effective_from: draft.policy_effective_from,
            recorded_tick: draft.recorded_tick,
            prev_hash: self.head(),
            entry_hash: Digest::ZERO,
        };
        entry.entry_hash = entry.compute_hash();
        if let Some(file) = &mut self.file {
            let mut line = entry.canonical_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn get(&self, seq: u64) -> Option<&LedgerEntry> {
        self.entries.get(usize::try_from(seq).ok()?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Hash of the newest entry; zero for an empty ledger.
    pub fn head(&self) -> Digest {
        self.entries.last().map_or(Digest::ZERO, |e| e.entry_hash)
    }

    pub fn for_trace(&self, trace_hash: &Digest) -> impl Iterator<Item = &LedgerEntry> {
        let h = *trace_hash;
        self.entries.iter().filter(move |e| e.trace_hash == h)
    }

    pub fn verify_chain(&self) -> ChainReport {
        let first_bad_seq = check_links(&self.entries);
        ChainReport {
            intact: first_bad_seq.is_none(),
            entries: self.entries.len(),
            first_bad_seq,
        }
    }
}

/// Lookup of proposed traces by canonical hash.
pub trait TraceStore {
    fn get(&self, hash: &Digest) -> Option<ProposedTrace>;
}

#[derive(Debug, Clone, Default)]
pub struct MemoryTraceStore(BTreeMap<Digest, ProposedTrace>);

impl MemoryTraceStore {
    pub fn put(&mut self, trace: ProposedTrace) -> Digest {
        let h = canonical_hash(&trace);
        self.0.insert(h, trace);
        h
    }
}

impl TraceStore for MemoryTraceStore {
    fn get(&self, hash: &Digest) -> Option<ProposedTrace> {
        self.0.get(hash).cloned()
    }
}

/// Traces stored as `<dir>/<hex hash>.json`.
#[derive(Debug, Clone)]
pub struct DirTraceStore {
    pub dir: PathBuf,
}

impl DirTraceStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DirTraceStore { dir: dir.into() }
    }

    pub fn put(&self, trace: &ProposedTrace) -> std::io::Result<Digest> {
        let h = canonical_hash(trace);
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.dir.join(format!("{h}.json")), trace.to_pretty_json())?;
        Ok(h)
    }
}

impl TraceStore for DirTraceStore {
    fn get(&self, hash: &Digest) -> Option<ProposedTrace> {
        let bytes = std::fs::read(self.dir.join(format!("{hash}.json"))).ok()?;
        crate::trace::parse_trace(&bytes)
            .ok()
            .filter(|t| canonical_hash(t) == *hash)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Recertification {
    pub of_seq: u64,
    pub recorded_seq: u64,
    pub verdict: PermissibilityVerdict,
    /// The entry was certified and the trace is no longer permissible.
    pub drift: bool,
}

/// Re-evaluates a historical entry's trace under `new_policy` and records the
/// result as a new entry. The historical entry is left untouched.
pub fn recertify(
    ledger: &mut Ledger,
    seq: u64,
    new_policy: &PolicySystem,
    store: &dyn TraceStore,
    recorded_tick: Tick,
) -> Result<Recertification, LedgerError> {
    let entry = ledger.get(seq).ok_or(LedgerError::UnknownEntry(seq))?.clone();
    let trace = store
        .get(&entry.trace_hash)
        .ok_or(LedgerError::TraceNotFound(entry.trace_hash))?;
    let verdict = evaluate(new_policy, &trace)?;
    let drift = entry.certificate().is_some() && !verdict.permitted;
    let violations = verdict
        .rejecting_layers()
        .map(|l| {
            let reason = l.violation.as_ref().map_or("", |v| v.reason.as_str());
            format!("{}: {reason}", l.layer_id)
        })
        .collect();
    let recorded = ledger.append(EntryDraft::new(
        entry.trace_hash,
        LedgerRecord::Recertification {
            of_seq: seq,
            permitted: verdict.permitted,
            drift,
            violations,
        },
        new_policy,
        recorded_tick,
    ))?;
    Ok(Recertification {
        of_seq: seq,
        recorded_seq: recorded.seq,
        verdict,
        drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draft(i: u64) -> EntryDraft {
        EntryDraft {
            trace_hash: Digest::of(&i.to_le_bytes()),
            record: LedgerRecord::Rejected {
                reasons: vec![format!("r{i}")],
            },
            policy_version: "v1".into(),
            policy_source: "test".into(),
            policy_effective_from: 0,
            recorded_tick: i,
        }
    }

    #[test]
    fn genesis_and_chain() {
        let mut l = Ledger::in_memory();
        assert!(l.verify_chain().intact);
        let first = l.append(draft(0)).unwrap().clone();
        assert_eq!((first.seq, first.prev_hash), (0, Digest::ZERO));
        l.append(draft(1)).unwrap();
        l.append(draft(2)).unwrap();
        assert_eq!(l.entries()[2].prev_hash, l.entries()[1].entry_hash);
        assert!(l.verify_chain().intact);
    }

    #[test]
    fn file_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.ndjson");
        {
            let mut l = Ledger::open(&path).unwrap();
            for i in 0..3 {
                l.append(draft(i)).unwrap();
            }
        }
        let l = Ledger::open(&path).unwrap();
        assert_eq!(l.len(), 3);
        assert!(verify_file(&path).unwrap().intact);

        let mut bytes = std::fs::read(&path).unwrap();
        let second_line = bytes.iter().position(|b| *b == b'\n').unwrap() + 1;
        let target = second_line + bytes[second_line..]
            .windows(2)
            .position(|w| w == b"r1")
            .unwrap();
        bytes[target + 1] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        let report = verify_file(&path).unwrap();
        assert_eq!(report.first_bad_seq, Some(1));
        assert!(matches!(Ledger::open(&path), Err(LedgerError::Corrupt { seq: 1 })));
    }

    #[test]
    fn non_canonical_whitespace_is_rejected() {
        let mut l = Ledger::in_memory();
        l.append(draft(0)).unwrap();
        let pretty = serde_json::to_string_pretty(&l.entries()[0]).unwrap().replace('\n', "");
        assert_eq!(verify_bytes(pretty.as_bytes()).first_bad_seq, Some(0));
        let canonical = l.entries()[0].canonical_line();
        assert!(verify_bytes(canonical.as_bytes()).intact);
    }
}

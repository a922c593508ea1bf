//! Certificates, their MAC, and verification independent of the issuer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::policy::PolicySystem;
use crate::trace::{canonical_hash, Digest, ProposedTrace, Tick, Tier, TraceEvent, COMMITMENT_PREFIX};

/// Shared secret for certificate MACs. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct MacKey(Vec<u8>);

impl MacKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        MacKey(bytes.into())
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let bytes = hex::decode(s.trim())?;
        if bytes.is_empty() {
            return Err(hex::FromHexError::InvalidStringLength);
        }
        Ok(MacKey(bytes))
    }

    fn hmac(&self) -> Hmac<Sha256> {
        <Hmac<Sha256> as KeyInit>::new_from_slice(&self.0).expect("HMAC accepts any key length")
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacKey(<{} bytes>)", self.0.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    Id,
    Policy,
    Risk,
    Auth,
    Source,
    Compute,
    Privacy,
    Human,
    Lineage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateComponent {
    pub kind: ComponentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<String>,
    pub claim: String,
    #[serde(default)]
    pub evidence_refs: Vec<String>,
    /// `event_id → "sha256:<hex>"` over the event's canonical bytes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub commitments: BTreeMap<String, String>,
}

impl CertificateComponent {
    pub fn new(kind: ComponentKind, claim: impl Into<String>) -> Self {
        CertificateComponent {
            kind,
            layer_id: None,
            claim: claim.into(),
            evidence_refs: Vec::new(),
            commitments: BTreeMap::new(),
        }
    }

    pub fn for_layer(mut self, layer_id: &str) -> Self {
        self.layer_id = Some(layer_id.to_string());
        self
    }

    pub fn citing<I, S>(mut self, refs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.evidence_refs.extend(refs.into_iter().map(Into::into));
        self
    }
}

pub fn commitment(e: &TraceEvent) -> String {
    format!("{COMMITMENT_PREFIX}{}", Digest::of(&e.canonical_bytes()).to_hex())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub trace_hash: Digest,
    pub policy_version: String,
    pub certifier_id: String,
    pub certifier_tier: Tier,
    pub issued_tick: Tick,
    pub components: Vec<CertificateComponent>,
    pub mac: Digest,
}

/// Everything the MAC covers, in wire order.
#[derive(Serialize)]
struct CertificateBody<'a> {
    trace_hash: &'a Digest,
    policy_version: &'a str,
    certifier_id: &'a str,
    certifier_tier: Tier,
    issued_tick: Tick,
    components: &'a [CertificateComponent],
}

impl Certificate {
    /// Builds and MACs a certificate.
    pub fn issue(
        trace_hash: Digest,
        policy_version: &str,
        certifier_id: &str,
        certifier_tier: Tier,
        issued_tick: Tick,
        components: Vec<CertificateComponent>,
        key: &MacKey,
    ) -> Self {
        let mut cert = Certificate {
            trace_hash,
            policy_version: policy_version.to_string(),
            certifier_id: certifier_id.to_string(),
            certifier_tier,
            issued_tick,
            components,
            mac: Digest::ZERO,
        };
        cert.mac = cert.compute_mac(key);
        cert
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&CertificateBody {
            trace_hash: &self.trace_hash,
            policy_version: &self.policy_version,
            certifier_id: &self.certifier_id,
            certifier_tier: self.certifier_tier,
            issued_tick: self.issued_tick,
            components: &self.components,
        })
        .expect("certificate serialization is infallible")
    }

    pub fn compute_mac(&self, key: &MacKey) -> Digest {
        let mut mac = key.hmac();
        mac.update(&self.body_bytes());
        Digest(mac.finalize().into_bytes().into())
    }

    pub fn mac_valid(&self, key: &MacKey) -> bool {
        let mut mac = key.hmac();
        mac.update(&self.body_bytes());
        mac.verify_slice(&self.mac.0).is_ok()
    }

    pub fn kinds(&self) -> BTreeSet<ComponentKind> {
        self.components.iter().map(|c| c.kind).collect()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serialization is infallible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitmentStatus {
    /// Payload disclosed and hashes to the commitment.
    Opened,
    /// Payload disclosed and does not match.
    Mismatch,
    /// Payload withheld; accepted without inspection.
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CertificateCheck {
    pub mac_valid: bool,
    pub trace_hash_matches: bool,
    pub policy_version_matches: bool,
    pub certifier_independent: bool,
    pub tier_sufficient: bool,
    pub evidence_resolves: bool,
    pub commitments: Vec<(String, CommitmentStatus)>,
}

impl CertificateCheck {
    pub fn ok(&self) -> bool {
        self.mac_valid
            && self.trace_hash_matches
            && self.policy_version_matches
            && self.certifier_independent
            && self.tier_sufficient
            && self.evidence_resolves
            && self
                .commitments
                .iter()
                .all(|(_, s)| *s != CommitmentStatus::Mismatch)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let checks = [
            (self.mac_valid, "mac does not verify"),
            (self.trace_hash_matches, "trace hash mismatch"),
            (self.policy_version_matches, "policy version mismatch"),
            (self.certifier_independent, "certifier is the proposer"),
            (self.tier_sufficient, "certifier tier below declared tier"),
            (self.evidence_resolves, "component cites an unknown event"),
        ];
        for (ok, msg) in checks {
            if !ok {
                out.push(msg);
            }
        }
        if self
            .commitments
            .iter()
            .any(|(_, s)| *s == CommitmentStatus::Mismatch)
        {
            out.push("commitment does not open");
        }
        out
    }
}

/// Full check with the trace disclosed: every commitment is opened.
pub fn inspect_certificate(
    cert: &Certificate,
    trace: &ProposedTrace,
    policy: &PolicySystem,
    key: &MacKey,
) -> CertificateCheck {
    let ids: BTreeSet<&str> = trace.events.iter().map(|e| e.event_id.as_str()).collect();
    CertificateCheck {
        mac_valid: cert.mac_valid(key),
        trace_hash_matches: cert.trace_hash == canonical_hash(trace),
        policy_version_matches: cert.policy_version == policy.version,
        certifier_independent: cert.certifier_id != trace.proposer_id,
        tier_sufficient: cert.certifier_tier >= trace.declared_tier,
        evidence_resolves: cert
            .components
            .iter()
            .flat_map(|c| c.evidence_refs.iter().chain(c.commitments.keys()))
            .all(|r| ids.contains(r.as_str())),
        commitments: open_commitments(cert, &trace.events),
    }
}

pub fn check_certificate(
    cert: &Certificate,
    trace: &ProposedTrace,
    policy: &PolicySystem,
    key: &MacKey,
) -> bool {
    inspect_certificate(cert, trace, policy, key).ok()
}

/// Opens the commitments whose payloads appear in `disclosed`; the rest stay opaque.
pub fn open_commitments(cert: &Certificate, disclosed: &[TraceEvent]) -> Vec<(String, CommitmentStatus)> {
    let by_id: BTreeMap<&str, &TraceEvent> =
        disclosed.iter().map(|e| (e.event_id.as_str(), e)).collect();
    cert.components
        .iter()
        .flat_map(|c| c.commitments.iter())
        .map(|(id, c)| {
            let status = match by_id.get(id.as_str()) {
                None => CommitmentStatus::Opaque,
                Some(e) if commitment(e) == *c => CommitmentStatus::Opened,
                Some(_) => CommitmentStatus::Mismatch,
            };
            (id.clone(), status)
        })
        .collect()
}

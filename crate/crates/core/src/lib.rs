//! Certification gate for agent-proposed action traces.
//!
//! A proposer emits a [`trace::ProposedTrace`]; a certifier decides it against
//! a versioned [`policy::PolicySystem`] and, on success, issues a MAC'd
//! certificate that the executor checks before acting.

pub mod boundary;
pub mod certifier;
pub mod executor;
pub mod fixtures;
pub mod ledger;
pub mod memory;
pub mod policy;
pub mod scenario;
pub mod trace;

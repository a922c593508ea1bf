//! Policy and trace files shipped with the crate.

use crate::policy::{parse_policy, PolicySystem};
use crate::trace::{parse_trace, ProposedTrace};

pub const QUERY_BUDGET_POLICY: &str = include_str!("../fixtures/query_budget.policy.json");
pub const EXPOSURE_POLICY: &str = include_str!("../fixtures/exposure.policy.json");
pub const EXPOSURE_ORDERS_TRACE: &str = include_str!("../fixtures/exposure_orders.trace.json");
pub const FINANCE_LAYERED_POLICY: &str = include_str!("../fixtures/finance_layered.policy.json");

pub fn query_budget_policy() -> PolicySystem {
    parse_policy(QUERY_BUDGET_POLICY.as_bytes()).expect("shipped fixture parses")
}

pub fn exposure_policy() -> PolicySystem {
    parse_policy(EXPOSURE_POLICY.as_bytes()).expect("shipped fixture parses")
}

pub fn exposure_orders_trace() -> ProposedTrace {
    parse_trace(EXPOSURE_ORDERS_TRACE.as_bytes()).expect("shipped fixture parses")
}

pub fn finance_layered_policy() -> PolicySystem {
    parse_policy(FINANCE_LAYERED_POLICY.as_bytes()).expect("shipped fixture parses")
}

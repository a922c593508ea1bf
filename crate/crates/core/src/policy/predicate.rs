//! Event predicates shared by every layer kind.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::trace::{Scalar, SlotConstraint, TraceEvent};

/// Three-valued match. `Undetermined` arises only on observation slots whose
/// declared constraint neither guarantees nor excludes the matcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Match {
    Yes,
    No,
    Undetermined,
}

impl Match {
    fn and(self, other: Match) -> Match {
        match (self, other) {
            (Match::No, _) | (_, Match::No) => Match::No,
            (Match::Undetermined, _) | (_, Match::Undetermined) => Match::Undetermined,
            _ => Match::Yes,
        }
    }

    fn from_bool(b: bool) -> Match {
        if b {
            Match::Yes
        } else {
            Match::No
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamMatcher {
    Eq(Scalar),
    Range {
        #[serde(default)]
        min: Option<Scalar>,
        #[serde(default)]
        max: Option<Scalar>,
    },
}

impl ParamMatcher {
    pub fn matches(&self, value: &Scalar) -> bool {
        match self {
            ParamMatcher::Eq(v) => v.same_value(value),
            ParamMatcher::Range { min, max } => {
                let Some(x) = value.as_ratio() else {
                    return false;
                };
                let above = min
                    .as_ref()
                    .and_then(Scalar::as_ratio)
                    .is_none_or(|lo| x >= lo);
                let below = max
                    .as_ref()
                    .and_then(Scalar::as_ratio)
                    .is_none_or(|hi| x <= hi);
                above && below
            }
        }
    }

    /// Decides the matcher against every value a slot constraint admits.
    fn matches_slot(&self, slot: &SlotConstraint) -> Match {
        match slot {
            SlotConstraint::Equals(v) => Match::from_bool(self.matches(v)),
            SlotConstraint::Any => Match::Undetermined,
            SlotConstraint::Range(lo, hi) => {
                let (lo, hi) = (lo.as_ratio().unwrap(), hi.as_ratio().unwrap());
                match self {
                    ParamMatcher::Eq(v) => match v.as_ratio() {
                        Some(x) if x == lo && x == hi => Match::Yes,
                        Some(x) if lo <= x && x <= hi => Match::Undetermined,
                        _ => Match::No,
                    },
                    ParamMatcher::Range { min, max } => {
                        let min = min.as_ref().and_then(Scalar::as_ratio);
                        let max = max.as_ref().and_then(Scalar::as_ratio);
                        let covers =
                            min.is_none_or(|m| m <= lo) && max.is_none_or(|m| hi <= m);
                        let misses = min.is_some_and(|m| hi < m) || max.is_some_and(|m| lo > m);
                        if covers {
                            Match::Yes
                        } else if misses {
                            Match::No
                        } else {
                            Match::Undetermined
                        }
                    }
                }
            }
        }
    }

    /// True when no scalar can satisfy both matchers.
    fn disjoint(&self, other: &ParamMatcher) -> bool {
        use ParamMatcher::*;
        match (self, other) {
            (Eq(a), Eq(b)) => !a.same_value(b),
            (Eq(v), r @ Range { .. }) | (r @ Range { .. }, Eq(v)) => !r.matches(v),
            (Range { min: a0, max: a1 }, Range { min: b0, max: b1 }) => {
                let num = |m: &Option<Scalar>| m.as_ref().and_then(Scalar::as_ratio);
                let below = |hi: Option<_>, lo: Option<_>| matches!((hi, lo), (Some(h), Some(l)) if h < l);
                below(num(a1), num(b0)) || below(num(b1), num(a0))
            }
        }
    }
}

/// Conjunction of field constraints. An absent constraint matches anything;
/// an empty `kinds` list matches every kind.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventPredicate {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kinds: Vec<crate::trace::EventKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, ParamMatcher>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irreversible: Option<bool>,
}

impl EventPredicate {
    pub fn kind(kind: crate::trace::EventKind) -> Self {
        EventPredicate {
            kinds: vec![kind],
            ..Default::default()
        }
    }

    pub fn evaluate(&self, e: &TraceEvent) -> Match {
        if !self.kinds.is_empty() && !self.kinds.contains(&e.kind) {
            return Match::No;
        }
        let field_ok = |want: &Option<String>, have: &str| want.as_deref().is_none_or(|w| w == have);
        let opt_ok =
            |want: &Option<String>, have: &Option<String>| want.is_none() || want == have;
        if !field_ok(&self.principal, &e.principal)
            || !field_ok(&self.component, &e.component)
            || !opt_ok(&self.resource, &e.resource)
            || !opt_ok(&self.data_class, &e.data_class)
            || !opt_ok(&self.purpose, &e.purpose)
            || self.irreversible.is_some_and(|want| want != e.irreversible)
        {
            return Match::No;
        }
        let slot = e.slot_constraint();
        self.params.iter().fold(Match::Yes, |acc, (key, m)| {
            let here = match (e.params.get(key), &slot) {
                (Some(v), _) => Match::from_bool(m.matches(v)),
                (None, Some(c)) if &c.field == key => m.matches_slot(&c.constraint),
                (None, _) => Match::No,
            };
            acc.and(here)
        })
    }

    /// Only the event kind is constrained.
    pub fn is_kind_only(&self) -> bool {
        self.principal.is_none()
            && self.component.is_none()
            && self.resource.is_none()
            && self.data_class.is_none()
            && self.purpose.is_none()
            && self.params.is_empty()
            && self.irreversible.is_none()
    }

    /// Conservative disjointness: true only when some constrained field
    /// cannot be satisfied by both predicates at once.
    pub fn disjoint_from(&self, other: &EventPredicate) -> bool {
        if !self.kinds.is_empty()
            && !other.kinds.is_empty()
            && self.kinds.iter().all(|k| !other.kinds.contains(k))
        {
            return true;
        }
        let differ = |a: &Option<String>, b: &Option<String>| matches!((a, b), (Some(x), Some(y)) if x != y);
        if differ(&self.principal, &other.principal)
            || differ(&self.component, &other.component)
            || differ(&self.resource, &other.resource)
            || differ(&self.data_class, &other.data_class)
            || differ(&self.purpose, &other.purpose)
            || matches!((self.irreversible, other.irreversible), (Some(a), Some(b)) if a != b)
        {
            return true;
        }
        self.params.iter().any(|(k, m)| {
            other
                .params
                .get(k)
                .is_some_and(|n| m.disjoint(n))
        })
    }
}

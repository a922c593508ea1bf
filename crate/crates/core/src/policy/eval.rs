//! Direct membership test `τ ∈ L_Π`.
//!
//! Deliberately naive: every layer is re-derived from the raw event list with
//! no shared state, so the incremental certifier can be checked against it.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{
    CounterScope, CounterSpec, DefaultRule, InfoFlowSpec, LayerSpec, Match, MonitorSpec,
    PolicyLayer, PolicySystem, SpecError, TemporalPattern, TemporalSpec,
};
use crate::trace::{EventKind, EventSource, TraceEvent};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Index of the offending event; `None` only for an empty trace.
    pub index: Option<usize>,
    pub event_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerVerdict {
    pub layer_id: String,
    pub accepted: bool,
    pub violation: Option<Violation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PermissibilityVerdict {
    pub permitted: bool,
    pub per_layer: Vec<LayerVerdict>,
}

impl PermissibilityVerdict {
    pub fn rejecting_layers(&self) -> impl Iterator<Item = &LayerVerdict> {
        self.per_layer.iter().filter(|l| !l.accepted)
    }
}

/// Decides membership in every layer. A slot whose declared constraint leaves
/// a predicate undetermined counts as a violation of that layer.
pub fn evaluate<S: EventSource + ?Sized>(
    policy: &PolicySystem,
    trace: &S,
) -> Result<PermissibilityVerdict, SpecError> {
    let events = trace.events();
    let per_layer = policy
        .layers
        .iter()
        .map(|layer| {
            let violation = layer_violation(layer, events)?;
            Ok(LayerVerdict {
                layer_id: layer.layer_id.clone(),
                accepted: violation.is_none(),
                violation,
            })
        })
        .collect::<Result<Vec<_>, SpecError>>()?;
    Ok(PermissibilityVerdict {
        permitted: per_layer.iter().all(|l| l.accepted),
        per_layer,
    })
}

fn layer_violation(layer: &PolicyLayer, events: &[TraceEvent]) -> Result<Option<Violation>, SpecError> {
    let spec_err = |message: String| SpecError {
        layer: layer.layer_id.clone(),
        message,
    };
    match &layer.spec {
        LayerSpec::Monitor(m) => monitor(m, events).map_err(spec_err),
        LayerSpec::Counter(c) => counter(c, events).map_err(spec_err),
        LayerSpec::Temporal(t) => Ok(temporal(t, events)),
        LayerSpec::InfoFlow(f) => Ok(info_flow(f, events)),
    }
}

fn at(events: &[TraceEvent], i: usize, reason: impl Into<String>) -> Option<Violation> {
    Some(Violation {
        index: Some(i),
        event_id: Some(events[i].event_id.clone()),
        reason: reason.into(),
    })
}

fn undetermined(e: &TraceEvent) -> String {
    format!("observation slot `{}` does not determine the predicate", e.event_id)
}

fn monitor(m: &MonitorSpec, events: &[TraceEvent]) -> Result<Option<Violation>, String> {
    let mut state = m.initial.as_str();
    for (i, e) in events.iter().enumerate() {
        let mut next = None;
        for (_, t) in m.outgoing(state) {
            match t.on.evaluate(e) {
                Match::Yes => {
                    next = Some(t.to.as_str());
                    break;
                }
                Match::Undetermined => return Ok(at(events, i, undetermined(e))),
                Match::No => {}
            }
        }
        state = match next {
            Some(s) => s,
            None => match m.default_rule(state) {
                Some(DefaultRule::SelfLoop) => state,
                Some(DefaultRule::Reject) => {
                    return Ok(at(events, i, format!("no transition from `{state}` admits the event")))
                }
                None => return Err(format!("state `{state}` has no default rule")),
            },
        };
    }
    if m.is_accepting(state) {
        return Ok(None);
    }
    let reason = format!("run ends in non-accepting state `{state}`");
    Ok(match events.len() {
        0 => Some(Violation {
            index: None,
            event_id: None,
            reason,
        }),
        n => at(events, n - 1, reason),
    })
}

fn counter_key(scope: CounterScope, e: &TraceEvent) -> (String, String) {
    match scope {
        CounterScope::PerPrincipalResource => {
            (e.principal.clone(), e.resource.clone().unwrap_or_default())
        }
        CounterScope::Global => (String::new(), String::new()),
    }
}

/// Recomputes every windowed sum from scratch after each event.
fn counter(c: &CounterSpec, events: &[TraceEvent]) -> Result<Option<Violation>, String> {
    for (i, e) in events.iter().enumerate() {
        for u in &c.updates {
            if u.on.evaluate(e) == Match::Undetermined {
                return Ok(at(events, i, undetermined(e)));
            }
        }
        let now = e.tick;
        for def in &c.counters {
            let mut sums: BTreeMap<(String, String), i64> = BTreeMap::new();
            for past in &events[..=i] {
                if !def.in_window(past.tick, now) {
                    continue;
                }
                for u in c.updates.iter().filter(|u| u.counter == def.name) {
                    if u.on.evaluate(past) == Match::Yes {
                        *sums.entry(counter_key(def.scope, past)).or_default() += u.delta.amount(past);
                    }
                }
            }
            if let Some(((p, r), n)) = sums.iter().find(|(_, n)| **n > def.bound) {
                let who = match def.scope {
                    CounterScope::Global => String::new(),
                    CounterScope::PerPrincipalResource => format!(" for ({p}, {r})"),
                };
                return Ok(at(
                    events,
                    i,
                    format!("counter `{}`{who} reaches {n}, bound {}", def.name, def.bound),
                ));
            }
        }
        for u in &c.updates {
            if c.counter(&u.counter).is_none() {
                return Err(format!("update targets unknown counter `{}`", u.counter));
            }
        }
    }
    Ok(None)
}

fn temporal(t: &TemporalSpec, events: &[TraceEvent]) -> Option<Violation> {
    let eval = |i: usize| -> Result<(bool, bool), Option<Violation>> {
        let e = &events[i];
        match (t.a.evaluate(e), t.b.evaluate(e)) {
            (Match::Undetermined, _) | (_, Match::Undetermined) => Err(at(events, i, undetermined(e))),
            (a, b) => Ok((a == Match::Yes, b == Match::Yes)),
        }
    };
    match t.pattern {
        TemporalPattern::Precedence => {
            let mut seen_a = false;
            for i in 0..events.len() {
                let (a, b) = match eval(i) {
                    Ok(ab) => ab,
                    Err(v) => return v,
                };
                if b && !seen_a {
                    return at(events, i, "required predecessor event is missing");
                }
                seen_a |= a;
            }
            None
        }
        TemporalPattern::AbsenceAfter => {
            let mut seen_b = false;
            for i in 0..events.len() {
                let (a, b) = match eval(i) {
                    Ok(ab) => ab,
                    Err(v) => return v,
                };
                if a && seen_b {
                    return at(events, i, "event forbidden after its trigger");
                }
                seen_b |= b;
            }
            None
        }
        TemporalPattern::ResponseWithin => {
            let k = t.k.unwrap_or(0);
            let mut flags = Vec::with_capacity(events.len());
            for i in 0..events.len() {
                match eval(i) {
                    Ok(ab) => flags.push(ab),
                    Err(v) => return v,
                }
            }
            // The earliest point at which some obligation is known to fail.
            let mut first_fail: Option<(usize, String)> = None;
            for (i, &(a, _)) in flags.iter().enumerate() {
                if !a {
                    continue;
                }
                let deadline = events[i].tick + k;
                let answered = (i + 1..events.len())
                    .take_while(|&j| events[j].tick <= deadline)
                    .any(|j| flags[j].1);
                if answered {
                    continue;
                }
                let fail_at = (i + 1..events.len())
                    .find(|&j| events[j].tick > deadline)
                    .unwrap_or(events.len() - 1);
                let reason = format!(
                    "no response to `{}` within {k} ticks",
                    events[i].event_id
                );
                if first_fail.as_ref().is_none_or(|(f, _)| fail_at < *f) {
                    first_fail = Some((fail_at, reason));
                }
            }
            first_fail.and_then(|(i, reason)| at(events, i, reason))
        }
    }
}

/// Transitive closure of `evidence_refs`, excluding the event itself.
fn ancestors(events: &[TraceEvent], i: usize) -> Vec<&TraceEvent> {
    let by_id: BTreeMap<&str, &TraceEvent> =
        events[..i].iter().map(|e| (e.event_id.as_str(), e)).collect();
    let mut seen = BTreeSet::new();
    let mut stack: Vec<&str> = events[i].evidence_refs.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        if let Some(e) = by_id.get(id) {
            out.push(*e);
            stack.extend(e.evidence_refs.iter().map(String::as_str));
        }
    }
    out
}

fn info_flow(f: &InfoFlowSpec, events: &[TraceEvent]) -> Option<Violation> {
    for (i, e) in events.iter().enumerate() {
        if let Some(class) = &e.data_class {
            if !f.authorizes(e) {
                let why = if f.pending_for(e) { "pending review" } else { "unauthorized" };
                return at(
                    events,
                    i,
                    format!(
                        "access to `{class}` by ({}, {}) for {:?} is {why}",
                        e.principal, e.component, e.purpose
                    ),
                );
            }
        }
        if !f.needs_provenance() {
            continue;
        }
        let sources = ancestors(events, i);
        if f.purpose_binding {
            for src in sources.iter().filter(|s| s.kind == EventKind::Retrieval) {
                if let Some(p) = &src.purpose {
                    if e.purpose.as_ref() != Some(p) {
                        return at(
                            events,
                            i,
                            format!("uses `{}` retrieved for purpose `{p}`", src.event_id),
                        );
                    }
                }
            }
        }
        if e.kind == EventKind::Release {
            let restricted = e
                .data_class
                .iter()
                .chain(sources.iter().filter_map(|s| s.data_class.as_ref()))
                .find(|c| f.release_constraints.contains(*c));
            if let Some(c) = restricted {
                return at(events, i, format!("release depends on restricted class `{c}`"));
            }
        }
    }
    None
}

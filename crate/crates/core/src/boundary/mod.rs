//! Certification-boundary measures over a generator distribution.
//!
//! Each generated trace lands in one of four cells (permitted or not by the
//! oracle, certified or not by the certifier under test). From the cell masses:
//! `gap = P(¬perm)`, `u = P(¬perm ∧ cert)`, `m = P(perm ∧ ¬cert)`, `y = P(cert)`,
//! `rho = u / y`, `recall = 1 − m / (1 − gap)` and `d = u + m`.

pub mod generator;

use std::fmt::Write as _;
use std::ops::Add;

use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::certifier::{certify_with_ledger, CertifierConfig, CertifyError};
use crate::ledger::Ledger;
use crate::memory::{MemoryClass, MemoryState};
use crate::policy::{evaluate, PolicySystem, SpecError};
use crate::trace::ProposedTrace;

pub use generator::{
    enumerate, parse_ratio, ratio_string, sample, Chooser, GeneratorSpec, Knobs, Mode, Prob,
    RngChooser, Template, WeightedTemplate, QUERY_BUDGET,
};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum BoundaryError {
    #[error("invalid generator: {0}")]
    InvalidGenerator(String),
    #[error("generator support exceeds {limit} traces")]
    UniverseTooLarge { limit: u64 },
    #[error("generator is in {0} mode")]
    WrongMode(&'static str),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub permitted: bool,
    pub certified: bool,
}

/// Oracle verdict and certifier verdict for one trace, with fresh memory.
pub fn classify(trace: &ProposedTrace, policy: &PolicySystem, cfg: &CertifierConfig) -> Result<Cell, BoundaryError> {
    let permitted = evaluate(policy, trace)?.permitted;
    let memory = MemoryState::new(policy);
    let ledger = (cfg.memory_class == MemoryClass::M3Persistent).then(Ledger::in_memory);
    let verdict = certify_with_ledger(trace, policy, &memory, ledger.as_ref(), cfg)?;
    Ok(Cell {
        permitted,
        certified: verdict.is_certified(),
    })
}

/// Per-cell totals; `T` is a count in sample mode and a probability in exact mode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cells<T> {
    pub permitted_certified: T,
    pub permitted_uncertified: T,
    pub impermissible_certified: T,
    pub impermissible_uncertified: T,
}

impl<T: Clone + Zero> Cells<T> {
    fn single(cell: Cell, mass: T) -> Self {
        let mut c = Cells {
            permitted_certified: T::zero(),
            permitted_uncertified: T::zero(),
            impermissible_certified: T::zero(),
            impermissible_uncertified: T::zero(),
        };
        *match (cell.permitted, cell.certified) {
            (true, true) => &mut c.permitted_certified,
            (true, false) => &mut c.permitted_uncertified,
            (false, true) => &mut c.impermissible_certified,
            (false, false) => &mut c.impermissible_uncertified,
        } = mass;
        c
    }

    fn zero() -> Self {
        Cells {
            permitted_certified: T::zero(),
            permitted_uncertified: T::zero(),
            impermissible_certified: T::zero(),
            impermissible_uncertified: T::zero(),
        }
    }
}

impl<T: Add<Output = T>> Add for Cells<T> {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Cells {
            permitted_certified: self.permitted_certified + o.permitted_certified,
            permitted_uncertified: self.permitted_uncertified + o.permitted_uncertified,
            impermissible_certified: self.impermissible_certified + o.impermissible_certified,
            impermissible_uncertified: self.impermissible_uncertified + o.impermissible_uncertified,
        }
    }
}

fn ser_ratio<S: Serializer>(r: &BigRational, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&ratio_string(r))
}

fn ser_cells<S: Serializer>(c: &Cells<BigRational>, s: S) -> Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    struct Out {
        permitted_certified: String,
        permitted_uncertified: String,
        impermissible_certified: String,
        impermissible_uncertified: String,
    }
    Out {
        permitted_certified: ratio_string(&c.permitted_certified),
        permitted_uncertified: ratio_string(&c.permitted_uncertified),
        impermissible_certified: ratio_string(&c.impermissible_certified),
        impermissible_uncertified: ratio_string(&c.impermissible_uncertified),
    }
    .serialize(s)
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson(k: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (lo_exact, hi_exact) = (k == 0, k == n);
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = if lo_exact { 0.0 } else { (center - half).max(0.0) };
    let hi = if hi_exact { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measure {
    #[serde(serialize_with = "ser_ratio")]
    pub value: BigRational,
    pub approx: f64,
    /// Wilson 95% interval; absent for exact values.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci95: Option<(f64, f64)>,
}

impl Measure {
    fn exact(value: BigRational) -> Self {
        Measure {
            approx: value.to_f64().unwrap_or(f64::NAN),
            value,
            ci95: None,
        }
    }

    fn estimated(k: u64, n: u64) -> Self {
        let value = BigRational::new(k.into(), n.into());
        Measure {
            approx: value.to_f64().unwrap_or(f64::NAN),
            value,
            ci95: Some(wilson(k, n)),
        }
    }

    /// Half-width of the interval, zero for exact values.
    pub fn half_width(&self) -> f64 {
        self.ci95.map_or(0.0, |(lo, hi)| (hi - lo) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    Exact,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryReport {
    pub mode: ReportMode,
    /// Sample size, or number of traces in the enumerated support.
    pub n: u64,
    #[serde(serialize_with = "ser_cells")]
    pub cells: Cells<BigRational>,
    pub gap: Measure,
    pub u: Measure,
    pub m: Measure,
    pub y: Measure,
    /// Undefined when `y = 0`.
    pub rho: Option<Measure>,
    /// Undefined when `gap = 1`.
    pub recall: Option<Measure>,
    pub d: Measure,
    #[serde(serialize_with = "ser_ratio")]
    pub identity_residual: BigRational,
}

impl BoundaryReport {
    fn from_masses(cells: Cells<BigRational>, n: u64) -> Self {
        let gap = &cells.impermissible_certified + &cells.impermissible_uncertified;
        let u = cells.impermissible_certified.clone();
        let m = cells.permitted_uncertified.clone();
        let y = &cells.permitted_certified + &cells.impermissible_certified;
        let rho = (!y.is_zero()).then(|| Measure::exact(&u / &y));
        let recall =
            (!gap.is_one()).then(|| Measure::exact(BigRational::one() - &m / (BigRational::one() - &gap)));
        let residual = (&y - (BigRational::one() - &gap - &m + &u)).abs();
        BoundaryReport {
            mode: ReportMode::Exact,
            n,
            d: Measure::exact(&u + &m),
            gap: Measure::exact(gap),
            u: Measure::exact(u),
            m: Measure::exact(m),
            y: Measure::exact(y),
            rho,
            recall,
            identity_residual: residual,
            cells,
        }
    }

    fn from_counts(c: Cells<u64>) -> Self {
        let n = c.permitted_certified + c.permitted_uncertified + c.impermissible_certified + c.impermissible_uncertified;
        let frac = |k: u64| BigRational::new(k.into(), n.into());
        let masses = Cells {
            permitted_certified: frac(c.permitted_certified),
            permitted_uncertified: frac(c.permitted_uncertified),
            impermissible_certified: frac(c.impermissible_certified),
            impermissible_uncertified: frac(c.impermissible_uncertified),
        };
        let mut r = BoundaryReport::from_masses(masses, n);
        let imperm = c.impermissible_certified + c.impermissible_uncertified;
        let perm = n - imperm;
        let certified = c.permitted_certified + c.impermissible_certified;
        r.mode = ReportMode::Sample;
        r.gap = Measure::estimated(imperm, n);
        r.u = Measure::estimated(c.impermissible_certified, n);
        r.m = Measure::estimated(c.permitted_uncertified, n);
        r.y = Measure::estimated(certified, n);
        r.d = Measure::estimated(c.impermissible_certified + c.permitted_uncertified, n);
        // Conditional proportions: rho among certified, recall among permitted.
        r.rho = (certified > 0).then(|| Measure::estimated(c.impermissible_certified, certified));
        r.recall = (perm > 0).then(|| Measure::estimated(c.permitted_certified, perm));
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            ReportMode::Exact => "exact",
            ReportMode::Sample => "sample",
        };
        let _ = writeln!(out, "mode {mode}, n = {}", self.n);
        let _ = writeln!(out, "{:<8} {:>14} {:>10}  ci95", "measure", "value", "approx");
        let row = |out: &mut String, name: &str, m: Option<&Measure>| {
            let _ = match m {
                None => writeln!(out, "{name:<8} {:>14}", "undefined"),
                Some(m) => {
                    let ci = m
                        .ci95
                        .map(|(lo, hi)| format!("[{lo:.4}, {hi:.4}]"))
                        .unwrap_or_else(|| "exact".into());
                    let v = ratio_string(&m.value);
                    let v = if v.len() > 14 { "…".to_string() } else { v };
                    writeln!(out, "{name:<8} {v:>14} {:>10.6}  {ci}", m.approx)
                }
            };
        };
        row(&mut out, "gap", Some(&self.gap));
        row(&mut out, "u", Some(&self.u));
        row(&mut out, "m", Some(&self.m));
        row(&mut out, "y", Some(&self.y));
        row(&mut out, "rho", self.rho.as_ref());
        row(&mut out, "recall", self.recall.as_ref());
        row(&mut out, "d", Some(&self.d));
        let _ = writeln!(out, "identity residual {}", ratio_string(&self.identity_residual));
        out
    }
}

/// Seeded Monte-Carlo estimate. Traces are drawn and classified in parallel;
/// the result does not depend on thread count or scheduling.
pub fn estimate_measures(
    gen: &GeneratorSpec,
    cfg: &CertifierConfig,
    policy: &PolicySystem,
) -> Result<BoundaryReport, BoundaryError> {
    let Mode::Sample(n) = gen.mode else {
        return Err(BoundaryError::WrongMode("enumerate"));
    };
    gen.validate()?;
    let counts = (0..n)
        .into_par_iter()
        .map(|i| classify(&sample(gen, &policy.version, i), policy, cfg).map(|c| Cells::single(c, 1u64)))
        .try_reduce(Cells::zero, |a, b| Ok(a + b))?;
    Ok(BoundaryReport::from_counts(counts))
}

/// Exact measures by enumerating the generator support with rational masses.
pub fn exact_measures(
    gen: &GeneratorSpec,
    cfg: &CertifierConfig,
    policy: &PolicySystem,
) -> Result<BoundaryReport, BoundaryError> {
    let Mode::Enumerate(max) = gen.mode else {
        return Err(BoundaryError::WrongMode("sample"));
    };
    let universe = enumerate(gen, &policy.version, max)?;
    let masses = universe
        .par_iter()
        .map(|(t, p)| classify(t, policy, cfg).map(|c| Cells::single(c, p.clone())))
        .try_reduce(Cells::zero, |a, b| Ok(a + b))?;
    Ok(BoundaryReport::from_masses(masses, universe.len() as u64))
}

/// Dispatches on the generator mode.
pub fn measures(
    gen: &GeneratorSpec,
    cfg: &CertifierConfig,
    policy: &PolicySystem,
) -> Result<BoundaryReport, BoundaryError> {
    match gen.mode {
        Mode::Sample(_) => estimate_measures(gen, cfg, policy),
        Mode::Enumerate(_) => exact_measures(gen, cfg, policy),
    }
}

/// The first `n` sampled traces, in index order.
pub fn sample_traces(gen: &GeneratorSpec, policy_version: &str, n: u64) -> Vec<ProposedTrace> {
    (0..n)
        .into_par_iter()
        .map(|i| sample(gen, policy_version, i))
        .collect()
}

/// Fraction of `traces` the oracle rejects.
pub fn gap_of(traces: &[ProposedTrace], policy: &PolicySystem) -> Result<BigRational, BoundaryError> {
    if traces.is_empty() {
        return Err(BoundaryError::InvalidGenerator("empty sample".into()));
    }
    let bad = traces
        .par_iter()
        .map(|t| evaluate(policy, t).map(|v| u64::from(!v.permitted)))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(BigRational::new(bad.into(), (traces.len() as u64).into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub mode: ReportMode,
    pub n: u64,
    /// Mass certified under the old policy.
    pub certified: Measure,
    /// Mass certified under the old policy and rejected by the new one.
    pub drift: Measure,
}

/// Mass of traces certified under `old` that `new` no longer permits.
pub fn drift_eval(
    gen: &GeneratorSpec,
    cfg: &CertifierConfig,
    old: &PolicySystem,
    new: &PolicySystem,
) -> Result<DriftReport, BoundaryError> {
    let judge = |t: &ProposedTrace| -> Result<(bool, bool), BoundaryError> {
        let certified = classify(t, old, cfg)?.certified;
        let drifted = certified && !evaluate(new, t)?.permitted;
        Ok((certified, drifted))
    };
    match gen.mode {
        Mode::Enumerate(max) => {
            let universe = enumerate(gen, &old.version, max)?;
            let (c, d) = universe
                .par_iter()
                .map(|(t, p)| {
                    judge(t).map(|(c, d)| {
                        let pick = |b: bool| if b { p.clone() } else { BigRational::zero() };
                        (pick(c), pick(d))
                    })
                })
                .try_reduce(
                    || (BigRational::zero(), BigRational::zero()),
                    |a, b| Ok((a.0 + b.0, a.1 + b.1)),
                )?;
            Ok(DriftReport {
                mode: ReportMode::Exact,
                n: universe.len() as u64,
                certified: Measure::exact(c),
                drift: Measure::exact(d),
            })
        }
        Mode::Sample(n) => {
            gen.validate()?;
            let (c, d) = (0..n)
                .into_par_iter()
                .map(|i| judge(&sample(gen, &old.version, i)).map(|(c, d)| (u64::from(c), u64::from(d))))
                .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
            Ok(DriftReport {
                mode: ReportMode::Sample,
                n,
                certified: Measure::estimated(c, n),
                drift: Measure::estimated(d, n),
            })
        }
    }
}

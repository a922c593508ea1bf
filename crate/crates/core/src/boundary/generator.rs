//! Template-based trace generator with exact probabilities.
//!
//! Every random decision goes through a [`Chooser`], so the same template code
//! drives seeded sampling and exhaustive enumeration of the support.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::trace::{approval_subject_hash, EventKind, ProposedTrace, Scalar, Tier, TraceEvent};

use super::BoundaryError;

/// Per-resource query allowance the query templates are calibrated against.
pub const QUERY_BUDGET: usize = 5;

/// Exact probability or weight. Reads `"2/7"`, `"0.25"`, `0.25` or `1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prob(pub BigRational);

impl Prob {
    pub fn zero() -> Self {
        Prob(BigRational::zero())
    }

    pub fn one() -> Self {
        Prob(BigRational::one())
    }

    pub fn new(numer: i64, denom: i64) -> Self {
        Prob(BigRational::new(numer.into(), denom.into()))
    }
}

impl Default for Prob {
    fn default() -> Self {
        Prob::zero()
    }
}

pub fn parse_ratio(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: BigInt = n.trim().parse().ok()?;
        let d: BigInt = d.trim().parse().ok()?;
        return (!d.is_zero()).then(|| BigRational::new(n, d));
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits: BigInt = format!("{int}{frac}").parse().ok()?;
    let denom = num_traits::pow(BigInt::from(10), frac.len());
    let r = BigRational::new(digits, denom);
    Some(if neg { -r } else { r })
}

pub fn ratio_string(r: &BigRational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

impl fmt::Display for Prob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&ratio_string(&self.0))
    }
}

impl FromStr for Prob {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_ratio(s)
            .map(Prob)
            .ok_or_else(|| format!("`{s}` is not a rational number"))
    }
}

impl Serialize for Prob {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Prob {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(serde_json::Number),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(s) => s,
            Raw::Number(n) => n.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// A run of queries against one resource.
    QueryBurst,
    /// Irreversible 1000 bp orders against one global exposure limit.
    ExposureOrders,
    /// A payment, usually preceded by a bound approval.
    ApprovedPayment,
    /// Two retrievals, a computation over them, and a claim citing it.
    SourcedClaim,
}

impl Template {
    /// Longest trace the template can emit under `horizon`.
    fn max_len(self, horizon: usize) -> usize {
        match self {
            Template::QueryBurst => horizon,
            Template::ExposureOrders => 3,
            Template::ApprovedPayment => 2,
            Template::SourcedClaim => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTemplate {
    pub template: Template,
    pub weight: Prob,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Knobs {
    pub p_over_budget: Prob,
    pub p_over_exposure: Prob,
    pub p_missing_approval: Prob,
    pub p_unauthorized_source: Prob,
    pub p_bad_compute: Prob,
}

impl Knobs {
    fn all(&self) -> [(&'static str, &Prob); 5] {
        [
            ("p_over_budget", &self.p_over_budget),
            ("p_over_exposure", &self.p_over_exposure),
            ("p_missing_approval", &self.p_missing_approval),
            ("p_unauthorized_source", &self.p_unauthorized_source),
            ("p_bad_compute", &self.p_bad_compute),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sample(u64),
    /// Enumerate the support, failing if it has more than this many traces.
    Enumerate(u64),
}

fn default_tier() -> Tier {
    Tier::C2
}

fn default_proposer() -> String {
    "agent".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub templates: Vec<WeightedTemplate>,
    #[serde(default)]
    pub knobs: Knobs,
    pub horizon: usize,
    pub mode: Mode,
    #[serde(default = "default_tier")]
    pub declared_tier: Tier,
    #[serde(default = "default_proposer")]
    pub proposer: String,
}

impl GeneratorSpec {
    pub fn new(seed: u64, templates: Vec<(Template, Prob)>, horizon: usize, mode: Mode) -> Self {
        GeneratorSpec {
            seed,
            templates: templates
                .into_iter()
                .map(|(template, weight)| WeightedTemplate { template, weight })
                .collect(),
            knobs: Knobs::default(),
            horizon,
            mode,
            declared_tier: default_tier(),
            proposer: default_proposer(),
        }
    }

    /// Every trace a single template emits is a query run of length `1..=horizon`.
    pub fn query_universe(horizon: usize, p_over_budget: Prob, mode: Mode) -> Self {
        let mut g = GeneratorSpec::new(0, vec![(Template::QueryBurst, Prob::one())], horizon, mode);
        g.knobs.p_over_budget = p_over_budget;
        g
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BoundaryError> {
        let bad = |m: String| Err(BoundaryError::InvalidGenerator(m));
        if self.templates.is_empty() {
            return bad("at least one template is required".into());
        }
        let mut total = BigRational::zero();
        for t in &self.templates {
            if t.weight.0.is_negative() {
                return bad(format!("weight of {:?} is negative", t.template));
            }
            total += &t.weight.0;
        }
        if !total.is_one() {
            return bad(format!("template weights sum to {}, not 1", ratio_string(&total)));
        }
        for (name, p) in self.knobs.all() {
            if p.0.is_negative() || p.0 > BigRational::one() {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        for t in self.templates.iter().filter(|t| !t.weight.0.is_zero()) {
            if t.template.max_len(self.horizon) > self.horizon {
                return bad(format!("{:?} needs a horizon of at least {}", t.template, t.template.max_len(0)));
            }
        }
        if self.uses(Template::QueryBurst)
            && !self.knobs.p_over_budget.0.is_zero()
            && self.horizon <= QUERY_BUDGET
        {
            return bad(format!(
                "p_over_budget > 0 needs a horizon above the budget of {QUERY_BUDGET}"
            ));
        }
        if let Mode::Sample(0) = self.mode {
            return bad("sample size must be at least 1".into());
        }
        // Sampling draws integers below a common denominator; make sure it fits.
        let weights: Vec<BigRational> = self.templates.iter().map(|t| t.weight.0.clone()).collect();
        integer_weights(&weights)?;
        for (name, p) in self.knobs.all() {
            integer_weights(&[BigRational::one() - &p.0, p.0.clone()])
                .map_err(|_| BoundaryError::InvalidGenerator(format!("{name} has too large a denominator")))?;
        }
        Ok(())
    }

    fn uses(&self, t: Template) -> bool {
        self.templates
            .iter()
            .any(|w| w.template == t && !w.weight.0.is_zero())
    }
}

/// Source of every random decision a template makes.
pub trait Chooser {
    /// Index `i` with probability `weights[i] / Σ weights`. Zero weights are never chosen.
    fn pick(&mut self, weights: &[BigRational]) -> usize;

    fn flip(&mut self, p: &Prob) -> bool {
        self.pick(&[BigRational::one() - &p.0, p.0.clone()]) == 1
    }
}

fn integer_weights(weights: &[BigRational]) -> Result<(Vec<u128>, u128), BoundaryError> {
    let mut denom = BigInt::one();
    for w in weights {
        let d = w.denom();
        let g = num_integer_gcd(&denom, d);
        denom = &denom / g * d;
    }
    let scaled: Option<Vec<u128>> = weights
        .iter()
        .map(|w| (w.numer() * (&denom / w.denom())).to_u128())
        .collect();
    let scaled = scaled.ok_or_else(|| BoundaryError::InvalidGenerator("weights do not fit in 128 bits".into()))?;
    let total = scaled
        .iter()
        .try_fold(0u128, |acc, w| acc.checked_add(*w))
        .ok_or_else(|| BoundaryError::InvalidGenerator("weights do not fit in 128 bits".into()))?;
    Ok((scaled, total))
}

fn num_integer_gcd(a: &BigInt, b: &BigInt) -> BigInt {
    let (mut a, mut b) = (a.abs(), b.abs());
    while !b.is_zero() {
        let r = &a % &b;
        a = b;
        b = r;
    }
    a
}

/// Seeded sampler; exact for rational weights.
pub struct RngChooser(pub ChaCha8Rng);

impl RngChooser {
    /// Independent stream per trace index, so samples do not depend on scheduling.
    pub fn for_index(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        RngChooser(rng)
    }
}

impl Chooser for RngChooser {
    fn pick(&mut self, weights: &[BigRational]) -> usize {
        let (scaled, total) = integer_weights(weights).expect("weights validated with the generator");
        assert!(total > 0, "all weights are zero");
        let mut x = self.0.random_range(0..total);
        for (i, w) in scaled.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        unreachable!("draw below the total lands in some bucket")
    }
}

/// Replays a fixed prefix of choices, then takes the first live option, recording each step.
struct ScriptChooser<'a> {
    prefix: &'a [usize],
    taken: Vec<(usize, Vec<BigRational>)>,
}

impl Chooser for ScriptChooser<'_> {
    fn pick(&mut self, weights: &[BigRational]) -> usize {
        let at = self.taken.len();
        let i = match self.prefix.get(at) {
            Some(i) => *i,
            None => weights
                .iter()
                .position(|w| !w.is_zero())
                .expect("some weight is positive"),
        };
        self.taken.push((i, weights.to_vec()));
        i
    }
}

/// Every trace in the support with its exact probability, in a fixed order.
pub fn enumerate(
    gen: &GeneratorSpec,
    policy_version: &str,
    max: u64,
) -> Result<Vec<(ProposedTrace, BigRational)>, BoundaryError> {
    gen.validate()?;
    let mut out = Vec::new();
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        if out.len() as u64 >= max {
            return Err(BoundaryError::UniverseTooLarge { limit: max });
        }
        let mut ch = ScriptChooser {
            prefix: &prefix,
            taken: Vec::new(),
        };
        let trace = generate(gen, policy_version, &format!("gen-{}", out.len()), &mut ch);
        let mut mass = BigRational::one();
        for (i, ws) in &ch.taken {
            let total: BigRational = ws.iter().sum();
            mass *= &ws[*i] / total;
        }
        // Deepest siblings are popped first, giving lexicographic order over choices.
        let mut branches = Vec::new();
        for (depth, (chosen, ws)) in ch.taken.iter().enumerate().skip(prefix.len()).rev() {
            for (alt, w) in ws.iter().enumerate().skip(chosen + 1) {
                if !w.is_zero() {
                    let mut p: Vec<usize> = ch.taken[..depth].iter().map(|(i, _)| *i).collect();
                    p.push(alt);
                    branches.push(p);
                }
            }
        }
        stack.extend(branches.into_iter().rev());
        out.push((trace, mass));
    }
    Ok(out)
}

/// The `index`-th sampled trace; depends only on the seed and the index.
pub fn sample(gen: &GeneratorSpec, policy_version: &str, index: u64) -> ProposedTrace {
    let mut ch = RngChooser::for_index(gen.seed, index);
    generate(gen, policy_version, &format!("gen-{index}"), &mut ch)
}

pub fn generate(gen: &GeneratorSpec, policy_version: &str, trace_id: &str, ch: &mut dyn Chooser) -> ProposedTrace {
    let weights: Vec<BigRational> = gen.templates.iter().map(|t| t.weight.0.clone()).collect();
    let template = gen.templates[ch.pick(&weights)].template;
    let k = &gen.knobs;
    let agent = gen.proposer.as_str();
    let events = match template {
        Template::QueryBurst => {
            let over = ch.flip(&k.p_over_budget);
            let lengths: Vec<usize> = if over {
                (QUERY_BUDGET + 1..=gen.horizon).collect()
            } else {
                (1..=QUERY_BUDGET.min(gen.horizon)).collect()
            };
            let len = lengths[ch.pick(&vec![BigRational::one(); lengths.len()])];
            (1..=len)
                .map(|i| {
                    TraceEvent::new(format!("q{i}"), i as u64, EventKind::Query, agent, "search")
                        .with_resource("R1")
                })
                .collect()
        }
        Template::ExposureOrders => {
            let n = if ch.flip(&k.p_over_exposure) {
                3
            } else {
                1 + ch.pick(&[BigRational::one(), BigRational::one()])
            };
            (1..=n)
                .map(|i| {
                    TraceEvent::new(format!("o{i}"), i as u64, EventKind::ExecutionCall, agent, "broker")
                        .with_resource("ACME")
                        .with_delta("exposure", 1000)
                        .irreversible()
                })
                .collect()
        }
        Template::ApprovedPayment => {
            let missing = ch.flip(&k.p_missing_approval);
            let pay = TraceEvent::new("pay", 2, EventKind::ExecutionCall, agent, "payments")
                .with_param("amount", Scalar::bp(50_000))
                .irreversible();
            let mut t = ProposedTrace::new(trace_id, agent, gen.declared_tier, policy_version, vec![pay]);
            if !missing {
                let subject = approval_subject_hash(&t).to_hex();
                let ap = TraceEvent::new("ap", 1, EventKind::Approval, "controller", "desk")
                    .with_param("binds", Scalar::str(subject));
                t.events.insert(0, ap);
            }
            return t;
        }
        Template::SourcedClaim => {
            let source = if ch.flip(&k.p_unauthorized_source) {
                "scraper"
            } else {
                "filings"
            };
            let claimed = if ch.flip(&k.p_bad_compute) { 42 } else { 41 };
            let retrieval = |id: &str, tick: u64, component: &str, value: i64| {
                TraceEvent::new(id, tick, EventKind::Retrieval, agent, component)
                    .with_data_class("financials")
                    .with_purpose("analysis")
                    .with_param("value", Scalar::Int(value))
            };
            vec![
                retrieval("r1", 1, source, 1200),
                retrieval("r2", 2, "filings", 1159),
                TraceEvent::new("c", 3, EventKind::Computation, agent, "calc")
                    .with_purpose("analysis")
                    .with_param("expr", Scalar::str("@r1 - @r2"))
                    .with_param("value", Scalar::Int(claimed))
                    .with_evidence(["r1", "r2"]),
                TraceEvent::new("cl", 4, EventKind::Claim, agent, "report")
                    .with_purpose("analysis")
                    .with_param("value", Scalar::Int(claimed))
                    .with_evidence(["c"]),
            ]
        }
    };
    ProposedTrace::new(trace_id, agent, gen.declared_tier, policy_version, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn ratios_parse_exactly() {
        assert_eq!(parse_ratio("2/7"), Some(r(2, 7)));
        assert_eq!(parse_ratio("0.125"), Some(r(1, 8)));
        assert_eq!(parse_ratio("1"), Some(r(1, 1)));
        assert_eq!(parse_ratio("-.5"), Some(r(-1, 2)));
        assert_eq!(parse_ratio("1/0"), None);
        assert_eq!(parse_ratio("abc"), None);
        let p: Prob = serde_json::from_str("0.3").unwrap();
        assert_eq!(p.0, r(3, 10));
        assert_eq!(serde_json::to_string(&Prob::new(2, 7)).unwrap(), "\"2/7\"");
    }

    #[test]
    fn query_universe_is_uniform_over_lengths() {
        let g = GeneratorSpec::query_universe(7, Prob::new(2, 7), Mode::Enumerate(100));
        let u = enumerate(&g, "v", 100).unwrap();
        let lens: Vec<usize> = u.iter().map(|(t, _)| t.events.len()).collect();
        assert_eq!(lens, vec![1, 2, 3, 4, 5, 6, 7]);
        assert!(u.iter().all(|(_, p)| *p == r(1, 7)));
    }

    #[test]
    fn enumeration_masses_sum_to_one() {
        let mut g = GeneratorSpec::new(
            1,
            vec![
                (Template::QueryBurst, Prob::new(1, 4)),
                (Template::ExposureOrders, Prob::new(1, 4)),
                (Template::ApprovedPayment, Prob::new(1, 4)),
                (Template::SourcedClaim, Prob::new(1, 4)),
            ],
            7,
            Mode::Enumerate(1000),
        );
        g.knobs.p_over_budget = Prob::new(1, 3);
        g.knobs.p_over_exposure = Prob::new(1, 5);
        g.knobs.p_missing_approval = Prob::new(1, 10);
        g.knobs.p_unauthorized_source = Prob::new(1, 2);
        g.knobs.p_bad_compute = Prob::new(1, 2);
        let u = enumerate(&g, "v", 1000).unwrap();
        let total: BigRational = u.iter().map(|(_, p)| p.clone()).sum();
        assert!(total.is_one());
        assert_eq!(u.len(), 7 + 3 + 2 + 4);
        assert!(matches!(
            enumerate(&g, "v", 5),
            Err(BoundaryError::UniverseTooLarge { limit: 5 })
        ));
    }

    #[test]
    fn sampling_matches_zero_weights_and_is_reproducible() {
        let g = GeneratorSpec::query_universe(7, Prob::zero(), Mode::Sample(10));
        for i in 0..200 {
            assert!(sample(&g, "v", i).events.len() <= QUERY_BUDGET);
        }
        assert_eq!(sample(&g, "v", 3), sample(&g, "v", 3));
    }

    #[test]
    fn validation() {
        let mut g = GeneratorSpec::query_universe(5, Prob::new(1, 2), Mode::Sample(1));
        assert!(g.validate().is_err());
        g.horizon = 6;
        g.validate().unwrap();
        g.templates[0].weight = Prob::new(1, 2);
        assert!(g.validate().is_err());
        let mut g = GeneratorSpec::query_universe(7, Prob::new(3, 2), Mode::Sample(1));
        assert!(g.validate().is_err());
        g.knobs.p_over_budget = Prob::one();
        g.mode = Mode::Sample(0);
        assert!(g.validate().is_err());
    }

    #[test]
    fn generated_traces_validate() {
        let mut g = GeneratorSpec::new(
            9,
            vec![
                (Template::ExposureOrders, Prob::new(1, 3)),
                (Template::ApprovedPayment, Prob::new(1, 3)),
                (Template::SourcedClaim, Prob::new(1, 3)),
            ],
            4,
            Mode::Enumerate(100),
        );
        g.knobs.p_missing_approval = Prob::new(1, 2);
        for (t, _) in enumerate(&g, "v", 100).unwrap() {
            t.validate().unwrap();
        }
    }
}

//! Shock scenarios for the future-period data-generating process.
//!
//! A scenario is a set of mutually exclusive sub-scenarios plus a shock-free
//! remainder. Each bootstrap iteration is assigned one branch; within a shocked
//! branch every effect picks a random subset of matching future units and
//! lowers their prices by a random fraction `delta`, i.e. adds
//! `ln(1 - delta)` to the log price.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! [scenario]
//! name = "coastal"
//! allocation = "fixed_fractions"   # or "bernoulli"
//! fractions = [0.1]                # optional, defaults to the probabilities
//!
//! [[sub_scenario]]
//! probability = 0.1
//!
//! [[sub_scenario.effect]]
//! affected_fraction = 0.25
//! selector = { region = "south" }  # region, bedrooms, sections, subpopulation or all = true
//! distribution = { type = "uniform", lo = 0.02, hi = 0.08 }
//! ```

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Bedrooms, Region, Sections, UnitTags};
use crate::rng::{scope_hash, stream, StreamRng, Substream};

/// Largest decrease a single draw may impose; keeps `1 - delta` positive.
pub const MAX_DECREASE: f64 = 0.999;

/// Names of the built-in scenarios in reporting order.
pub const BUILTIN_NAMES: [&str; 9] = ["s0", "s1", "s11", "s2", "s21", "s3", "s31", "s4", "s41"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// Each iteration independently draws its branch from the sub-scenario probabilities.
    Bernoulli,
    /// Deterministic branch counts from `fractions * B`, randomly placed over iterations.
    FixedFractions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecreaseDistribution {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl DecreaseDistribution {
    /// Normal decrease whose standard deviation is a third of its mean.
    pub fn normal_third(mean: f64) -> Self {
        DecreaseDistribution::Normal { mean, sd: mean / 3.0 }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DecreaseDistribution::Normal { mean, sd } => {
                if !(mean.is_finite() && mean < 1.0 && sd.is_finite() && sd >= 0.0) {
                    return Err(Error::Scenario(format!("invalid normal decrease (mean {mean}, sd {sd})")));
                }
            }
            DecreaseDistribution::Uniform { lo, hi } => {
                if !(0.0 <= lo && lo <= hi && hi < 1.0) {
                    return Err(Error::Scenario(format!("uniform decrease needs 0 <= lo <= hi < 1, got [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }

    /// One decrease, truncated at [`MAX_DECREASE`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let delta = match *self {
            DecreaseDistribution::Normal { mean, sd } => {
                if sd == 0.0 {
                    mean
                } else {
                    Normal::new(mean, sd).expect("validated").sample(rng)
                }
            }
            DecreaseDistribution::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    Uniform::new_inclusive(lo, hi).expect("validated").sample(rng)
                }
            }
        };
        delta.min(MAX_DECREASE)
    }
}

/// Conjunction of tag conditions; empty means every unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bedrooms: Option<Bedrooms>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sections: Option<Sections>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subpopulation: Option<u8>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub all: bool,
}

impl Selector {
    pub fn all() -> Self {
        Self { all: true, ..Default::default() }
    }

    pub fn region(region: Region) -> Self {
        Self { region: Some(region), ..Default::default() }
    }

    pub fn bedrooms(bedrooms: Bedrooms) -> Self {
        Self { bedrooms: Some(bedrooms), ..Default::default() }
    }

    pub fn matches(&self, tags: &UnitTags) -> bool {
        self.region.is_none_or(|r| tags.region == Some(r))
            && self.bedrooms.is_none_or(|b| tags.bedrooms == Some(b))
            && self.sections.is_none_or(|s| tags.sections == Some(s))
            && self
                .subpopulation
                .is_none_or(|k| tags.subpopulation.map(|s| s.number()) == Some(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShockEffect {
    pub selector: Selector,
    pub affected_fraction: f64,
    pub distribution: DecreaseDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubScenario {
    pub probability: f64,
    #[serde(default, rename = "effect")]
    pub effects: Vec<ShockEffect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockScenario {
    pub name: String,
    pub sub_scenarios: Vec<SubScenario>,
    pub allocation: Allocation,
    /// Share of iterations per sub-scenario under fixed allocation.
    pub fractions: Option<Vec<f64>>,
}

/// Branch assigned to one bootstrap iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    ShockFree,
    Sub(usize),
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::ShockFree => f.write_str("none"),
            Branch::Sub(k) => write!(f, "sub{}", k + 1),
        }
    }
}

impl ShockScenario {
    pub fn shock_free(name: &str) -> Self {
        Self {
            name: name.to_string(),
            sub_scenarios: Vec::new(),
            allocation: Allocation::FixedFractions,
            fractions: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.name.trim().is_empty() {
            problems.push("scenario.name is empty".to_string());
        }
        let mut total_p = 0.0;
        for (k, sub) in self.sub_scenarios.iter().enumerate() {
            if !(0.0..=1.0).contains(&sub.probability) {
                problems.push(format!("sub_scenario[{k}].probability = {} outside [0, 1]", sub.probability));
            }
            total_p += sub.probability;
            for (e, eff) in sub.effects.iter().enumerate() {
                if !(0.0..=1.0).contains(&eff.affected_fraction) {
                    problems.push(format!(
                        "sub_scenario[{k}].effect[{e}].affected_fraction = {} outside [0, 1]",
                        eff.affected_fraction
                    ));
                }
                if let Err(err) = eff.distribution.validate() {
                    problems.push(format!("sub_scenario[{k}].effect[{e}].distribution: {err}"));
                }
                if let Some(s) = eff.selector.subpopulation {
                    if !(1..=9).contains(&s) {
                        problems.push(format!("sub_scenario[{k}].effect[{e}].selector.subpopulation = {s}"));
                    }
                }
            }
        }
        if self.allocation == Allocation::Bernoulli && total_p > 1.0 + 1e-12 {
            problems.push(format!("sub-scenario probabilities sum to {total_p} > 1"));
        }
        if let Some(fr) = &self.fractions {
            if fr.len() != self.sub_scenarios.len() {
                problems.push(format!(
                    "scenario.fractions has {} entries for {} sub-scenarios",
                    fr.len(),
                    self.sub_scenarios.len()
                ));
            }
            if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
                problems.push("scenario.fractions entries must lie in [0, 1]".to_string());
            }
            let sum: f64 = fr.iter().sum();
            if sum > 1.0 + 1e-12 {
                problems.push(format!("scenario.fractions sum to {sum} > 1"));
            }
        } else if self.allocation == Allocation::FixedFractions && total_p > 1.0 + 1e-12 {
            problems.push(format!("sub-scenario probabilities sum to {total_p} > 1"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Scenario(problems.join("; ")))
        }
    }

    /// Iteration shares of the sub-scenarios (fixed allocation).
    pub fn branch_fractions(&self) -> Vec<f64> {
        self.fractions
            .clone()
            .unwrap_or_else(|| self.sub_scenarios.iter().map(|s| s.probability).collect())
    }

    pub fn is_shock_free(&self) -> bool {
        self.sub_scenarios.iter().all(|s| s.probability == 0.0 || s.effects.is_empty())
    }
}

/// Built-in scenario by name.
pub fn builtin(name: &str) -> Option<ShockScenario> {
    use DecreaseDistribution as D;
    let subsidies = |p: f64| SubScenario {
        probability: p,
        effects: [
            (Region::Northeast, 0.025),
            (Region::Midwest, 0.008),
            (Region::South, 0.006),
            (Region::West, 0.038),
        ]
        .into_iter()
        .map(|(r, f)| ShockEffect {
            selector: Selector::region(r),
            affected_fraction: f,
            distribution: D::normal_third(0.175),
        })
        .collect(),
    };
    let rentals = |p: f64| SubScenario {
        probability: p,
        effects: vec![
            ShockEffect {
                selector: Selector::bedrooms(Bedrooms::TwoOrFewer),
                affected_fraction: 0.046,
                distribution: D::normal_third(0.11934),
            },
            ShockEffect {
                selector: Selector::bedrooms(Bedrooms::ThreeOrMore),
                affected_fraction: 0.046,
                distribution: D::normal_third(0.024),
            },
        ],
    };
    let bubble = |p: f64| SubScenario {
        probability: p,
        effects: vec![ShockEffect {
            selector: Selector::all(),
            affected_fraction: 1.0,
            distribution: D::normal_third(0.0688),
        }],
    };
    let northeast_storm = ShockEffect {
        selector: Selector::region(Region::Northeast),
        affected_fraction: 0.30,
        distribution: D::Uniform { lo: 0.06, hi: 0.16 },
    };
    let south_storm = ShockEffect {
        selector: Selector::region(Region::South),
        affected_fraction: 0.38,
        distribution: D::Uniform { lo: 0.005, hi: 0.038 },
    };
    let single = |name: &str, sub: SubScenario| ShockScenario {
        name: name.to_string(),
        sub_scenarios: vec![sub],
        allocation: Allocation::FixedFractions,
        fractions: None,
    };
    let scenario = match name {
        "s0" => ShockScenario::shock_free("s0"),
        "s1" => single("s1", subsidies(0.25)),
        "s11" => single("s11", subsidies(1.0)),
        "s2" => single("s2", rentals(0.9)),
        "s21" => single("s21", rentals(1.0)),
        "s3" => single("s3", bubble(0.05)),
        "s31" => single("s31", bubble(1.0)),
        "s4" => ShockScenario {
            name: "s4".to_string(),
            sub_scenarios: vec![
                SubScenario { probability: 0.02, effects: vec![northeast_storm] },
                SubScenario { probability: 0.69, effects: vec![south_storm] },
                SubScenario { probability: 0.08, effects: vec![northeast_storm, south_storm] },
            ],
            allocation: Allocation::FixedFractions,
            fractions: Some(vec![0.02, 0.69, 0.08]),
        },
        "s41" => single("s41", SubScenario { probability: 1.0, effects: vec![northeast_storm, south_storm] }),
        _ => return None,
    };
    Some(scenario)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenario: ScenarioHeader,
    #[serde(default)]
    sub_scenario: Vec<SubScenario>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioHeader {
    name: String,
    #[serde(default = "default_allocation")]
    allocation: Allocation,
    #[serde(default)]
    fractions: Option<Vec<f64>>,
}

fn default_allocation() -> Allocation {
    Allocation::FixedFractions
}

const HEADER_KEYS: [&str; 3] = ["name", "allocation", "fractions"];
const SUB_KEYS: [&str; 2] = ["probability", "effect"];
const EFFECT_KEYS: [&str; 3] = ["selector", "affected_fraction", "distribution"];
const SELECTOR_KEYS: [&str; 5] = ["region", "bedrooms", "sections", "subpopulation", "all"];
const DISTRIBUTION_KEYS: [&str; 5] = ["type", "mean", "sd", "lo", "hi"];

fn unknown_keys(value: &toml::Value) -> Vec<String> {
    fn check(table: Option<&toml::Table>, allowed: &[&str], path: &str, out: &mut Vec<String>) {
        if let Some(t) = table {
            out.extend(t.keys().filter(|k| !allowed.contains(&k.as_str())).map(|k| format!("{path}{k}")));
        }
    }
    let mut out = Vec::new();
    let Some(root) = value.as_table() else { return out };
    check(Some(root), &["scenario", "sub_scenario"], "", &mut out);
    check(root.get("scenario").and_then(|v| v.as_table()), &HEADER_KEYS, "scenario.", &mut out);
    if let Some(subs) = root.get("sub_scenario").and_then(|v| v.as_array()) {
        for (k, sub) in subs.iter().enumerate() {
            let path = format!("sub_scenario[{k}].");
            check(sub.as_table(), &SUB_KEYS, &path, &mut out);
            let Some(effects) = sub.get("effect").and_then(|v| v.as_array()) else { continue };
            for (e, eff) in effects.iter().enumerate() {
                let path = format!("sub_scenario[{k}].effect[{e}].");
                check(eff.as_table(), &EFFECT_KEYS, &path, &mut out);
                check(eff.get("selector").and_then(|v| v.as_table()), &SELECTOR_KEYS, &format!("{path}selector."), &mut out);
                check(
                    eff.get("distribution").and_then(|v| v.as_table()),
                    &DISTRIBUTION_KEYS,
                    &format!("{path}distribution."),
                    &mut out,
                );
            }
        }
    }
    out
}

/// Parse a TOML scenario definition, or a bare built-in name.
pub fn parse_scenario(text: &str) -> Result<ShockScenario> {
    let trimmed = text.trim();
    if let Some(b) = builtin(trimmed) {
        return Ok(b);
    }
    let value: toml::Value =
        toml::from_str(text).map_err(|e| Error::Scenario(format!("malformed scenario config: {e}")))?;
    let unknown = unknown_keys(&value);
    if !unknown.is_empty() {
        return Err(Error::Scenario(format!("unknown keys: {}", unknown.join(", "))));
    }
    let file: ScenarioFile = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Scenario(format!("schema violation: {}", e.message())))?;
    let scenario = ShockScenario {
        name: file.scenario.name,
        sub_scenarios: file.sub_scenario,
        allocation: file.scenario.allocation,
        fractions: file.scenario.fractions,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Serialize a scenario back to the TOML schema.
pub fn to_toml(scenario: &ShockScenario) -> String {
    #[derive(Serialize)]
    struct Header<'a> {
        name: &'a str,
        allocation: Allocation,
        #[serde(skip_serializing_if = "Option::is_none")]
        fractions: &'a Option<Vec<f64>>,
    }
    #[derive(Serialize)]
    struct File<'a> {
        scenario: Header<'a>,
        sub_scenario: &'a [SubScenario],
    }
    toml::to_string(&File {
        scenario: Header { name: &scenario.name, allocation: scenario.allocation, fractions: &scenario.fractions },
        sub_scenario: &scenario.sub_scenarios,
    })
    .expect("scenario serializes")
}

/// Split `total` into integer counts proportional to `shares` by largest remainder.
///
/// `shares` must sum to at most one; the remainder is appended as the last count.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let mut quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let rest = total as f64 - quotas.iter().sum::<f64>();
    quotas.push(rest.max(0.0));
    // quotas like 1379.9999999999998 come from binary fractions; snap them first
    let quotas: Vec<f64> = quotas.iter().map(|q| (q * 1e9).round() / 1e9).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Branch of every iteration `0..b_total`.
pub fn branch_schedule(scenario: &ShockScenario, b_total: usize, seed: u64) -> Vec<Branch> {
    let scope = scope_hash(&scenario.name);
    if scenario.sub_scenarios.is_empty() {
        return vec![Branch::ShockFree; b_total];
    }
    match scenario.allocation {
        Allocation::FixedFractions => {
            let counts = largest_remainder(&scenario.branch_fractions(), b_total);
            let mut out = Vec::with_capacity(b_total);
            for (k, &c) in counts.iter().enumerate() {
                let branch = if k < scenario.sub_scenarios.len() { Branch::Sub(k) } else { Branch::ShockFree };
                out.extend(std::iter::repeat_n(branch, c));
            }
            out.shuffle(&mut stream(seed, scope, 0, Substream::Schedule));
            out
        }
        Allocation::Bernoulli => (0..b_total)
            .map(|b| {
                let u: f64 = stream(seed, scope, b as u64, Substream::Schedule).random();
                let mut acc = 0.0;
                for (k, sub) in scenario.sub_scenarios.iter().enumerate() {
                    acc += sub.probability;
                    if u < acc {
                        return Branch::Sub(k);
                    }
                }
                Branch::ShockFree
            })
            .collect(),
    }
}

/// Branch of iteration `b` out of `b_total`.
pub fn draw_branch(scenario: &ShockScenario, b: usize, b_total: usize, seed: u64) -> Result<Branch> {
    if b_total == 0 || b >= b_total {
        return Err(Error::InvalidArgument(format!("iteration {b} outside 0..{b_total}")));
    }
    match scenario.allocation {
        Allocation::FixedFractions => Ok(branch_schedule(scenario, b_total, seed)[b]),
        Allocation::Bernoulli => {
            let scope = scope_hash(&scenario.name);
            let u: f64 = stream(seed, scope, b as u64, Substream::Schedule).random();
            let mut acc = 0.0;
            for (k, sub) in scenario.sub_scenarios.iter().enumerate() {
                acc += sub.probability;
                if u < acc {
                    return Ok(Branch::Sub(k));
                }
            }
            Ok(Branch::ShockFree)
        }
    }
}

/// Number of units altered by each effect of the applied branch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShockOutcome {
    pub altered: Vec<usize>,
}

/// Apply `branch` of `scenario` to future log prices in place.
///
/// `tags[i]` describes unit `i`. Each effect draws `round(fraction * matching)`
/// units without replacement and adds `ln(1 - delta)` to each.
pub fn apply_shock(
    log_prices: &mut [f64],
    tags: &[UnitTags],
    scenario: &ShockScenario,
    branch: Branch,
    rng: &mut StreamRng,
) -> ShockOutcome {
    debug_assert_eq!(log_prices.len(), tags.len());
    let Branch::Sub(k) = branch else { return ShockOutcome::default() };
    let Some(sub) = scenario.sub_scenarios.get(k) else { return ShockOutcome::default() };
    let mut outcome = ShockOutcome::default();
    for effect in &sub.effects {
        let matching: Vec<usize> =
            (0..tags.len()).filter(|&i| effect.selector.matches(&tags[i])).collect();
        let count = affected_count(effect.affected_fraction, matching.len());
        let chosen = index::sample(rng, matching.len(), count);
        for pos in chosen.iter() {
            let delta = effect.distribution.sample(rng);
            log_prices[matching[pos]] += (-delta).ln_1p();
        }
        outcome.altered.push(count);
    }
    outcome
}

/// `round(fraction * matching)`, capped at `matching`.
pub fn affected_count(fraction: f64, matching: usize) -> usize {
    ((fraction * matching as f64).round() as usize).min(matching)
}

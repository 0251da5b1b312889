//! Strategy sets for diversified exploration, their validity checks, and the
//! bootstrap skill that routes trial `i` to strategy file `i`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::contrast::{Reasoner, ReasonerRequest, ReasonerResponse, StrategyRequest};
use crate::error::{Error, Result};
use crate::runner::TrialOutcome;
use crate::skill::{RelPath, SkillArtifact};

pub const STRATEGY_DIR: &str = "strategies";
pub const COPY_TRAINING_VALUE: &str = "copy-training-value";
pub const DERIVE_AT_RUNTIME: &str = "derive-at-runtime";

pub fn strategy_file_name(index: usize) -> String {
    format!("{STRATEGY_DIR}/strategy-{index}.md")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    Invariant,
    Parametric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub kind: AxisKind,
    #[serde(default)]
    pub observed_training_value: Option<String>,
    /// Candidate choices; used by the deterministic fallback planner.
    #[serde(default)]
    pub choices: Vec<String>,
}

impl Axis {
    pub fn invariant(name: &str, choices: &[&str]) -> Self {
        Axis {
            name: name.into(),
            kind: AxisKind::Invariant,
            observed_training_value: None,
            choices: choices.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn parametric(name: &str, observed: &str) -> Self {
        Axis {
            name: name.into(),
            kind: AxisKind::Parametric,
            observed_training_value: Some(observed.into()),
            choices: Vec::new(),
        }
    }

    fn fallback_choices(&self) -> Vec<String> {
        let mut c = if self.choices.is_empty() && self.kind == AxisKind::Parametric {
            vec![
                COPY_TRAINING_VALUE.to_string(),
                DERIVE_AT_RUNTIME.to_string(),
            ]
        } else {
            self.choices.clone()
        };
        c.sort();
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub index: usize,
    pub choices: BTreeMap<String, String>,
    #[serde(default)]
    pub derive_at_runtime: BTreeSet<String>,
    pub prose: String,
}

impl Strategy {
    /// Strategy file: a `---` header listing choices and runtime-derived
    /// axes, followed by free prose.
    pub fn render(&self) -> String {
        let mut out = format!("---\nstrategy: {}\n", self.index);
        for (axis, choice) in &self.choices {
            out.push_str(&format!("choice.{axis}: {choice}\n"));
        }
        let derive: Vec<&str> = self.derive_at_runtime.iter().map(String::as_str).collect();
        out.push_str(&format!(
            "derive_at_runtime: {}\n---\n\n",
            derive.join(", ")
        ));
        out.push_str(&self.prose);
        if !self.prose.ends_with('\n') {
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Strategy(format!("malformed strategy file: {m}"));
        let rest = text
            .strip_prefix("---\n")
            .ok_or_else(|| bad("missing header"))?;
        let (header, body) = rest
            .split_once("\n---\n")
            .ok_or_else(|| bad("unterminated header"))?;
        let mut index = None;
        let mut choices = BTreeMap::new();
        let mut derive = BTreeSet::new();
        for line in header.lines() {
            let (k, v) = line.split_once(':').ok_or_else(|| bad(line))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "strategy" {
                index = Some(v.parse().map_err(|_| bad("index"))?);
            } else if let Some(axis) = k.strip_prefix("choice.") {
                choices.insert(axis.to_string(), v.to_string());
            } else if k == "derive_at_runtime" {
                derive.extend(
                    v.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from),
                );
            }
        }
        Ok(Strategy {
            index: index.ok_or_else(|| bad("missing strategy index"))?,
            choices,
            derive_at_runtime: derive,
            prose: body.strip_prefix('\n').unwrap_or(body).to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySet {
    pub iteration: u32,
    pub strategies: Vec<Strategy>,
}

impl StrategySet {
    pub fn k(&self) -> usize {
        self.strategies.len()
    }

    pub fn get(&self, index: usize) -> Option<&Strategy> {
        self.strategies.iter().find(|s| s.index == index)
    }

    fn check_shape(&self, k: usize) -> Result<()> {
        if self.strategies.len() != k {
            return Err(Error::Strategy(format!(
                "expected {k} strategies, got {}",
                self.strategies.len()
            )));
        }
        for (pos, s) in self.strategies.iter().enumerate() {
            if s.index != pos + 1 {
                return Err(Error::Strategy(format!(
                    "strategy at position {pos} has index {}, expected {}",
                    s.index,
                    pos + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityViolation {
    pub first: usize,
    pub second: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageViolation {
    pub axis: String,
}

fn require_axes(set: &StrategySet, axes: &[Axis]) -> Result<()> {
    for s in &set.strategies {
        for a in axes {
            if !s.choices.contains_key(&a.name) {
                return Err(Error::Strategy(format!(
                    "strategy {} has no choice for axis {:?}",
                    s.index, a.name
                )));
            }
        }
    }
    Ok(())
}

/// One violation per unordered pair of strategies that agree on every axis.
pub fn check_diversity(set: &StrategySet, axes: &[Axis]) -> Result<Vec<DiversityViolation>> {
    require_axes(set, axes)?;
    let mut out = Vec::new();
    for (i, a) in set.strategies.iter().enumerate() {
        for b in &set.strategies[i + 1..] {
            if axes
                .iter()
                .all(|ax| a.choices[&ax.name] == b.choices[&ax.name])
            {
                out.push(DiversityViolation {
                    first: a.index,
                    second: b.index,
                });
            }
        }
    }
    Ok(out)
}

/// One violation per parametric axis that no strategy derives at runtime.
pub fn check_parametric_coverage(
    set: &StrategySet,
    axes: &[Axis],
) -> Result<Vec<CoverageViolation>> {
    require_axes(set, axes)?;
    Ok(axes
        .iter()
        .filter(|a| a.kind == AxisKind::Parametric)
        .filter(|a| {
            !set.strategies
                .iter()
                .any(|s| s.derive_at_runtime.contains(&a.name))
        })
        .map(|a| CoverageViolation {
            axis: a.name.clone(),
        })
        .collect())
}

fn parametric_names(axes: &[Axis]) -> BTreeSet<&str> {
    axes.iter()
        .filter(|a| a.kind == AxisKind::Parametric)
        .map(|a| a.name.as_str())
        .collect()
}

/// Reasons a strategy set may not be used; empty means valid.
pub fn validate_set(set: &StrategySet, axes: &[Axis], k: usize) -> Result<Vec<String>> {
    set.check_shape(k)?;
    let mut problems = Vec::new();
    for v in check_diversity(set, axes)? {
        problems.push(format!(
            "strategies {} and {} agree on every axis",
            v.first, v.second
        ));
    }
    for v in check_parametric_coverage(set, axes)? {
        problems.push(format!(
            "no strategy derives parametric axis {:?} at runtime",
            v.axis
        ));
    }
    let parametric = parametric_names(axes);
    for s in &set.strategies {
        for d in &s.derive_at_runtime {
            if !parametric.contains(d.as_str()) {
                problems.push(format!(
                    "strategy {} derives non-parametric axis {d:?}",
                    s.index
                ));
            }
        }
    }
    Ok(problems)
}

/// The r=0 skill: a manifest that routes trial `i` to `strategies/strategy-i.md`
/// plus one file per strategy, and nothing else.
pub fn build_bootstrap_skill(set: &StrategySet, axes: &[Axis]) -> Result<SkillArtifact> {
    if set.iteration != 0 {
        return Err(Error::Strategy(format!(
            "bootstrap skill is only built at iteration 0, got {}",
            set.iteration
        )));
    }
    let k = set.k();
    let manifest = format!(
        "---\nname: trial-router\ndescription: Routes each exploration trial to its assigned strategy file.\n---\n\n\
## Route\n\
Read the trial index from the EVOLVER_TRIAL_INDEX environment variable, then open \
`{STRATEGY_DIR}/strategy-<index>.md` (indices 1..{k}) and follow that plan before anything else.\n"
    );
    let mut files = BTreeMap::new();
    files.insert(RelPath::new("SKILL.md")?, manifest.into_bytes());
    for s in &set.strategies {
        files.insert(
            RelPath::new(strategy_file_name(s.index))?,
            s.render().into_bytes(),
        );
    }
    let v = SkillArtifact::from_files(files, 0)?;
    for axis in axes {
        if let Some(value) = &axis.observed_training_value {
            if let Some((path, _)) = v
                .files
                .iter()
                .find(|(_, b)| String::from_utf8_lossy(b).contains(value.as_str()))
            {
                return Err(Error::Strategy(format!(
                    "bootstrap file {path} embeds training value of axis {:?}",
                    axis.name
                )));
            }
        }
    }
    Ok(v)
}

/// Deterministic fallback: cross product of axis choices, axes in the given
/// order with the last axis varying fastest and choices sorted, truncated or
/// cycled to `k`.
pub fn enumerate_strategies(axes: &[Axis], k: usize, iteration: u32, focus: &str) -> StrategySet {
    let choice_lists: Vec<Vec<String>> = axes.iter().map(Axis::fallback_choices).collect();
    let total: usize = choice_lists.iter().map(|c| c.len().max(1)).product();
    let mut strategies = Vec::with_capacity(k);
    for i in 0..k {
        let mut n = i % total.max(1);
        let mut picks = vec![String::new(); axes.len()];
        for (slot, list) in picks.iter_mut().zip(&choice_lists).rev() {
            let len = list.len().max(1);
            *slot = list.get(n % len).cloned().unwrap_or_default();
            n /= len;
        }
        let mut choices = BTreeMap::new();
        let mut derive = BTreeSet::new();
        let mut lines = Vec::new();
        for (axis, pick) in axes.iter().zip(picks) {
            if axis.kind == AxisKind::Parametric && pick == DERIVE_AT_RUNTIME {
                derive.insert(axis.name.clone());
                lines.push(format!(
                    "- {}: derive the value from the inputs at runtime",
                    axis.name
                ));
            } else if pick == COPY_TRAINING_VALUE {
                lines.push(format!(
                    "- {}: reuse the value observed in the available data",
                    axis.name
                ));
            } else {
                lines.push(format!("- {}: {}", axis.name, pick));
            }
            choices.insert(axis.name.clone(), pick);
        }
        let prose = format!(
            "# Plan {}\n\n{focus}\n\nCommit to these decisions:\n{}\n",
            i + 1,
            lines.join("\n")
        );
        strategies.push(Strategy {
            index: i + 1,
            choices,
            derive_at_runtime: derive,
            prose,
        });
    }
    StrategySet {
        iteration,
        strategies,
    }
}

/// Number of distinct strategies the fallback can produce for `axes`.
pub fn distinct_combinations(axes: &[Axis]) -> usize {
    axes.iter()
        .map(|a| a.fallback_choices().len().max(1))
        .product()
}

/// Write a strategy set via the reasoner, with a bounded retry; falls back to
/// enumeration when the reasoner declines the role.
pub fn plan_strategies(
    axes: &[Axis],
    prior_skill: Option<&SkillArtifact>,
    prior_outcomes: Option<&[TrialOutcome]>,
    reasoner: &dyn Reasoner,
    k: usize,
    iteration: u32,
    attempts: usize,
) -> Result<StrategySet> {
    if iteration > 0 && (prior_skill.is_none() || prior_outcomes.is_none()) {
        return Err(Error::Strategy(
            "refinement iterations need the prior skill and outcomes".into(),
        ));
    }
    let request = StrategyRequest {
        iteration,
        k,
        axes: axes.to_vec(),
        prior_skill: prior_skill.cloned(),
        failing_trials: prior_outcomes
            .map(|o| {
                o.iter()
                    .filter(|t| t.reward <= 0.0)
                    .map(|t| t.summary())
                    .collect()
            })
            .unwrap_or_default(),
        feedback: Vec::new(),
    };
    let mut feedback = Vec::new();
    for _ in 0..attempts.max(1) {
        let mut req = request.clone();
        req.feedback = feedback.clone();
        match reasoner.respond(&ReasonerRequest::Strategies(req))? {
            ReasonerResponse::Strategies(set) => {
                let problems = match validate_set(&set, axes, k) {
                    Ok(p) => p,
                    Err(e) => vec![e.to_string()],
                };
                if problems.is_empty() {
                    return Ok(StrategySet { iteration, ..set });
                }
                log::warn!("reasoner strategy set rejected: {problems:?}");
                feedback = problems;
            }
            ReasonerResponse::Unavailable => {
                let focus = if iteration == 0 {
                    "Attempt the task from scratch under this plan.".to_string()
                } else {
                    "Use the deployed skill, but stress-test the parts that failed in the previous round.".to_string()
                };
                let set = enumerate_strategies(axes, k, iteration, &focus);
                let problems = validate_set(&set, axes, k)?;
                if !problems.is_empty() {
                    return Err(Error::Strategy(format!(
                        "fallback enumeration is not valid for these axes: {problems:?}"
                    )));
                }
                return Ok(set);
            }
            other => {
                return Err(Error::Reasoner(format!(
                    "strategies role answered with {}",
                    other.role()
                )))
            }
        }
    }
    Err(Error::Strategy(format!(
        "reasoner strategy set still invalid after {} attempts: {feedback:?}",
        attempts.max(1)
    )))
}

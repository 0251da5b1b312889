//! The explore, contrast, patch, audit loop and its finalize/validate tail.
//!
//! A run directory holds everything needed to replay or inspect a run:
//!
//! ```text
//! <run>/manifest.json        config, phase timestamps, lineage, decision
//! <run>/trials.jsonl         one summary record per trial, in dispatch order
//! <run>/traces/              per-trial event logs and outcomes
//! <run>/workspaces/<trial>/  trial workspaces
//! <run>/lineage/v<n>/        every candidate, accepted or not
//! <run>/audits/v<n>.json     the audit report of each candidate
//! <run>/output/              failsafe copy of the first distilled skill
//! <run>/final/               the skill handed to validation
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::{
    AuditInput, AuditReport, Auditor, CheckId, Locus, Severity, TrainingManifestIndex, Violation,
};
use crate::contrast::{
    extract_contrast, partition, synthesize_candidate, ContrastOptions, ContrastSignal, Degenerate,
    FixClass, Partition, PatchTarget, Reasoner, ReasonerRequest, ReasonerResponse,
};
use crate::error::{Error, Result};
use crate::guard::{prepare_training_env, PrepRecord};
use crate::runner::{
    run_parallel, AgentBackend, TraceStore, TrialOutcome, TrialPhase, TrialRequest,
};
use crate::skill::{apply_patch, mirror, Lineage, Patch, SkillArtifact};
use crate::strategy::{
    build_bootstrap_skill, distinct_combinations, plan_strategies, Axis, AxisKind, StrategySet,
};
use crate::task::{Budget, RewardKind, TaskSpec};
use crate::util::{now_millis, read_tree, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub pass_rate: f64,
    pub trace_cost: f64,
    pub risk: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            pass_rate: 1.0,
            trace_cost: 0.1,
            risk: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Exploration width at r=0.
    pub k: usize,
    /// Exploration width for r ≥ 1.
    pub refine_k: usize,
    /// Iteration cap.
    pub r_max: u32,
    /// Validation trials.
    pub v: usize,
    /// Per-trial turn cap and per-run dollar cap.
    pub budget: Budget,
    pub weights: ScoreWeights,
    /// Events kept at each end of a trace excerpt.
    pub excerpt_m: usize,
    /// Reasoner attempts for strategy planning.
    pub strategy_attempts: usize,
}

impl LoopConfig {
    pub fn new(k: usize, r_max: u32, v: usize) -> Result<Self> {
        let c = LoopConfig {
            k,
            refine_k: k,
            r_max,
            v,
            budget: Budget::default(),
            weights: ScoreWeights::default(),
            excerpt_m: 60,
            strategy_attempts: 3,
        };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        if self.k == 0 || self.refine_k == 0 || self.r_max == 0 || self.v == 0 {
            return Err(Error::Loop(format!(
                "K, refine K, R and V must be at least 1 (got {}, {}, {}, {})",
                self.k, self.refine_k, self.r_max, self.v
            )));
        }
        Ok(())
    }

    /// Apply `EVOLVER_*` overrides read through `get`.
    pub fn with_overrides(mut self, get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        fn parse<T: std::str::FromStr>(key: &str, raw: String) -> Result<T> {
            raw.trim()
                .parse()
                .map_err(|_| Error::Loop(format!("{key}={raw:?} is not a valid value")))
        }
        let refine_set = get("EVOLVER_N_REFINE").is_some();
        if let Some(v) = get("EVOLVER_N_EXPLORATION") {
            self.k = parse("EVOLVER_N_EXPLORATION", v)?;
            if !refine_set {
                self.refine_k = self.k;
            }
        }
        if let Some(v) = get("EVOLVER_N_REFINE") {
            self.refine_k = parse("EVOLVER_N_REFINE", v)?;
        }
        if let Some(v) = get("EVOLVER_N_VALIDATION") {
            self.v = parse("EVOLVER_N_VALIDATION", v)?;
        }
        let mut cost = self.budget.max_cost_usd;
        let mut turns = self.budget.max_turns;
        if let Some(v) = get("EVOLVER_MAX_BUDGET") {
            cost = parse("EVOLVER_MAX_BUDGET", v)?;
        }
        if let Some(v) = get("EVOLVER_MAX_TURNS") {
            turns = parse("EVOLVER_MAX_TURNS", v)?;
        }
        self.budget = Budget::new(cost, turns)?;
        self.check()?;
        Ok(self)
    }

    pub fn from_env(self) -> Result<Self> {
        self.with_overrides(|k| std::env::var(k).ok())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Operator-supplied merge applied between finalize and validation.
    pub merge_patch: Option<Patch>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub strategies: StrategySet,
    pub deployed_version: Option<u32>,
    pub trial_ids: Vec<String>,
    pub pass_count: usize,
    pub partition: Partition,
    pub signal: ContrastSignal,
    pub candidate_version: Option<u32>,
    pub accepted: bool,
    pub report: Option<AuditReport>,
    pub synthesis_error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoopState {
    pub r: u32,
    pub lineage: Lineage,
    pub history: Vec<IterationRecord>,
    pub outcome_history: Vec<Vec<TrialOutcome>>,
    pub pending_targets: Vec<PatchTarget>,
    pub degenerate_flags: Vec<Option<Degenerate>>,
    pub spent_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    pub version: u32,
    pub train_pass_rate: f64,
    pub trace_cost: f64,
    pub generalization_risk: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Chosen {
    Version { version: u32 },
    Merge { base: u32, merged_version: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeDecision {
    pub chosen: Chosen,
    pub score_components: Vec<ScoreComponents>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub skill_version: Option<u32>,
    pub trial_ids: Vec<String>,
    pub rewards: Vec<f64>,
    pub pass_count: usize,
    /// avg@V for binary tasks, mean reward for scalar ones.
    pub score: f64,
    pub binary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStamp {
    pub phase: String,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub version: u32,
    pub digest: String,
    pub accepted: bool,
    pub gate: bool,
    pub critical: usize,
    pub important: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: String,
    pub task_id: String,
    pub domain: Option<String>,
    pub config: serde_json::Value,
    pub prep: Option<PrepRecord>,
    pub axes: Vec<Axis>,
    pub phases: Vec<PhaseStamp>,
    pub iterations_executed: u32,
    pub lineage: Vec<LineageEntry>,
    pub finalize: Option<FinalizeDecision>,
    pub finalize_at_ms: Option<u64>,
    pub merge_applied: bool,
    pub authoring_failed: bool,
    pub budget_exhausted: bool,
    pub harness_invocations: usize,
    /// Local sessions that never reach the harness.
    #[serde(default)]
    pub local_sessions: usize,
    /// Set when the run stopped on a hard failure.
    #[serde(default)]
    pub aborted: Option<String>,
    pub validation: Option<ValidationResult>,
    /// Free-form notes, such as a control run's rubric.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(pipeline: &str, task: &TaskSpec, config: serde_json::Value) -> Self {
        RunManifest {
            pipeline: pipeline.into(),
            task_id: task.id.clone(),
            domain: task.domain.clone(),
            config,
            prep: None,
            axes: Vec::new(),
            phases: Vec::new(),
            iterations_executed: 0,
            lineage: Vec::new(),
            finalize: None,
            finalize_at_ms: None,
            merge_applied: false,
            authoring_failed: false,
            budget_exhausted: false,
            harness_invocations: 0,
            local_sessions: 0,
            aborted: None,
            validation: None,
            notes: BTreeMap::new(),
        }
    }

    pub fn stamp(&mut self, phase: impl Into<String>) -> u64 {
        let at_ms = now_millis();
        self.phases.push(PhaseStamp {
            phase: phase.into(),
            at_ms,
        });
        at_ms
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        crate::util::read_json(&run_dir.join(MANIFEST_NAME))
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";
pub const TRIALS_NAME: &str = "trials.jsonl";

/// One line of the per-run trial table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub phase: TrialPhase,
    pub iteration: u32,
    pub strategy_index: usize,
    pub reward: f64,
    pub over_budget: bool,
    pub crashed: bool,
    pub tokens: u64,
    pub turns: u32,
    pub wall_clock_s: f64,
    pub cost_usd: f64,
    pub skill_version: Option<u32>,
    pub started_at_ms: u64,
}

impl From<&TrialOutcome> for TrialRecord {
    fn from(o: &TrialOutcome) -> Self {
        TrialRecord {
            trial_id: o.trial_id.clone(),
            phase: o.phase,
            iteration: o.iteration,
            strategy_index: o.strategy_index,
            reward: o.reward,
            over_budget: o.over_budget,
            crashed: o.crashed.is_some(),
            tokens: o.trace.tokens,
            turns: o.trace.turns,
            wall_clock_s: o.trace.wall_clock_s,
            cost_usd: o.trace.cost_usd,
            skill_version: o.deployed_skill.as_ref().map(|d| d.version_index),
            started_at_ms: o.started_at_ms,
        }
    }
}

/// Filesystem layout and append-only records of one run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub store: TraceStore,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let root = fs::canonicalize(root).map_err(|e| Error::io(root, e))?;
        if root.join(MANIFEST_NAME).exists() {
            return Err(Error::Loop(format!(
                "{} already holds a run",
                root.display()
            )));
        }
        let store = TraceStore::open(root.join("traces"))?;
        Ok(RunDir { root, store })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let root = fs::canonicalize(root).map_err(|e| Error::io(root, e))?;
        let store = TraceStore::open(root.join("traces"))?;
        Ok(RunDir { root, store })
    }

    pub fn workspace(&self, trial_id: &str) -> PathBuf {
        self.root.join("workspaces").join(trial_id)
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        write_json(&self.root.join(MANIFEST_NAME), m)
    }

    pub fn append_trials(&self, outcomes: &[TrialOutcome]) -> Result<()> {
        let path = self.root.join(TRIALS_NAME);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for o in outcomes {
            let row = TrialRecord::from(o);
            writeln!(f, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load_trials(&self) -> Result<Vec<TrialRecord>> {
        let path = self.root.join(TRIALS_NAME);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn record_candidate(&self, v: &SkillArtifact, report: &AuditReport) -> Result<()> {
        mirror(
            v,
            &self
                .root
                .join("lineage")
                .join(format!("v{}", v.version_index)),
        )?;
        write_json(
            &self
                .root
                .join("audits")
                .join(format!("v{}.json", v.version_index)),
            report,
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_skill: Option<SkillArtifact>,
    pub decision: Option<FinalizeDecision>,
    pub validation: ValidationResult,
    pub manifest: RunManifest,
    pub state: LoopState,
    pub run_dir: PathBuf,
}

// ---------------------------------------------------------------------------
// Pure loop rules

pub fn pass_count(task: &TaskSpec, outcomes: &[TrialOutcome]) -> usize {
    outcomes
        .iter()
        .filter(|o| !o.over_budget && task.is_pass(o.reward))
        .count()
}

/// Stop when the latest audit is clean and at least 3K/4 trials passed, or
/// when the iteration cap is reached.
pub fn should_terminate(r: u32, r_max: u32, k: usize, report: &AuditReport, passes: usize) -> bool {
    (report.gate && 4 * passes >= 3 * k) || r + 1 >= r_max
}

/// Every violation becomes a refinement target for the next patch.
pub fn violation_to_target(report: &AuditReport) -> Vec<PatchTarget> {
    report
        .violations
        .iter()
        .map(|v| {
            let (fix, instruction) = match v.check {
                CheckId::Hoisting => (
                    FixClass::HoistInvocation,
                    "reorder sections: hoist invocation".to_string(),
                ),
                CheckId::CrossRef | CheckId::Literals => (
                    FixClass::AbstractLiteral,
                    format!("abstract literal at {}", v.locus),
                ),
                CheckId::Framing => (
                    FixClass::GeneralizeName,
                    format!("rename to the abstract operation at {}", v.locus),
                ),
                CheckId::ScriptBloat => (
                    FixClass::SplitScript,
                    format!("split or trim script at {}", v.locus),
                ),
                CheckId::ShapeBake => (
                    FixClass::ProbeAtRuntime,
                    format!("probe keys at runtime at {}", v.locus),
                ),
                CheckId::Coverage => (
                    FixClass::BundleScript,
                    "bundle a focused helper script".to_string(),
                ),
                CheckId::SilentBypass => (
                    FixClass::ForceInvocation,
                    "surface the primary script invocation and bundle what it needs".to_string(),
                ),
                CheckId::Untraceable => (
                    FixClass::CiteOrDrop,
                    format!("cite trace provenance or drop the claim at {}", v.locus),
                ),
                CheckId::UnderAbstraction => (
                    FixClass::AddRederive,
                    format!("add a re-derive-at-runtime instruction at {}", v.locus),
                ),
            };
            PatchTarget {
                check: v.check,
                locus: v.locus.clone(),
                fix,
                instruction,
                evidence: v.evidence.clone(),
            }
        })
        .collect()
}

/// Score accepted versions and pick the best; ties go to the latest.
pub fn finalize(
    state: &LoopState,
    task: &TaskSpec,
    weights: ScoreWeights,
) -> Result<FinalizeDecision> {
    if state.lineage.accepted.is_empty() {
        return Err(Error::Loop("finalize over an empty lineage".into()));
    }
    struct Raw {
        version: u32,
        pass_rate: f64,
        tokens: f64,
        risk: f64,
    }
    let mut raws = Vec::new();
    for (v, report) in &state.lineage.accepted {
        let deployed = state
            .history
            .iter()
            .position(|h| h.deployed_version == Some(v.version_index));
        let produced = state
            .history
            .iter()
            .position(|h| h.candidate_version == Some(v.version_index));
        let batch = deployed
            .or(produced)
            .and_then(|i| state.outcome_history.get(i))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let n = batch.len().max(1) as f64;
        raws.push(Raw {
            version: v.version_index,
            pass_rate: pass_count(task, batch) as f64 / n,
            tokens: batch.iter().map(|o| o.trace.tokens as f64).sum::<f64>() / n,
            risk: report.count(Severity::Important) as f64,
        });
    }
    let max_tokens = raws.iter().map(|r| r.tokens).fold(0.0, f64::max);
    let components: Vec<ScoreComponents> = raws
        .iter()
        .map(|r| {
            let cost = if max_tokens > 0.0 {
                r.tokens / max_tokens
            } else {
                0.0
            };
            ScoreComponents {
                version: r.version,
                train_pass_rate: r.pass_rate,
                trace_cost: cost,
                generalization_risk: r.risk,
                score: weights.pass_rate * r.pass_rate
                    - weights.trace_cost * cost
                    - weights.risk * r.risk,
            }
        })
        .collect();
    let best = components
        .iter()
        .fold(None::<&ScoreComponents>, |best, c| match best {
            Some(b) if b.score > c.score => Some(b),
            _ => Some(c),
        })
        .expect("non-empty lineage");
    Ok(FinalizeDecision {
        chosen: Chosen::Version {
            version: best.version,
        },
        rationale: format!(
            "v{} scores {:.4} (pass {:.3}, cost {:.3}, risk {})",
            best.version,
            best.score,
            best.train_pass_rate,
            best.trace_cost,
            best.generalization_risk
        ),
        score_components: components.clone(),
    })
}

// ---------------------------------------------------------------------------
// Understand

const APPROACHES: [&str; 6] = [
    "direct-solve",
    "inspect-then-solve",
    "script-first",
    "incremental-verify",
    "library-first",
    "minimal-tooling",
];

/// Axes derived from the training environment without a reasoner: an input
/// reader axis when files are present, and one parametric axis per numeric
/// constant (at most two).
pub fn heuristic_axes(index: &TrainingManifestIndex) -> Vec<Axis> {
    let mut axes = Vec::new();
    let has_structured = index
        .filenames
        .iter()
        .any(|f| f.rsplit_once('.').is_some_and(|(_, ext)| !ext.is_empty()));
    if has_structured {
        axes.push(Axis::invariant(
            "input-reader",
            &["dedicated-library", "hand-written-parser"],
        ));
    }
    for (i, value) in index.numerics.iter().take(2).enumerate() {
        axes.push(Axis::parametric(&format!("constant-{}", i + 1), value));
    }
    axes
}

/// Add an invariant `approach` axis until the axes yield `k` distinct
/// combinations.
pub fn widen_axes(mut axes: Vec<Axis>, k: usize) -> Vec<Axis> {
    let have = distinct_combinations(&axes).max(1);
    if have >= k && !axes.is_empty() {
        return axes;
    }
    let need = k.div_ceil(have).max(2);
    let choices: Vec<String> = (0..need)
        .map(|i| {
            APPROACHES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("approach-{}", i + 1))
        })
        .collect();
    axes.push(Axis {
        name: "approach".into(),
        kind: AxisKind::Invariant,
        observed_training_value: None,
        choices,
    });
    axes
}

pub fn understand(
    task: &TaskSpec,
    index: &TrainingManifestIndex,
    reasoner: &dyn Reasoner,
    k: usize,
) -> Result<Vec<Axis>> {
    let files = read_tree(&task.train_env)?.into_keys().collect();
    let req = ReasonerRequest::Understand {
        instruction: task.instruction.clone(),
        train_files: files,
    };
    let axes = match reasoner.respond(&req)? {
        ReasonerResponse::Axes { axes } => axes,
        ReasonerResponse::Unavailable => heuristic_axes(index),
        other => {
            return Err(Error::Reasoner(format!(
                "understand answered with {}",
                other.role()
            )))
        }
    };
    Ok(widen_axes(axes, k))
}

// ---------------------------------------------------------------------------
// Driver

struct Driver<'a> {
    task: Arc<TaskSpec>,
    config: &'a LoopConfig,
    backend: &'a dyn AgentBackend,
    reasoner: &'a dyn Reasoner,
    auditor: &'a Auditor,
    run: RunDir,
    index: TrainingManifestIndex,
    parametric: Vec<String>,
    manifest: RunManifest,
    state: LoopState,
}

impl Driver<'_> {
    fn explore(
        &mut self,
        r: u32,
        skill: Option<&SkillArtifact>,
        strategies: &StrategySet,
    ) -> Result<Vec<TrialOutcome>> {
        let requests: Vec<TrialRequest> = strategies
            .strategies
            .iter()
            .map(|s| {
                let id = format!("r{r}-t{}", s.index);
                TrialRequest {
                    workspace: self.run.workspace(&id),
                    trial_id: id,
                    task: self.task.clone(),
                    deployed_skill: skill.cloned(),
                    strategy_index: s.index,
                    strategy: Some(s.clone()),
                    iteration: r,
                    phase: TrialPhase::Exploration,
                    budget: self.config.budget,
                }
            })
            .collect();
        self.manifest.stamp(format!("explore-r{r}"));
        let outcomes = run_parallel(self.backend, &requests, &self.run.store)?;
        self.manifest.harness_invocations += requests.len();
        self.state.spent_usd += outcomes.iter().map(|o| o.trace.cost_usd).sum::<f64>();
        self.run.append_trials(&outcomes)?;
        Ok(outcomes)
    }

    fn audit(&self, candidate: &SkillArtifact, outcomes: &[TrialOutcome]) -> AuditReport {
        let input = AuditInput::for_task(
            &self.task,
            candidate.clone(),
            self.index.clone(),
            outcomes.to_vec(),
            self.parametric.clone(),
        );
        self.auditor.audit(&input, self.reasoner)
    }

    fn synthesize(
        &self,
        prior: Option<&SkillArtifact>,
        r: u32,
        signal: &ContrastSignal,
        targets: &[PatchTarget],
    ) -> Result<SkillArtifact> {
        let first = synthesize_candidate(
            &self.task,
            prior,
            r,
            signal,
            targets,
            self.reasoner,
            &self.index,
            &[],
        );
        match first {
            Err(Error::PreScreen(msg)) => {
                log::warn!("pre-screen rejected candidate at r={r}: {msg}; retrying once");
                synthesize_candidate(
                    &self.task,
                    prior,
                    r,
                    signal,
                    targets,
                    self.reasoner,
                    &self.index,
                    &[msg],
                )
            }
            other => other,
        }
    }

    /// Audit a candidate, record it, and add it to the lineage if clean.
    fn admit(
        &mut self,
        candidate: &SkillArtifact,
        outcomes: &[TrialOutcome],
    ) -> Result<(AuditReport, bool)> {
        let report = self.audit(candidate, outcomes);
        self.run.record_candidate(candidate, &report)?;
        let accepted = report.gate;
        self.manifest.lineage.push(LineageEntry {
            version: candidate.version_index,
            digest: candidate.digest(),
            accepted,
            gate: report.gate,
            critical: report.count(Severity::Critical),
            important: report.count(Severity::Important),
        });
        if accepted {
            self.state
                .lineage
                .accept(candidate.clone(), report.clone())?;
        } else {
            self.state.lineage.reject(candidate.clone(), report.clone());
        }
        Ok((report, accepted))
    }

    fn contrast(&self, r: u32, outcomes: &[TrialOutcome]) -> Result<(Partition, ContrastSignal)> {
        let split = partition(outcomes, &self.task.reward_kind)?;
        let signal = extract_contrast(
            r,
            &split,
            outcomes,
            self.reasoner,
            ContrastOptions {
                excerpt_m: self.config.excerpt_m,
                distill_on_all_pass: r == 0,
            },
        )?;
        Ok((split, signal))
    }

    fn budget_left(&self) -> bool {
        self.state.spent_usd < self.config.budget.max_cost_usd
    }

    fn persist(&self) -> Result<()> {
        self.run.write_manifest(&self.manifest)
    }
}

pub fn run_evolution(
    task: &TaskSpec,
    config: &LoopConfig,
    backend: &dyn AgentBackend,
    reasoner: &dyn Reasoner,
    run_root: &Path,
    options: &RunOptions,
) -> Result<RunResult> {
    run_evolution_with(
        task,
        config,
        backend,
        reasoner,
        &Auditor::standard(),
        run_root,
        options,
    )
}

pub fn run_evolution_with(
    task: &TaskSpec,
    config: &LoopConfig,
    backend: &dyn AgentBackend,
    reasoner: &dyn Reasoner,
    auditor: &Auditor,
    run_root: &Path,
    options: &RunOptions,
) -> Result<RunResult> {
    config.check()?;
    let run = RunDir::create(run_root)?;
    let mut manifest = RunManifest::new("evolver", task, serde_json::to_value(config)?);
    manifest.stamp("prepare");
    manifest.prep = Some(prepare_training_env(task, &run.root.join("workspaces"))?);
    let index =
        TrainingManifestIndex::build(&task.train_env, task.curated_training_skill_slot.as_deref())?;
    let mut d = Driver {
        task: Arc::new(task.clone()),
        config,
        backend,
        reasoner,
        auditor,
        run,
        index,
        parametric: Vec::new(),
        manifest,
        state: LoopState::default(),
    };
    d.persist()?;

    d.manifest.stamp("understand");
    let axes = understand(task, &d.index, reasoner, config.k.max(config.refine_k))?;
    d.parametric = axes
        .iter()
        .filter(|a| a.kind == AxisKind::Parametric)
        .filter_map(|a| a.observed_training_value.clone())
        .collect();
    d.manifest.axes = axes.clone();

    // r = 0: bootstrap, explore, distil.
    let s0 = plan_strategies(
        &axes,
        None,
        None,
        reasoner,
        config.k,
        0,
        config.strategy_attempts,
    )?;
    let bootstrap = build_bootstrap_skill(&s0, &axes)?;
    let tau0 = d.explore(0, Some(&bootstrap), &s0)?;
    let (split, signal) = d.contrast(0, &tau0)?;
    let mut record = IterationRecord {
        iteration: 0,
        strategies: s0,
        deployed_version: None,
        trial_ids: tau0.iter().map(|o| o.trial_id.clone()).collect(),
        pass_count: pass_count(task, &tau0),
        partition: split,
        signal: signal.clone(),
        candidate_version: None,
        accepted: false,
        report: None,
        synthesis_error: None,
    };
    d.state.degenerate_flags.push(signal.degenerate);
    let mut latest: Option<SkillArtifact> = None;
    d.manifest.stamp("distill");
    match d.synthesize(None, 0, &signal, &[]) {
        Ok(v1) => {
            mirror(&v1, &d.run.root.join("output"))?;
            let (report, accepted) = d.admit(&v1, &tau0)?;
            d.state.pending_targets = violation_to_target(&report);
            record.candidate_version = Some(v1.version_index);
            record.accepted = accepted;
            record.report = Some(report);
            latest = Some(v1);
        }
        Err(e) => {
            log::warn!("distillation failed: {e}");
            record.synthesis_error = Some(e.to_string());
        }
    }
    d.state.history.push(record);
    d.state.outcome_history.push(tau0);
    d.manifest.iterations_executed = 1;
    d.persist()?;

    // r = 1 .. R-1: deploy, stress-test, patch, audit.
    for r in 1..config.r_max {
        d.state.r = r;
        let Some(current) = latest.clone() else {
            break;
        };
        if !d.budget_left() {
            d.manifest.budget_exhausted = true;
            break;
        }
        let prev = d.state.outcome_history.last().cloned().unwrap_or_default();
        let sr = plan_strategies(
            &axes,
            Some(&current),
            Some(&prev),
            reasoner,
            config.refine_k,
            r,
            config.strategy_attempts,
        )?;
        let tau = d.explore(r, Some(&current), &sr)?;
        let passes = pass_count(task, &tau);
        let (split, signal) = d.contrast(r, &tau)?;
        d.state.degenerate_flags.push(signal.degenerate);
        let mut record = IterationRecord {
            iteration: r,
            strategies: sr,
            deployed_version: Some(current.version_index),
            trial_ids: tau.iter().map(|o| o.trial_id.clone()).collect(),
            pass_count: passes,
            partition: split,
            signal: signal.clone(),
            candidate_version: None,
            accepted: false,
            report: None,
            synthesis_error: None,
        };
        let targets = std::mem::take(&mut d.state.pending_targets);
        let nothing_to_do = signal.features.is_empty() && targets.is_empty();
        let report = if nothing_to_do {
            // Keep v_r and re-audit it against this iteration's traces.
            let report = d.audit(&current, &tau);
            d.state.pending_targets = violation_to_target(&report);
            report
        } else {
            d.manifest.stamp(format!("patch-r{r}"));
            match d.synthesize(Some(&current), r, &signal, &targets) {
                Ok(candidate) => {
                    let (report, accepted) = d.admit(&candidate, &tau)?;
                    d.state.pending_targets = violation_to_target(&report);
                    record.candidate_version = Some(candidate.version_index);
                    record.accepted = accepted;
                    latest = Some(candidate);
                    report
                }
                Err(e) => {
                    log::warn!("patch at r={r} failed: {e}");
                    record.synthesis_error = Some(e.to_string());
                    d.state.pending_targets = targets;
                    AuditReport::new(vec![Violation::new(
                        CheckId::Literals,
                        Severity::Critical,
                        Locus::Artifact,
                        format!("no candidate produced: {e}"),
                    )])
                }
            }
        };
        record.report = Some(report.clone());
        d.state.history.push(record);
        d.state.outcome_history.push(tau);
        d.manifest.iterations_executed = r + 1;
        d.persist()?;
        if should_terminate(r, config.r_max, config.refine_k, &report, passes) {
            break;
        }
    }

    // Finalize over accepted versions, then validate.
    let (mut chosen, decision) = if d.state.lineage.is_empty() {
        d.manifest.authoring_failed = true;
        (None, None)
    } else {
        let decision = finalize(&d.state, task, config.weights)?;
        let Chosen::Version { version } = decision.chosen else {
            unreachable!("finalize picks a version")
        };
        let v = d
            .state
            .lineage
            .accepted
            .iter()
            .find(|(a, _)| a.version_index == version)
            .map(|(a, _)| a.clone())
            .expect("chosen version is accepted");
        (Some(v), Some(decision))
    };
    let mut decision = decision;
    if let (Some(patch), Some(base)) = (&options.merge_patch, chosen.clone()) {
        let max_version = d
            .state
            .lineage
            .accepted
            .iter()
            .map(|(a, _)| a.version_index)
            .chain(
                d.state
                    .lineage
                    .candidates
                    .iter()
                    .map(|c| c.artifact.version_index),
            )
            .max()
            .unwrap_or(base.version_index);
        let mut merged = apply_patch(&base, patch)?;
        merged.version_index = max_version + 1;
        let report = d.audit(&merged, &[]);
        d.run.record_candidate(&merged, &report)?;
        if let Some(dec) = decision.as_mut() {
            dec.chosen = Chosen::Merge {
                base: base.version_index,
                merged_version: merged.version_index,
            };
            dec.rationale.push_str(&format!(
                "; operator merge applied as v{}",
                merged.version_index
            ));
        }
        d.manifest.merge_applied = true;
        chosen = Some(merged);
    }
    d.manifest.finalize = decision.clone();
    d.manifest.finalize_at_ms = Some(d.manifest.stamp("finalize"));
    if let Some(v) = &chosen {
        mirror(v, &d.run.root.join("final"))?;
    }
    d.persist()?;

    let validation = validate(
        &d.task,
        chosen.as_ref(),
        config.v,
        config.budget,
        d.backend,
        &d.run,
        d.manifest.iterations_executed,
    )?;
    d.manifest.harness_invocations += validation.trial_ids.len();
    d.manifest.validation = Some(validation.clone());
    d.manifest.stamp("done");
    d.persist()?;
    Ok(RunResult {
        final_skill: chosen,
        decision,
        validation,
        manifest: d.manifest,
        state: d.state,
        run_dir: d.run.root,
    })
}

/// Run V validation trials on the held-out environment.
pub fn validate(
    task: &Arc<TaskSpec>,
    skill: Option<&SkillArtifact>,
    v: usize,
    budget: Budget,
    backend: &dyn AgentBackend,
    run: &RunDir,
    iteration: u32,
) -> Result<ValidationResult> {
    let requests: Vec<TrialRequest> = (1..=v)
        .map(|i| {
            let id = format!("val-t{i}");
            TrialRequest {
                workspace: run.workspace(&id),
                trial_id: id,
                task: task.clone(),
                deployed_skill: skill.cloned(),
                strategy_index: i,
                strategy: None,
                iteration,
                phase: TrialPhase::Validation,
                budget,
            }
        })
        .collect();
    let outcomes = run_parallel(backend, &requests, &run.store)?;
    run.append_trials(&outcomes)?;
    let rewards: Vec<f64> = outcomes.iter().map(|o| o.reward).collect();
    let pass_count = pass_count(task, &outcomes);
    let binary = matches!(task.reward_kind, RewardKind::Binary);
    let score = if binary {
        crate::metrics::avg_at_v(&rewards, task.pass_threshold())
    } else {
        crate::metrics::mean(&rewards)
    };
    Ok(ValidationResult {
        skill_version: skill.map(|s| s.version_index),
        trial_ids: outcomes.iter().map(|o| o.trial_id.clone()).collect(),
        rewards,
        pass_count,
        score,
        binary,
    })
}

// ---------------------------------------------------------------------------
// Post-hoc checks over a run store

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HygieneFinding {
    pub trial_id: String,
    pub seq: u32,
    pub phase: TrialPhase,
    pub reference: String,
}

fn mentions(hay: &str, root: &Path) -> bool {
    let root = root.to_string_lossy();
    let root = root.trim_end_matches('/');
    hay.match_indices(root).any(|(i, _)| {
        hay[i + root.len()..]
            .chars()
            .next()
            .is_none_or(|c| c == '/' || c.is_whitespace() || "\"'`;)".contains(c))
    })
}

/// Events of exploration trials that reference the validation environment,
/// and of validation trials that reference the training environment.
pub fn split_hygiene(store: &TraceStore, task: &TaskSpec) -> Result<Vec<HygieneFinding>> {
    let mut out = Vec::new();
    for o in store.load_all()? {
        let forbidden = match o.phase {
            TrialPhase::Validation => &task.train_env,
            _ => &task.val_env,
        };
        for e in &o.trace.events {
            let refs = e
                .target_paths
                .iter()
                .map(String::as_str)
                .chain(e.command.as_deref());
            for r in refs {
                if mentions(r, forbidden) {
                    out.push(HygieneFinding {
                        trial_id: o.trial_id.clone(),
                        seq: e.seq,
                        phase: o.phase,
                        reference: r.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Validation trials whose start precedes the finalize record.
pub fn phase_order_violations(run_dir: &Path) -> Result<Vec<String>> {
    let manifest = RunManifest::load(run_dir)?;
    let store = TraceStore::open(run_dir.join("traces"))?;
    let Some(at) = manifest.finalize_at_ms else {
        return Err(Error::Loop("run has no finalize record".into()));
    };
    Ok(store
        .load_all()?
        .into_iter()
        .filter(|o| o.phase == TrialPhase::Validation && o.started_at_ms < at)
        .map(|o| o.trial_id)
        .collect())
}

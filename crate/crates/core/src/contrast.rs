//! Partitioning trial outcomes, extracting the contrast between winners and
//! losers, and turning it into a candidate skill through a pluggable
//! reasoner.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::audit::{CheckId, Locus, TrainingManifestIndex};
use crate::error::{Error, Result};
use crate::runner::{TraceEvent, TrialOutcome, TrialSummary};
use crate::skill::{
    apply_patch, artifact_from_patch, hoist_permutation, Edit, Patch, RelPath, SkillArtifact,
    MANIFEST_FILE,
};
use crate::strategy::{Axis, StrategySet};
use crate::task::{RewardKind, TaskSpec};

// ---------------------------------------------------------------------------
// Reasoner contract

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Understand,
    Strategies,
    Extract,
    Patch,
    Judge,
    EvalDesign,
    Draft,
    Grade,
    Analyze,
    Improve,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("role serializes");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

/// Text view of a skill for reasoner documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillSnapshot {
    pub version_index: u32,
    pub files: BTreeMap<String, String>,
}

impl From<&SkillArtifact> for SkillSnapshot {
    fn from(v: &SkillArtifact) -> Self {
        SkillSnapshot {
            version_index: v.version_index,
            files: v
                .files
                .iter()
                .map(|(p, b)| (p.to_string(), String::from_utf8_lossy(b).into_owned()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRequest {
    pub iteration: u32,
    pub k: usize,
    pub axes: Vec<Axis>,
    pub prior_skill: Option<SkillArtifact>,
    pub failing_trials: Vec<TrialSummary>,
    /// Problems with the previous answer, when retrying.
    pub feedback: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Positive,
    Negative,
}

/// A bounded view of one trial's trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExcerpt {
    pub trial_id: String,
    pub strategy_index: usize,
    pub reward: f64,
    pub total_events: usize,
    pub events: Vec<TraceEvent>,
}

/// First and last `m` events plus every shell event, in order.
pub fn excerpt(outcome: &TrialOutcome, m: usize) -> TraceExcerpt {
    let evs = &outcome.trace.events;
    let n = evs.len();
    let events = evs
        .iter()
        .enumerate()
        .filter(|(i, e)| *i < m || *i + m >= n || e.is_shell())
        .map(|(_, e)| e.clone())
        .collect();
    TraceExcerpt {
        trial_id: outcome.trial_id.clone(),
        strategy_index: outcome.strategy_index,
        reward: outcome.reward,
        total_events: n,
        events,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRequest {
    pub iteration: u32,
    pub instruction: String,
    pub skill: Option<SkillSnapshot>,
    pub features: Vec<Feature>,
    pub degenerate: Option<Degenerate>,
    pub targets: Vec<PatchTarget>,
    pub feedback: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub check: CheckId,
    pub question: String,
    pub instruction: String,
    pub skill: SkillSnapshot,
    pub index_entities: Vec<String>,
    pub traces: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeFinding {
    pub path: Option<String>,
    #[serde(default)]
    pub lines: Option<(usize, usize)>,
    pub evidence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    WithSkill,
    WithoutSkill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub trials: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum ReasonerRequest {
    Understand {
        instruction: String,
        train_files: Vec<String>,
    },
    Strategies(StrategyRequest),
    Extract {
        iteration: u32,
        side: Side,
        traces: Vec<TraceExcerpt>,
    },
    Patch(PatchRequest),
    Judge(JudgeRequest),
    EvalDesign {
        instruction: String,
        train_files: Vec<String>,
    },
    Draft {
        instruction: String,
        rubric: String,
    },
    Grade {
        rubric: String,
        arm: ArmResult,
    },
    Analyze {
        rubric: String,
        grades: Vec<ArmGrade>,
    },
    Improve {
        skill: SkillSnapshot,
        feedback: String,
    },
}

impl ReasonerRequest {
    pub fn role(&self) -> Role {
        match self {
            ReasonerRequest::Understand { .. } => Role::Understand,
            ReasonerRequest::Strategies(_) => Role::Strategies,
            ReasonerRequest::Extract { .. } => Role::Extract,
            ReasonerRequest::Patch(_) => Role::Patch,
            ReasonerRequest::Judge(_) => Role::Judge,
            ReasonerRequest::EvalDesign { .. } => Role::EvalDesign,
            ReasonerRequest::Draft { .. } => Role::Draft,
            ReasonerRequest::Grade { .. } => Role::Grade,
            ReasonerRequest::Analyze { .. } => Role::Analyze,
            ReasonerRequest::Improve { .. } => Role::Improve,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmGrade {
    pub arm: Arm,
    pub score: f64,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReasonerResponse {
    Axes {
        axes: Vec<Axis>,
    },
    Strategies(StrategySet),
    Features {
        features: Vec<Feature>,
    },
    Patch(Patch),
    Verdicts {
        findings: Vec<JudgeFinding>,
    },
    Rubric {
        text: String,
    },
    Grade {
        grade: ArmGrade,
        /// Paths the grading session read.
        #[serde(default)]
        accessed_paths: Vec<String>,
    },
    Analysis {
        feedback: String,
        #[serde(default)]
        accessed_paths: Vec<String>,
    },
    /// The reasoner declines the role; callers use their heuristic.
    Unavailable,
}

impl ReasonerResponse {
    pub fn role(&self) -> &'static str {
        match self {
            ReasonerResponse::Axes { .. } => "axes",
            ReasonerResponse::Strategies(_) => "strategies",
            ReasonerResponse::Features { .. } => "features",
            ReasonerResponse::Patch(_) => "patch",
            ReasonerResponse::Verdicts { .. } => "verdicts",
            ReasonerResponse::Rubric { .. } => "rubric",
            ReasonerResponse::Grade { .. } => "grade",
            ReasonerResponse::Analysis { .. } => "analysis",
            ReasonerResponse::Unavailable => "unavailable",
        }
    }

    /// Whether this response can answer a request of `role`.
    pub fn answers(&self, role: Role) -> bool {
        matches!(
            (self, role),
            (ReasonerResponse::Axes { .. }, Role::Understand)
                | (ReasonerResponse::Strategies(_), Role::Strategies)
                | (ReasonerResponse::Features { .. }, Role::Extract)
                | (
                    ReasonerResponse::Patch(_),
                    Role::Patch | Role::Draft | Role::Improve
                )
                | (ReasonerResponse::Verdicts { .. }, Role::Judge)
                | (ReasonerResponse::Rubric { .. }, Role::EvalDesign)
                | (ReasonerResponse::Grade { .. }, Role::Grade)
                | (ReasonerResponse::Analysis { .. }, Role::Analyze)
                | (ReasonerResponse::Unavailable, _)
        )
    }
}

pub trait Reasoner: Send + Sync {
    fn respond(&self, request: &ReasonerRequest) -> Result<ReasonerResponse>;
}

/// Always declines; every caller falls back to its heuristic.
#[derive(Debug, Default, Clone, Copy)]
pub struct HeuristicReasoner;

impl Reasoner for HeuristicReasoner {
    fn respond(&self, _: &ReasonerRequest) -> Result<ReasonerResponse> {
        Ok(ReasonerResponse::Unavailable)
    }
}

/// Replays queued responses. Each request takes the first queued response
/// that can answer its role; with none left the reasoner declines.
#[derive(Debug, Default)]
pub struct ScriptedReasoner {
    queue: Mutex<VecDeque<ReasonerResponse>>,
    log: Mutex<Vec<Role>>,
}

impl ScriptedReasoner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(self, response: ReasonerResponse) -> Self {
        self.queue.lock().expect("queue").push_back(response);
        self
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let responses: Vec<ReasonerResponse> = crate::util::read_json(path)?;
        Ok(responses.into_iter().fold(Self::new(), Self::with))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("queue").len()
    }

    pub fn roles_asked(&self) -> Vec<Role> {
        self.log.lock().expect("log").clone()
    }
}

impl Reasoner for ScriptedReasoner {
    fn respond(&self, request: &ReasonerRequest) -> Result<ReasonerResponse> {
        let role = request.role();
        self.log.lock().expect("log").push(role);
        let mut q = self.queue.lock().expect("queue");
        match q.iter().position(|r| r.answers(role)) {
            Some(i) => Ok(q.remove(i).expect("position is in range")),
            None => Ok(ReasonerResponse::Unavailable),
        }
    }
}

/// Adapter for an external reasoner: one process per request, the request
/// document on stdin and the response document on stdout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubprocessReasoner {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Reasoner for SubprocessReasoner {
    fn respond(&self, request: &ReasonerRequest) -> Result<ReasonerResponse> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Reasoner(format!("spawn {}: {e}", self.program.display())))?;
        let body = serde_json::to_vec(request)?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(&body)
            .map_err(|e| Error::Reasoner(format!("write request: {e}")))?;
        let out = child
            .wait_with_output()
            .map_err(|e| Error::Reasoner(format!("wait: {e}")))?;
        if !out.status.success() {
            return Err(Error::Reasoner(format!(
                "{} exited with {} on role {}",
                self.program.display(),
                out.status,
                request.role()
            )));
        }
        let response: ReasonerResponse = serde_json::from_slice(&out.stdout)
            .map_err(|e| Error::Reasoner(format!("bad response document: {e}")))?;
        if !response.answers(request.role()) {
            return Err(Error::Reasoner(format!(
                "role {} answered with {}",
                request.role(),
                response.role()
            )));
        }
        Ok(response)
    }
}

// ---------------------------------------------------------------------------
// Features and partition

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Constraint,
    CodePattern,
    ToolUse,
    Interpretation,
}

/// Inclusive range of event sequence numbers within one trial.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventRef {
    pub trial_id: String,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub description: String,
    pub provenance: Vec<EventRef>,
    pub kind: FeatureKind,
    /// The reasoner judged this feature pretraining-obvious.
    #[serde(default)]
    pub pretraining_obvious: bool,
}

impl Feature {
    pub fn key(&self) -> String {
        normalize_description(&self.description)
    }
}

pub fn normalize_description(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// No losing trial to contrast against.
    AllPass,
    /// No winning trial; the signal lists common failure features.
    AllFail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub degenerate: Option<Degenerate>,
}

fn rank_desc(a: &&TrialOutcome, b: &&TrialOutcome) -> std::cmp::Ordering {
    b.reward
        .total_cmp(&a.reward)
        .then(a.strategy_index.cmp(&b.strategy_index))
        .then(a.trial_id.cmp(&b.trial_id))
}

/// Split a batch into winners and losers. Membership depends only on the
/// outcomes themselves, never on input order.
pub fn partition(outcomes: &[TrialOutcome], kind: &RewardKind) -> Result<Partition> {
    if outcomes.is_empty() {
        return Err(Error::Contrast("cannot partition an empty batch".into()));
    }
    let mut ranked: Vec<&TrialOutcome> = outcomes.iter().collect();
    ranked.sort_by(rank_desc);
    let (positives, negatives): (Vec<&TrialOutcome>, Vec<&TrialOutcome>) = match kind {
        RewardKind::Binary => ranked
            .iter()
            .partition(|o| !o.over_budget && o.reward >= 1.0),
        RewardKind::ScalarSpeedup { .. } => {
            let n = outcomes.len().div_ceil(4);
            let pos: Vec<&TrialOutcome> = ranked
                .iter()
                .copied()
                .filter(|o| !o.over_budget && o.reward > 0.0)
                .take(n)
                .collect();
            let taken: BTreeSet<&str> = pos.iter().map(|o| o.trial_id.as_str()).collect();
            let mut neg: Vec<&TrialOutcome> = ranked
                .iter()
                .copied()
                .filter(|o| o.over_budget && !taken.contains(o.trial_id.as_str()))
                .collect();
            for o in ranked.iter().rev() {
                if neg.len() >= n {
                    break;
                }
                if !taken.contains(o.trial_id.as_str())
                    && !neg.iter().any(|x| x.trial_id == o.trial_id)
                {
                    neg.push(o);
                }
            }
            (pos, neg)
        }
    };
    let ids = |v: Vec<&TrialOutcome>| {
        let mut v: Vec<String> = v.into_iter().map(|o| o.trial_id.clone()).collect();
        v.sort();
        v
    };
    let degenerate = match (positives.is_empty(), negatives.is_empty()) {
        (false, true) => Some(Degenerate::AllPass),
        (true, _) => Some(Degenerate::AllFail),
        _ => None,
    };
    Ok(Partition {
        positives: ids(positives),
        negatives: ids(negatives),
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Contrast extraction

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastSignal {
    pub iteration: u32,
    pub positives_used: Vec<String>,
    pub negatives_used: Vec<String>,
    pub features: Vec<Feature>,
    pub degenerate: Option<Degenerate>,
    /// Features the reasoner marked pretraining-obvious; kept for the record.
    #[serde(default)]
    pub dropped_as_pretraining: Vec<Feature>,
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastOptions {
    pub excerpt_m: usize,
    /// Distil from winners alone when every trial passed.
    pub distill_on_all_pass: bool,
}

impl Default for ContrastOptions {
    fn default() -> Self {
        ContrastOptions {
            excerpt_m: 60,
            distill_on_all_pass: false,
        }
    }
}

/// Heuristic reading function: one tool-use feature per distinct shell
/// command, with provenance to every event that ran it.
pub fn heuristic_features(traces: &[TraceExcerpt]) -> Vec<Feature> {
    let mut by_cmd: BTreeMap<String, (String, Vec<EventRef>)> = BTreeMap::new();
    for t in traces {
        for e in &t.events {
            if !e.is_shell() || e.denied.is_some() {
                continue;
            }
            let Some(cmd) = e.command.as_deref() else {
                continue;
            };
            let entry = by_cmd
                .entry(normalize_description(cmd))
                .or_insert_with(|| (cmd.trim().to_string(), Vec::new()));
            entry.1.push(EventRef {
                trial_id: t.trial_id.clone(),
                start: e.seq,
                end: e.seq,
            });
        }
    }
    by_cmd
        .into_values()
        .map(|(cmd, provenance)| Feature {
            description: format!("runs `{cmd}`"),
            provenance,
            kind: FeatureKind::ToolUse,
            pretraining_obvious: false,
        })
        .collect()
}

fn read_side(
    iteration: u32,
    side: Side,
    traces: Vec<TraceExcerpt>,
    reasoner: &dyn Reasoner,
    retries: usize,
) -> Result<Vec<Feature>> {
    let mut last_err = None;
    for _ in 0..=retries {
        let req = ReasonerRequest::Extract {
            iteration,
            side,
            traces: traces.clone(),
        };
        match reasoner.respond(&req) {
            Ok(ReasonerResponse::Features { features }) => {
                return Ok(keep_traceable(features, &traces))
            }
            Ok(ReasonerResponse::Unavailable) => return Ok(heuristic_features(&traces)),
            Ok(other) => {
                last_err = Some(Error::Reasoner(format!(
                    "extract answered with {}",
                    other.role()
                )))
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Drop provenance references that do not land on events of the given
/// traces, then drop features left with none.
fn keep_traceable(features: Vec<Feature>, traces: &[TraceExcerpt]) -> Vec<Feature> {
    let known: BTreeMap<&str, BTreeSet<u32>> = traces
        .iter()
        .map(|t| {
            (
                t.trial_id.as_str(),
                t.events.iter().map(|e| e.seq).collect(),
            )
        })
        .collect();
    features
        .into_iter()
        .filter_map(|mut f| {
            f.provenance.retain(|r| {
                r.start <= r.end
                    && known
                        .get(r.trial_id.as_str())
                        .is_some_and(|seqs| seqs.range(r.start..=r.end).next().is_some())
            });
            if f.provenance.is_empty() {
                log::warn!("dropping feature without provenance: {:?}", f.description);
                None
            } else {
                Some(f)
            }
        })
        .collect()
}

/// Features read from the winners that the losers do not share.
pub fn extract_contrast(
    iteration: u32,
    split: &Partition,
    outcomes: &[TrialOutcome],
    reasoner: &dyn Reasoner,
    options: ContrastOptions,
) -> Result<ContrastSignal> {
    let by_id: BTreeMap<&str, &TrialOutcome> =
        outcomes.iter().map(|o| (o.trial_id.as_str(), o)).collect();
    let traces = |ids: &[String]| -> Result<Vec<TraceExcerpt>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|o| excerpt(o, options.excerpt_m))
                    .ok_or_else(|| Error::Contrast(format!("partition names unknown trial {id}")))
            })
            .collect()
    };
    let mut signal = ContrastSignal {
        iteration,
        positives_used: split.positives.clone(),
        negatives_used: split.negatives.clone(),
        features: Vec::new(),
        degenerate: split.degenerate,
        dropped_as_pretraining: Vec::new(),
    };
    let features = match split.degenerate {
        Some(Degenerate::AllPass) if !options.distill_on_all_pass => return Ok(signal),
        Some(Degenerate::AllPass) => read_side(
            iteration,
            Side::Positive,
            traces(&split.positives)?,
            reasoner,
            1,
        )?,
        Some(Degenerate::AllFail) => read_side(
            iteration,
            Side::Negative,
            traces(&split.negatives)?,
            reasoner,
            1,
        )?,
        None => {
            let pos = read_side(
                iteration,
                Side::Positive,
                traces(&split.positives)?,
                reasoner,
                1,
            )?;
            let neg = read_side(
                iteration,
                Side::Negative,
                traces(&split.negatives)?,
                reasoner,
                1,
            )?;
            let losers: BTreeSet<String> = neg.iter().map(Feature::key).collect();
            pos.into_iter()
                .filter(|f| !losers.contains(&f.key()))
                .collect()
        }
    };
    let mut seen = BTreeSet::new();
    for f in features {
        if !seen.insert(f.key()) {
            continue;
        }
        if f.pretraining_obvious {
            signal.dropped_as_pretraining.push(f);
        } else {
            signal.features.push(f);
        }
    }
    Ok(signal)
}

// ---------------------------------------------------------------------------
// Candidate synthesis

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixClass {
    HoistInvocation,
    AbstractLiteral,
    SplitScript,
    ProbeAtRuntime,
    BundleScript,
    ForceInvocation,
    CiteOrDrop,
    AddRederive,
    GeneralizeName,
}

/// A refinement obligation derived from an audit violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchTarget {
    pub check: CheckId,
    pub locus: Locus,
    pub fix: FixClass,
    pub instruction: String,
    pub evidence: String,
}

/// Build the next candidate. At r=0 the patch authors the first domain
/// skill; afterwards it edits `prior` surgically.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_candidate(
    task: &TaskSpec,
    prior: Option<&SkillArtifact>,
    iteration: u32,
    signal: &ContrastSignal,
    targets: &[PatchTarget],
    reasoner: &dyn Reasoner,
    index: &TrainingManifestIndex,
    feedback: &[String],
) -> Result<SkillArtifact> {
    let pending_degenerate = signal.features.is_empty() && targets.is_empty();
    if prior.is_some() && pending_degenerate && signal.degenerate.is_some() {
        return Err(Error::Contrast(
            "degenerate contrast and no pending audit targets".into(),
        ));
    }
    let req = ReasonerRequest::Patch(PatchRequest {
        iteration,
        instruction: task.instruction.clone(),
        skill: prior.map(SkillSnapshot::from),
        features: signal.features.clone(),
        degenerate: signal.degenerate,
        targets: targets.to_vec(),
        feedback: feedback.to_vec(),
    });
    let patch = match reasoner.respond(&req)? {
        ReasonerResponse::Patch(p) => p,
        ReasonerResponse::Unavailable => heuristic_patch(task, prior, signal, targets, index)?,
        other => {
            return Err(Error::Reasoner(format!(
                "patch answered with {}",
                other.role()
            )));
        }
    };
    prescreen(&patch, prior, index)?;
    match prior {
        None => artifact_from_patch(&patch, 1),
        Some(v) => apply_patch(v, &patch),
    }
}

fn is_script(path: &RelPath) -> bool {
    path.as_str().starts_with(crate::skill::SCRIPTS_DIR)
}

/// Reject scripts introduced by the patch that embed training literals.
pub fn prescreen(
    patch: &Patch,
    prior: Option<&SkillArtifact>,
    index: &TrainingManifestIndex,
) -> Result<()> {
    for edit in &patch.edits {
        let Some(text) = edit.introduced_text() else {
            continue;
        };
        if !is_script(edit.path()) {
            continue;
        }
        let before = prior
            .and_then(|v| v.text(edit.path().as_str()))
            .unwrap_or("");
        for hit in index.literal_hits(text) {
            if !index.literal_hits(before).contains(&hit) {
                return Err(Error::PreScreen(format!(
                    "{} introduces training literal {hit:?}",
                    edit.path()
                )));
            }
        }
    }
    Ok(())
}

fn heuristic_patch(
    task: &TaskSpec,
    prior: Option<&SkillArtifact>,
    signal: &ContrastSignal,
    targets: &[PatchTarget],
    index: &TrainingManifestIndex,
) -> Result<Patch> {
    let cite = |f: &Feature| {
        f.provenance
            .iter()
            .map(|r| format!("[trace:{}#{}-{}]", r.trial_id, r.start, r.end))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let bullet = |f: &Feature| {
        let prefix = match signal.degenerate {
            Some(Degenerate::AllFail) => "Avoid what every failing attempt did: ",
            _ => "",
        };
        format!(
            "- {prefix}{} {}",
            index.abstract_literals(&f.description),
            cite(f)
        )
    };
    let Some(v) = prior else {
        let steps: Vec<String> = signal.features.iter().map(bullet).collect();
        let body = if steps.is_empty() {
            "- Work directly from the task inputs; inspect them before acting.".to_string()
        } else {
            steps.join("\n")
        };
        let manifest = format!(
            "---\nname: task-procedure\ndescription: Procedure distilled from contrasting training attempts.\n---\n\n\
## Procedure\n\n{body}\n\n## Task\n\n{}\n",
            index.abstract_literals(&task.instruction)
        );
        return Ok(Patch::new(vec![Edit::AddFile {
            path: RelPath::new(MANIFEST_FILE)?,
            content: manifest,
        }]));
    };

    let manifest_path = RelPath::new(MANIFEST_FILE)?;
    let hoist = targets
        .iter()
        .any(|t| matches!(t.fix, FixClass::HoistInvocation | FixClass::ForceInvocation));
    if hoist {
        if let Some(order) = hoist_permutation(&v.manifest) {
            if order.iter().enumerate().any(|(i, &j)| i != j) {
                return Ok(Patch::new(vec![Edit::ReorderSections {
                    path: manifest_path,
                    permutation: order,
                }]));
            }
        }
    }

    // Line-local rewrites on SKILL.md: abstract literals, add re-derive notes.
    let text = v.manifest_text();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut edits = Vec::new();
    let mut touched = BTreeSet::new();
    for t in targets {
        let Locus::File {
            path,
            lines: (first, last),
        } = &t.locus
        else {
            continue;
        };
        // loci are 1-based inclusive; edits are 0-based half-open
        let start = first.saturating_sub(1);
        if path != MANIFEST_FILE || start >= lines.len() {
            continue;
        }
        let end = (*last).min(lines.len()).max(start + 1);
        if (start..end).any(|l| touched.contains(&l)) {
            continue;
        }
        let original: String = lines[start..end].concat();
        let rewritten = match t.fix {
            FixClass::AbstractLiteral | FixClass::GeneralizeName => {
                index.abstract_literals(&original)
            }
            FixClass::AddRederive => format!(
                "{}  Re-derive this value from the inputs at runtime.\n",
                original.trim_end()
            ),
            _ => continue,
        };
        if rewritten != original {
            touched.extend(start..end);
            edits.push(Edit::ReplaceRegion {
                path: manifest_path.clone(),
                start,
                end,
                content: rewritten,
            });
        }
    }
    edits.sort_by_key(|e| match e {
        Edit::ReplaceRegion { start, .. } => std::cmp::Reverse(*start),
        _ => std::cmp::Reverse(usize::MAX),
    });
    if edits.is_empty() && !signal.features.is_empty() {
        let notes: Vec<String> = signal.features.iter().map(bullet).collect();
        let mut addition = String::new();
        if !text.ends_with('\n') {
            addition.push('\n');
        }
        addition.push_str(&format!(
            "\n## Lessons from round {}\n\n{}\n",
            signal.iteration,
            notes.join("\n")
        ));
        edits.push(Edit::ReplaceRegion {
            path: manifest_path,
            start: lines.len(),
            end: lines.len(),
            content: addition,
        });
    }
    Ok(Patch::new(edits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::{Trace, TrialPhase};

    pub(crate) fn outcome(id: &str, index: usize, reward: f64, cmds: &[&str]) -> TrialOutcome {
        let events = cmds
            .iter()
            .enumerate()
            .map(|(i, c)| TraceEvent {
                seq: i as u32,
                turn: i as u32 + 1,
                tool: "Bash".into(),
                target_paths: vec![],
                command: Some(c.to_string()),
                command_digest: None,
                output_digest: None,
                output_bytes: None,
                denied: None,
            })
            .collect();
        TrialOutcome {
            trial_id: id.into(),
            phase: TrialPhase::Exploration,
            iteration: 0,
            strategy_index: index,
            trace: Trace {
                events,
                ..Default::default()
            },
            reward,
            correctness: reward > 0.0,
            over_budget: false,
            crashed: None,
            deployed_skill: None,
            workspace: PathBuf::from("/ws"),
            started_at_ms: 0,
            finished_at_ms: 0,
        }
    }

    fn scalar() -> RewardKind {
        RewardKind::ScalarSpeedup {
            timing_file: "t.json".into(),
        }
    }

    #[test]
    fn binary_partition() {
        let o: Vec<_> = [1.0, 1.0, 0.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, r)| outcome(&format!("t{}", i + 1), i + 1, *r, &[]))
            .collect();
        let p = partition(&o, &RewardKind::Binary).unwrap();
        assert_eq!(p.positives, ["t1", "t2"]);
        assert_eq!(p.negatives, ["t3", "t4"]);
        assert_eq!(p.degenerate, None);
    }

    #[test]
    fn scalar_partition_takes_quartiles() {
        let o: Vec<_> = [1.2, 0.0, 2.1, 1.0]
            .iter()
            .enumerate()
            .map(|(i, r)| outcome(&format!("t{}", i + 1), i + 1, *r, &[]))
            .collect();
        let p = partition(&o, &scalar()).unwrap();
        assert_eq!(p.positives, ["t3"]);
        assert_eq!(p.negatives, ["t2"]);
    }

    #[test]
    fn scalar_ties_prefer_lower_index_and_over_budget_is_negative() {
        let mut o: Vec<_> = [1.5, 1.5, 0.5, 0.9]
            .iter()
            .enumerate()
            .map(|(i, r)| outcome(&format!("t{}", i + 1), i + 1, *r, &[]))
            .collect();
        let p = partition(&o, &scalar()).unwrap();
        assert_eq!(p.positives, ["t1"]);
        o[0].over_budget = true;
        o[0].reward = 0.0;
        let p = partition(&o, &scalar()).unwrap();
        assert_eq!(p.positives, ["t2"]);
        assert_eq!(p.negatives, ["t1"]);
    }

    #[test]
    fn degenerate_partitions() {
        let pass: Vec<_> = (1..=4)
            .map(|i| outcome(&format!("t{i}"), i, 1.0, &[]))
            .collect();
        assert_eq!(
            partition(&pass, &RewardKind::Binary).unwrap().degenerate,
            Some(Degenerate::AllPass)
        );
        let fail: Vec<_> = (1..=4)
            .map(|i| outcome(&format!("t{i}"), i, 0.0, &[]))
            .collect();
        assert_eq!(
            partition(&fail, &RewardKind::Binary).unwrap().degenerate,
            Some(Degenerate::AllFail)
        );
        assert!(partition(&[], &RewardKind::Binary).is_err());
    }

    fn feature(desc: &str, trial: &str, seq: u32) -> Feature {
        Feature {
            description: desc.into(),
            provenance: vec![EventRef {
                trial_id: trial.into(),
                start: seq,
                end: seq,
            }],
            kind: FeatureKind::Constraint,
            pretraining_obvious: false,
        }
    }

    #[test]
    fn set_difference_and_provenance_filter() {
        let o = vec![
            outcome("w", 1, 1.0, &["a", "b"]),
            outcome("l", 2, 0.0, &["b"]),
        ];
        let p = partition(&o, &RewardKind::Binary).unwrap();
        let mut orphan = feature("C", "w", 0);
        orphan.provenance.clear();
        let r = ScriptedReasoner::new()
            .with(ReasonerResponse::Features {
                features: vec![
                    feature("A", "w", 0),
                    feature("B", "w", 1),
                    orphan,
                    feature("D", "nope", 0),
                ],
            })
            .with(ReasonerResponse::Features {
                features: vec![feature(" b ", "l", 0)],
            });
        let s = extract_contrast(0, &p, &o, &r, ContrastOptions::default()).unwrap();
        let descs: Vec<_> = s.features.iter().map(|f| f.description.as_str()).collect();
        assert_eq!(descs, ["A"]);
    }

    #[test]
    fn all_pass_yields_empty_marked_signal() {
        let o: Vec<_> = (1..=4)
            .map(|i| outcome(&format!("t{i}"), i, 1.0, &["x"]))
            .collect();
        let p = partition(&o, &RewardKind::Binary).unwrap();
        let s =
            extract_contrast(1, &p, &o, &HeuristicReasoner, ContrastOptions::default()).unwrap();
        assert!(s.features.is_empty());
        assert_eq!(s.degenerate, Some(Degenerate::AllPass));
    }

    #[test]
    fn heuristic_reads_distinct_shell_commands() {
        let o = vec![
            outcome("w", 1, 1.0, &["python solve.py", "ls"]),
            outcome("l", 2, 0.0, &["ls"]),
        ];
        let p = partition(&o, &RewardKind::Binary).unwrap();
        let s =
            extract_contrast(0, &p, &o, &HeuristicReasoner, ContrastOptions::default()).unwrap();
        assert_eq!(s.features.len(), 1);
        assert!(s.features[0].description.contains("solve.py"));
    }

    #[test]
    fn excerpt_keeps_ends_and_shell_events() {
        let mut o = outcome("w", 1, 1.0, &[]);
        for i in 0..300u32 {
            o.trace.events.push(TraceEvent {
                seq: i,
                turn: i + 1,
                tool: if i == 150 {
                    "Bash".into()
                } else {
                    "Read".into()
                },
                target_paths: vec![],
                command: None,
                command_digest: None,
                output_digest: None,
                output_bytes: None,
                denied: None,
            });
        }
        let x = excerpt(&o, 60);
        assert_eq!(x.events.len(), 121);
        assert!(x.events.iter().any(|e| e.seq == 150));
    }
}

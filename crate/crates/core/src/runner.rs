//! Trial execution through pluggable agent backends.
//!
//! Each trial owns a fresh workspace:
//!
//! ```text
//! <workspace>/
//!   env/                      copy of the task environment for the phase
//!   skills/<name>/            deployed skill, if any
//!   strategies/strategy-i.md  strategy file when the skill does not carry it
//! ```
//!
//! Events are appended to `<store>/<trial>.jsonl` one record per line and
//! flushed as they arrive, so a crashed trial leaves a usable prefix.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guard::{evaluate, GuardPhase, PathPolicy, Reason, ToolCallRequest};
use crate::skill::{mirror, SkillArtifact};
use crate::strategy::{strategy_file_name, Strategy};
use crate::task::{reward_of, Budget, RewardKind, TaskSpec};
use crate::util::{
    copy_tree, now_millis, physical_or_lexical, sha256_hex, tree_digest, write_json,
};

pub const ENV_DIR: &str = "env";
pub const SKILLS_DIR: &str = "skills";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    Exploration,
    Validation,
    /// Local A/B sessions; excluded from harness accounting.
    Local,
}

impl TrialPhase {
    pub fn guard_phase(self) -> GuardPhase {
        match self {
            TrialPhase::Validation => GuardPhase::Validation,
            TrialPhase::Exploration | TrialPhase::Local => GuardPhase::Exploration,
        }
    }

    pub fn is_harness(self) -> bool {
        !matches!(self, TrialPhase::Local)
    }
}

#[derive(Debug, Clone)]
pub struct TrialRequest {
    pub trial_id: String,
    pub task: Arc<TaskSpec>,
    pub deployed_skill: Option<SkillArtifact>,
    /// 1-based trial index within its batch; also the strategy index.
    pub strategy_index: usize,
    pub strategy: Option<Strategy>,
    pub iteration: u32,
    pub phase: TrialPhase,
    pub budget: Budget,
    pub workspace: PathBuf,
}

impl TrialRequest {
    pub fn env_dir(&self) -> PathBuf {
        self.workspace.join(ENV_DIR)
    }

    pub fn skill_dir(&self) -> Option<PathBuf> {
        self.deployed_skill
            .as_ref()
            .map(|s| self.workspace.join(SKILLS_DIR).join(&s.manifest.name))
    }

    /// Where the agent loads its strategy from: inside the deployed skill if
    /// the skill carries the file, else the workspace's strategies/ dir.
    pub fn strategy_file(&self) -> Option<PathBuf> {
        self.strategy.as_ref()?;
        let rel = strategy_file_name(self.strategy_index);
        match (&self.deployed_skill, self.skill_dir()) {
            (Some(skill), Some(dir)) if skill.file(&rel).is_some() => Some(dir.join(rel)),
            _ => Some(self.workspace.join(rel)),
        }
    }

    pub fn primary_script_path(&self) -> Option<PathBuf> {
        let skill = self.deployed_skill.as_ref()?;
        let script = skill.manifest.primary_script.as_ref()?;
        Some(self.skill_dir()?.join(script))
    }

    fn check(&self) -> Result<()> {
        if self.strategy_index == 0 {
            return Err(Error::Workspace("strategy_index is 1-based".into()));
        }
        if let Some(s) = &self.strategy {
            if s.index != self.strategy_index {
                return Err(Error::Workspace(format!(
                    "strategy {} routed to trial index {}",
                    s.index, self.strategy_index
                )));
            }
        }
        if !self.workspace.is_absolute() {
            return Err(Error::Workspace(format!(
                "workspace {} must be absolute",
                self.workspace.display()
            )));
        }
        Ok(())
    }
}

/// What a backend reports for one tool call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub turn: u32,
    pub tool: String,
    #[serde(default)]
    pub target_paths: Vec<String>,
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u32,
    pub turn: u32,
    pub tool: String,
    pub target_paths: Vec<String>,
    /// Shell command text, kept for invocation checks and contrast reading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_bytes: Option<u64>,
    /// Set when the path guard denied the call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denied: Option<Reason>,
}

const SHELL_TOOLS: [&str; 5] = ["bash", "shell", "sh", "exec", "run_command"];

impl TraceEvent {
    pub fn is_shell(&self) -> bool {
        SHELL_TOOLS.contains(&self.tool.to_ascii_lowercase().as_str())
    }

    pub fn is_read(&self) -> bool {
        matches!(
            self.tool.to_ascii_lowercase().as_str(),
            "read" | "view" | "cat" | "open"
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub tokens: u64,
    /// Token count is a byte-length proxy rather than backend-reported.
    pub tokens_approximate: bool,
    pub turns: u32,
    pub wall_clock_s: f64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployedSkill {
    pub name: String,
    pub version_index: u32,
    pub digest: String,
    pub primary_script: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial_id: String,
    pub phase: TrialPhase,
    pub iteration: u32,
    pub strategy_index: usize,
    pub trace: Trace,
    pub reward: f64,
    pub correctness: bool,
    pub over_budget: bool,
    #[serde(default)]
    pub crashed: Option<String>,
    pub deployed_skill: Option<DeployedSkill>,
    pub workspace: PathBuf,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

/// Compact view of an outcome handed to reasoner roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: String,
    pub strategy_index: usize,
    pub reward: f64,
    pub over_budget: bool,
    pub crashed: bool,
    pub turns: u32,
    pub shell_commands: Vec<String>,
}

impl TrialOutcome {
    pub fn summary(&self) -> TrialSummary {
        TrialSummary {
            trial_id: self.trial_id.clone(),
            strategy_index: self.strategy_index,
            reward: self.reward,
            over_budget: self.over_budget,
            crashed: self.crashed.is_some(),
            turns: self.trace.turns,
            shell_commands: self
                .trace
                .events
                .iter()
                .filter(|e| e.is_shell() && e.denied.is_none())
                .filter_map(|e| e.command.clone())
                .collect(),
        }
    }

    fn failed(request: &TrialRequest, message: String) -> Self {
        let now = now_millis();
        TrialOutcome {
            trial_id: request.trial_id.clone(),
            phase: request.phase,
            iteration: request.iteration,
            strategy_index: request.strategy_index,
            trace: Trace::default(),
            reward: 0.0,
            correctness: false,
            over_budget: false,
            crashed: Some(message),
            deployed_skill: None,
            workspace: request.workspace.clone(),
            started_at_ms: now,
            finished_at_ms: now,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub reference_time: f64,
    pub candidate_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendReport {
    #[serde(default)]
    pub correct: Option<bool>,
    #[serde(default)]
    pub tokens: Option<u64>,
    #[serde(default)]
    pub cost_usd: f64,
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub timing: Option<Timing>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendError {
    Crash(String),
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetExhausted;

/// Receives events as a backend produces them.
pub trait EventSink {
    fn record(&mut self, event: AgentEvent) -> std::result::Result<(), BudgetExhausted>;
    /// Policy file the agent's pre-tool hook should consult.
    fn policy_file(&self) -> Option<&Path> {
        None
    }
}

pub trait AgentBackend: Send + Sync {
    fn name(&self) -> &str;
    fn run(
        &self,
        request: &TrialRequest,
        sink: &mut dyn EventSink,
    ) -> std::result::Result<BackendReport, BackendError>;
}

/// Append-only store of per-trial event logs and outcome records.
#[derive(Debug, Clone)]
pub struct TraceStore {
    root: PathBuf,
}

impl TraceStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(TraceStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events_path(&self, trial_id: &str) -> PathBuf {
        self.root.join(format!("{trial_id}.jsonl"))
    }

    fn trace_path(&self, trial_id: &str) -> PathBuf {
        self.root.join(format!("{trial_id}.trace.json"))
    }

    fn outcome_path(&self, trial_id: &str) -> PathBuf {
        self.root.join(format!("{trial_id}.outcome.json"))
    }

    pub fn load_events(&self, trial_id: &str) -> Result<Vec<TraceEvent>> {
        let path = self.events_path(trial_id);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn load_outcome(&self, trial_id: &str) -> Result<TrialOutcome> {
        let mut outcome: TrialOutcome = crate::util::read_json(&self.outcome_path(trial_id))?;
        outcome.trace.events = self.load_events(trial_id)?;
        Ok(outcome)
    }

    pub fn trial_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".outcome.json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_all(&self) -> Result<Vec<TrialOutcome>> {
        self.trial_ids()?
            .iter()
            .map(|id| self.load_outcome(id))
            .collect()
    }

    /// True when `(trial_id, seq)` names a persisted event.
    pub fn resolves(&self, trial_id: &str, seq: u32) -> bool {
        self.load_events(trial_id)
            .map(|evs| evs.iter().any(|e| e.seq == seq))
            .unwrap_or(false)
    }

    fn write_outcome(&self, outcome: &TrialOutcome) -> Result<()> {
        let mut stored = outcome.clone();
        stored.trace.events.clear();
        write_json(&self.outcome_path(&outcome.trial_id), &stored)
    }
}

/// Sink that checks every event against the trial's path policy, enforces
/// the turn cap, and appends to the event log.
struct TraceRecorder {
    policy: PathPolicy,
    policy_file: PathBuf,
    writer: BufWriter<File>,
    events: Vec<TraceEvent>,
    max_turns: u32,
    over_budget: bool,
    proxy_bytes: u64,
    io_error: Option<Error>,
}

impl TraceRecorder {
    fn create(
        store: &TraceStore,
        trial_id: &str,
        policy: PathPolicy,
        max_turns: u32,
    ) -> Result<Self> {
        let path = store.events_path(trial_id);
        if path.exists() {
            return Err(Error::Workspace(format!(
                "trace for {trial_id} already exists"
            )));
        }
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let policy_file = store.root.join(format!("{trial_id}.policy.json"));
        write_json(&policy_file, &policy)?;
        Ok(TraceRecorder {
            policy,
            policy_file,
            writer: BufWriter::new(file),
            events: Vec::new(),
            max_turns,
            over_budget: false,
            proxy_bytes: 0,
            io_error: None,
        })
    }
}

impl EventSink for TraceRecorder {
    fn record(&mut self, ev: AgentEvent) -> std::result::Result<(), BudgetExhausted> {
        if self.over_budget || ev.turn > self.max_turns {
            self.over_budget = true;
            return Err(BudgetExhausted);
        }
        let verdict = evaluate(
            &self.policy,
            &ToolCallRequest {
                tool: ev.tool.clone(),
                target_paths: ev.target_paths.clone(),
                phase: Some(self.policy.phase()),
            },
        );
        self.proxy_bytes += ev.command.as_ref().map_or(0, |c| c.len() as u64)
            + ev.output.as_ref().map_or(0, |o| o.len() as u64)
            + ev.tool.len() as u64;
        let event = TraceEvent {
            seq: self.events.len() as u32,
            turn: ev.turn,
            tool: ev.tool,
            target_paths: ev.target_paths,
            command_digest: ev.command.as_deref().map(|c| sha256_hex(c.as_bytes())),
            command: ev.command,
            output_digest: ev.output.as_deref().map(|o| sha256_hex(o.as_bytes())),
            output_bytes: ev.output.as_ref().map(|o| o.len() as u64),
            denied: (!verdict.is_allow()).then_some(verdict.reason),
        };
        let line = serde_json::to_string(&event).expect("trace events serialize");
        if let Err(e) = writeln!(self.writer, "{line}").and_then(|_| self.writer.flush()) {
            self.io_error.get_or_insert(Error::io("<trace log>", e));
        }
        self.events.push(event);
        Ok(())
    }

    fn policy_file(&self) -> Option<&Path> {
        Some(&self.policy_file)
    }
}

fn provision(request: &TrialRequest) -> Result<Option<DeployedSkill>> {
    let ws = &request.workspace;
    if ws.exists() {
        let mut entries = fs::read_dir(ws).map_err(|e| Error::io(ws, e))?;
        if entries.next().is_some() {
            return Err(Error::Workspace(format!(
                "workspace {} is not empty",
                ws.display()
            )));
        }
    }
    fs::create_dir_all(ws).map_err(|e| Error::io(ws, e))?;
    let source = match request.phase {
        TrialPhase::Validation => &request.task.val_env,
        _ => &request.task.train_env,
    };
    if !source.is_dir() {
        return Err(Error::Workspace(format!(
            "environment {} does not exist",
            source.display()
        )));
    }
    copy_tree(source, &request.env_dir())?;
    let mut deployed = None;
    if let (Some(skill), Some(dir)) = (&request.deployed_skill, request.skill_dir()) {
        mirror(skill, &dir)?;
        deployed = Some(DeployedSkill {
            name: skill.manifest.name.clone(),
            version_index: skill.version_index,
            digest: tree_digest(&dir)?,
            primary_script: skill.manifest.primary_script.clone(),
        });
    }
    if let (Some(strategy), Some(path)) = (&request.strategy, request.strategy_file()) {
        if !path.exists() {
            fs::create_dir_all(path.parent().expect("strategy file has a parent"))
                .map_err(|e| Error::io(&path, e))?;
            fs::write(&path, strategy.render()).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(deployed)
}

fn run_verifier(command: &str, workspace: &Path) -> bool {
    Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(workspace)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn read_timing(workspace: &Path, file: &str) -> Option<Timing> {
    for candidate in [workspace.join(file), workspace.join(ENV_DIR).join(file)] {
        if let Ok(t) = crate::util::read_json::<Timing>(&candidate) {
            return Some(t);
        }
    }
    None
}

/// Run one trial: provision the workspace, run the backend under the path
/// guard, persist the trace, then adjudicate the reward.
pub fn run_trial(
    backend: &dyn AgentBackend,
    request: &TrialRequest,
    store: &TraceStore,
) -> Result<TrialOutcome> {
    request.check()?;
    let deployed_skill = provision(request)?;
    let policy = PathPolicy::for_trial(
        &request.task,
        &request.workspace,
        request.phase.guard_phase(),
    )?;
    let mut recorder =
        TraceRecorder::create(store, &request.trial_id, policy, request.budget.max_turns)?;
    let started_at_ms = now_millis();
    let result = backend.run(request, &mut recorder);
    let finished_at_ms = now_millis();
    if let Some(e) = recorder.io_error.take() {
        return Err(e);
    }
    let elapsed = (finished_at_ms - started_at_ms) as f64 / 1000.0;

    let (report, crashed) = match result {
        Ok(report) => (report, None),
        Err(BackendError::BudgetExhausted) => {
            recorder.over_budget = true;
            (BackendReport::default(), None)
        }
        Err(BackendError::Crash(msg)) => (BackendReport::default(), Some(msg)),
    };
    let (tokens, tokens_approximate) = match report.tokens {
        Some(t) => (t, false),
        None => (recorder.proxy_bytes.div_ceil(4), true),
    };
    let over_budget = recorder.over_budget || report.cost_usd > request.budget.max_cost_usd;
    let trace = Trace {
        turns: recorder.events.iter().map(|e| e.turn).max().unwrap_or(0),
        events: std::mem::take(&mut recorder.events),
        tokens,
        tokens_approximate,
        wall_clock_s: report.duration_s.unwrap_or(elapsed),
        cost_usd: report.cost_usd,
    };
    write_json(&store.trace_path(&request.trial_id), &trace)?;

    let correctness = crashed.is_none()
        && match &request.task.verifier {
            Some(cmd) => run_verifier(cmd, &request.workspace),
            None => report.correct.unwrap_or(false),
        };
    let reward = if crashed.is_some() || over_budget || !correctness {
        0.0
    } else {
        match &request.task.reward_kind {
            RewardKind::Binary => reward_of(true, 1.0, 1.0, &RewardKind::Binary)?,
            kind @ RewardKind::ScalarSpeedup { timing_file } => {
                match report
                    .timing
                    .or_else(|| read_timing(&request.workspace, timing_file))
                {
                    Some(t) => reward_of(true, t.reference_time, t.candidate_time, kind)
                        .unwrap_or_else(|e| {
                            log::warn!("trial {}: {e}; reward 0", request.trial_id);
                            0.0
                        }),
                    None => {
                        log::warn!(
                            "trial {}: no timing measurement; reward 0",
                            request.trial_id
                        );
                        0.0
                    }
                }
            }
        }
    };
    let outcome = TrialOutcome {
        trial_id: request.trial_id.clone(),
        phase: request.phase,
        iteration: request.iteration,
        strategy_index: request.strategy_index,
        trace,
        reward,
        correctness,
        over_budget,
        crashed,
        deployed_skill,
        workspace: request.workspace.clone(),
        started_at_ms,
        finished_at_ms,
    };
    store.write_outcome(&outcome)?;
    Ok(outcome)
}

/// Run a batch concurrently. Outcomes are positionally aligned with
/// `requests`; a failing trial becomes a zero-reward outcome and never
/// aborts its siblings.
pub fn run_parallel(
    backend: &dyn AgentBackend,
    requests: &[TrialRequest],
    store: &TraceStore,
) -> Result<Vec<TrialOutcome>> {
    let mut workspaces = BTreeSet::new();
    let mut indices = BTreeSet::new();
    let mut ids = BTreeSet::new();
    for r in requests {
        if !workspaces.insert(physical_or_lexical(&r.workspace)) {
            return Err(Error::Workspace(format!(
                "workspace {} shared by more than one trial",
                r.workspace.display()
            )));
        }
        if !indices.insert(r.strategy_index) {
            return Err(Error::Workspace(format!(
                "strategy index {} used by more than one trial",
                r.strategy_index
            )));
        }
        if !ids.insert(r.trial_id.as_str()) {
            return Err(Error::Workspace(format!(
                "duplicate trial id {}",
                r.trial_id
            )));
        }
    }
    let outcomes = std::thread::scope(|scope| {
        let handles: Vec<_> = requests
            .iter()
            .map(|r| scope.spawn(move || run_trial(backend, r, store)))
            .collect();
        handles
            .into_iter()
            .zip(requests)
            .map(|(h, r)| match h.join() {
                Ok(Ok(o)) => o,
                Ok(Err(e)) => {
                    log::warn!("trial {} failed: {e}", r.trial_id);
                    TrialOutcome::failed(r, e.to_string())
                }
                Err(_) => TrialOutcome::failed(r, "trial thread panicked".into()),
            })
            .collect()
    });
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// Scripted backend

/// Conditions under which a scripted rule applies; unset fields match
/// anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialMatch {
    #[serde(default)]
    pub phase: Option<TrialPhase>,
    #[serde(default)]
    pub iteration: Option<u32>,
    #[serde(default)]
    pub strategy_index: Option<usize>,
    #[serde(default)]
    pub skill_present: Option<bool>,
    /// Deployed skill declares a primary script whose invocation is hoisted.
    #[serde(default)]
    pub primary_hoisted: Option<bool>,
    #[serde(default)]
    pub skill_has_file: Option<String>,
    #[serde(default)]
    pub skill_lacks_file: Option<String>,
    #[serde(default)]
    pub skill_contains: Option<String>,
    /// Every listed axis must carry the given choice in the trial's strategy.
    #[serde(default)]
    pub strategy_choice: BTreeMap<String, String>,
}

impl TrialMatch {
    pub fn matches(&self, r: &TrialRequest) -> bool {
        let skill = r.deployed_skill.as_ref();
        self.phase.is_none_or(|p| p == r.phase)
            && self.iteration.is_none_or(|i| i == r.iteration)
            && self.strategy_index.is_none_or(|i| i == r.strategy_index)
            && self.skill_present.is_none_or(|b| b == skill.is_some())
            && self.primary_hoisted.is_none_or(|b| {
                b == skill.is_some_and(|s| {
                    s.manifest.primary_script.is_some() && s.manifest.invocation_hoisted()
                })
            })
            && self
                .skill_has_file
                .as_ref()
                .is_none_or(|f| skill.is_some_and(|s| s.file(f).is_some()))
            && self
                .skill_lacks_file
                .as_ref()
                .is_none_or(|f| skill.is_none_or(|s| s.file(f).is_none()))
            && self.skill_contains.as_ref().is_none_or(|needle| {
                skill.is_some_and(|s| {
                    s.files
                        .values()
                        .any(|b| String::from_utf8_lossy(b).contains(needle.as_str()))
                })
            })
            && self.strategy_choice.iter().all(|(axis, choice)| {
                r.strategy
                    .as_ref()
                    .is_some_and(|s| s.choices.get(axis) == Some(choice))
            })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTemplate {
    #[serde(default)]
    pub turn: Option<u32>,
    pub tool: String,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default)]
    pub output: Option<String>,
}

impl EventTemplate {
    pub fn shell(command: &str) -> Self {
        EventTemplate {
            tool: "Bash".into(),
            command: Some(command.into()),
            output: Some("ok".into()),
            ..Default::default()
        }
    }

    pub fn read(target: &str) -> Self {
        EventTemplate {
            tool: "Read".into(),
            targets: vec![target.into()],
            ..Default::default()
        }
    }
}

fn default_true() -> bool {
    true
}

/// A fully scripted trajectory. Paths and commands may use the placeholders
/// `{ws}`, `{env}`, `{skill}`, `{strategy_file}`, `{primary}`,
/// `{primary_rel}`, `{trial}` and `{index}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedTrial {
    pub correct: bool,
    #[serde(default)]
    pub events: Vec<EventTemplate>,
    /// Pads the trace with filler turns up to this count.
    #[serde(default)]
    pub turns: Option<u32>,
    #[serde(default)]
    pub tokens: Option<u64>,
    #[serde(default)]
    pub cost_usd: f64,
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub crash: Option<String>,
    #[serde(default)]
    pub timing: Option<Timing>,
    /// Emit a read of the routed strategy file as the first event.
    #[serde(default = "default_true")]
    pub read_strategy_first: bool,
}

impl ScriptedTrial {
    pub fn pass() -> Self {
        ScriptedTrial {
            correct: true,
            events: Vec::new(),
            turns: None,
            tokens: Some(1000),
            cost_usd: 0.01,
            duration_s: Some(1.0),
            crash: None,
            timing: None,
            read_strategy_first: true,
        }
    }

    pub fn fail() -> Self {
        ScriptedTrial {
            correct: false,
            ..ScriptedTrial::pass()
        }
    }

    pub fn with_events(mut self, events: Vec<EventTemplate>) -> Self {
        self.events = events;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRule {
    #[serde(default)]
    pub when: TrialMatch,
    pub then: ScriptedTrial,
}

/// Replay fixture: the first matching rule decides the trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFixture {
    pub rules: Vec<ScriptedRule>,
}

impl ScriptedFixture {
    pub fn load(path: &Path) -> Result<Self> {
        crate::util::read_json(path)
    }

    pub fn rule(mut self, when: TrialMatch, then: ScriptedTrial) -> Self {
        self.rules.push(ScriptedRule { when, then });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub trial_id: String,
    pub phase: TrialPhase,
    pub iteration: u32,
    pub strategy_index: usize,
}

/// Deterministic backend replaying fixture trajectories.
#[derive(Debug)]
pub struct ScriptedBackend {
    fixture: ScriptedFixture,
    log: Mutex<Vec<Invocation>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        ScriptedBackend {
            fixture,
            log: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn invocations(&self) -> Vec<Invocation> {
        self.log.lock().expect("invocation log").clone()
    }

    pub fn total_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn harness_calls(&self) -> usize {
        self.invocations()
            .iter()
            .filter(|i| i.phase.is_harness())
            .count()
    }

    fn placeholders(request: &TrialRequest) -> Vec<(&'static str, String)> {
        let show = |p: Option<PathBuf>| p.map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("{strategy_file}", show(request.strategy_file())),
            (
                "{primary_rel}",
                request
                    .deployed_skill
                    .as_ref()
                    .and_then(|s| s.manifest.primary_script.clone())
                    .unwrap_or_default(),
            ),
            ("{primary}", show(request.primary_script_path())),
            ("{skill}", show(request.skill_dir())),
            ("{env}", request.env_dir().display().to_string()),
            ("{ws}", request.workspace.display().to_string()),
            ("{trial}", request.trial_id.clone()),
            ("{index}", request.strategy_index.to_string()),
        ]
    }
}

fn fill(template: &str, subs: &[(&'static str, String)]) -> String {
    subs.iter()
        .fold(template.to_string(), |acc, (k, v)| acc.replace(k, v))
}

impl AgentBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn run(
        &self,
        request: &TrialRequest,
        sink: &mut dyn EventSink,
    ) -> std::result::Result<BackendReport, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("invocation log").push(Invocation {
            trial_id: request.trial_id.clone(),
            phase: request.phase,
            iteration: request.iteration,
            strategy_index: request.strategy_index,
        });
        let Some(rule) = self.fixture.rules.iter().find(|r| r.when.matches(request)) else {
            return Err(BackendError::Crash(format!(
                "no scripted rule matches trial {}",
                request.trial_id
            )));
        };
        let script = &rule.then;
        let subs = Self::placeholders(request);
        let mut turn = 0;
        let mut emit = |ev: AgentEvent| sink.record(ev).map_err(|_| BackendError::BudgetExhausted);
        if script.read_strategy_first {
            if let Some(path) = request.strategy_file() {
                turn += 1;
                emit(AgentEvent {
                    turn,
                    tool: "Read".into(),
                    target_paths: vec![path.display().to_string()],
                    command: None,
                    output: None,
                })?;
            }
        }
        for t in &script.events {
            turn = t.turn.unwrap_or(turn + 1);
            emit(AgentEvent {
                turn,
                tool: t.tool.clone(),
                target_paths: t.targets.iter().map(|p| fill(p, &subs)).collect(),
                command: t.command.as_deref().map(|c| fill(c, &subs)),
                output: t.output.as_deref().map(|o| fill(o, &subs)),
            })?;
        }
        if let Some(total) = script.turns {
            while turn < total {
                turn += 1;
                emit(AgentEvent {
                    turn,
                    tool: "Think".into(),
                    ..Default::default()
                })?;
            }
        }
        if let Some(msg) = &script.crash {
            return Err(BackendError::Crash(msg.clone()));
        }
        Ok(BackendReport {
            correct: Some(script.correct),
            tokens: script.tokens,
            cost_usd: script.cost_usd,
            duration_s: script.duration_s,
            timing: script.timing,
        })
    }
}

// ---------------------------------------------------------------------------
// Subprocess backend

/// Configuration for shelling out to an external CLI agent.
///
/// The agent runs with the workspace as its working directory and a cleared
/// environment (plus `env_passthrough`). It reports through stdout, one JSON
/// record per line:
///
/// ```json
/// {"type":"event","turn":1,"tool":"Bash","target_paths":[],"command":"ls"}
/// {"type":"result","correct":true,"tokens":1234,"cost_usd":0.12}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubprocessConfig {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_passthrough")]
    pub env_passthrough: Vec<String>,
    /// Command the agent's pre-tool hook should run; receives the guard
    /// protocol on stdin. Exposed to the agent as `EVOLVER_HOOK_COMMAND`.
    #[serde(default)]
    pub hook_command: Option<String>,
}

fn default_passthrough() -> Vec<String> {
    vec!["PATH".into(), "HOME".into()]
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum AgentLine {
    Event(AgentEvent),
    Result(BackendReport),
}

#[derive(Debug)]
pub struct SubprocessBackend {
    config: SubprocessConfig,
}

impl SubprocessBackend {
    pub fn new(config: SubprocessConfig) -> Self {
        SubprocessBackend { config }
    }
}

impl AgentBackend for SubprocessBackend {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn run(
        &self,
        request: &TrialRequest,
        sink: &mut dyn EventSink,
    ) -> std::result::Result<BackendReport, BackendError> {
        let mut cmd = Command::new(&self.config.program);
        cmd.args(&self.config.args)
            .current_dir(&request.workspace)
            .env_clear()
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        for key in &self.config.env_passthrough {
            if let Ok(v) = std::env::var(key) {
                cmd.env(key, v);
            }
        }
        let show = |p: Option<PathBuf>| p.map(|p| p.display().to_string()).unwrap_or_default();
        cmd.env("EVOLVER_TRIAL_ID", &request.trial_id)
            .env("EVOLVER_TRIAL_INDEX", request.strategy_index.to_string())
            .env("EVOLVER_ITERATION", request.iteration.to_string())
            .env("EVOLVER_WORKSPACE", &request.workspace)
            .env("EVOLVER_ENV_DIR", request.env_dir())
            .env("EVOLVER_SKILL_DIR", show(request.skill_dir()))
            .env("EVOLVER_STRATEGY_FILE", show(request.strategy_file()))
            .env("EVOLVER_INSTRUCTION", &request.task.instruction)
            .env("EVOLVER_MAX_TURNS", request.budget.max_turns.to_string())
            .env(
                "EVOLVER_MAX_BUDGET",
                request.budget.max_cost_usd.to_string(),
            )
            .env(
                "EVOLVER_GUARD_POLICY",
                show(sink.policy_file().map(Path::to_path_buf)),
            );
        if let Some(hook) = &self.config.hook_command {
            cmd.env("EVOLVER_HOOK_COMMAND", hook);
        }
        let mut child = cmd.spawn().map_err(|e| {
            BackendError::Crash(format!("spawn {}: {e}", self.config.program.display()))
        })?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut report = None;
        let mut budget_hit = false;
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            match serde_json::from_str::<AgentLine>(&line) {
                Ok(AgentLine::Event(ev)) => {
                    if sink.record(ev).is_err() {
                        budget_hit = true;
                        let _ = child.kill();
                        break;
                    }
                }
                Ok(AgentLine::Result(r)) => report = Some(r),
                Err(_) => log::debug!("agent output: {line}"),
            }
        }
        let status = child
            .wait()
            .map_err(|e| BackendError::Crash(format!("wait: {e}")))?;
        if budget_hit {
            return Err(BackendError::BudgetExhausted);
        }
        if !status.success() {
            return Err(BackendError::Crash(format!("agent exited with {status}")));
        }
        Ok(report.unwrap_or_default())
    }
}

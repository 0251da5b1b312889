//! Fresh-session audit of a candidate skill.
//!
//! The auditor sees only the candidate, the task instruction, an index of the
//! training data and the labelled traces of the iteration that produced the
//! candidate. Each check is a registry entry that can be disabled on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::contrast::{
    JudgeFinding, JudgeRequest, Reasoner, ReasonerRequest, ReasonerResponse, SkillSnapshot,
};
use crate::error::{Error, Result};
use crate::runner::TrialOutcome;
use crate::skill::{section_body, SkillArtifact, MANIFEST_FILE};
use crate::task::{RewardKind, TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CheckId {
    #[serde(rename = "1")]
    Framing,
    #[serde(rename = "2")]
    Literals,
    #[serde(rename = "2b")]
    ScriptBloat,
    #[serde(rename = "3")]
    Untraceable,
    #[serde(rename = "4")]
    ShapeBake,
    #[serde(rename = "5")]
    Coverage,
    #[serde(rename = "6")]
    CrossRef,
    #[serde(rename = "7")]
    UnderAbstraction,
    #[serde(rename = "8")]
    Hoisting,
    #[serde(rename = "9")]
    SilentBypass,
}

impl CheckId {
    pub const ALL: [CheckId; 10] = [
        CheckId::Framing,
        CheckId::Literals,
        CheckId::ScriptBloat,
        CheckId::Untraceable,
        CheckId::ShapeBake,
        CheckId::Coverage,
        CheckId::CrossRef,
        CheckId::UnderAbstraction,
        CheckId::Hoisting,
        CheckId::SilentBypass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckId::Framing => "1",
            CheckId::Literals => "2",
            CheckId::ScriptBloat => "2b",
            CheckId::Untraceable => "3",
            CheckId::ShapeBake => "4",
            CheckId::Coverage => "5",
            CheckId::CrossRef => "6",
            CheckId::UnderAbstraction => "7",
            CheckId::Hoisting => "8",
            CheckId::SilentBypass => "9",
        }
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckId::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Serde(format!("unknown check id {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Important,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Locus {
    /// 1-based inclusive line range.
    File {
        path: String,
        lines: (usize, usize),
    },
    Trace {
        trial_id: String,
        seq: u32,
    },
    Artifact,
}

impl Locus {
    fn line(path: &str, line: usize) -> Self {
        Locus::File {
            path: path.to_string(),
            lines: (line, line),
        }
    }
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locus::File {
                path,
                lines: (a, b),
            } if a == b => write!(f, "{path}:{a}"),
            Locus::File {
                path,
                lines: (a, b),
            } => write!(f, "{path}:{a}-{b}"),
            Locus::Trace { trial_id, seq } => write!(f, "trace {trial_id}#{seq}"),
            Locus::Artifact => f.write_str("skill"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: CheckId,
    pub severity: Severity,
    pub locus: Locus,
    pub evidence: String,
    /// Produced by a heuristic fallback rather than the reasoner.
    #[serde(default)]
    pub heuristic: bool,
}

impl Violation {
    pub fn new(
        check: CheckId,
        severity: Severity,
        locus: Locus,
        evidence: impl Into<String>,
    ) -> Self {
        let mut evidence = evidence.into();
        if evidence.trim().is_empty() {
            evidence = format!("check {check} fired");
        }
        Violation {
            check,
            severity,
            locus,
            evidence,
            heuristic: false,
        }
    }

    fn heuristic(mut self) -> Self {
        self.heuristic = true;
        self
    }
}

/// Audit verdict. `gate` is always recomputed from the violations, including
/// on deserialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawReport")]
pub struct AuditReport {
    pub gate: bool,
    pub violations: Vec<Violation>,
}

#[derive(Deserialize)]
struct RawReport {
    gate: bool,
    violations: Vec<Violation>,
}

impl TryFrom<RawReport> for AuditReport {
    type Error = String;

    fn try_from(raw: RawReport) -> std::result::Result<Self, String> {
        let report = AuditReport::new(raw.violations);
        if report.gate != raw.gate {
            return Err(format!("gate {} contradicts the violations", raw.gate));
        }
        Ok(report)
    }
}

impl AuditReport {
    pub fn new(violations: Vec<Violation>) -> Self {
        AuditReport {
            gate: !violations.iter().any(|v| v.severity == Severity::Critical),
            violations,
        }
    }

    pub fn clean() -> Self {
        Self::new(Vec::new())
    }

    pub fn count(&self, severity: Severity) -> usize {
        self.violations
            .iter()
            .filter(|v| v.severity == severity)
            .count()
    }

    pub fn checks_fired(&self) -> BTreeSet<CheckId> {
        self.violations.iter().map(|v| v.check).collect()
    }

    /// 0 clean, 2 important only, 3 any critical.
    pub fn exit_code(&self) -> i32 {
        if !self.gate {
            3
        } else if self.violations.is_empty() {
            0
        } else {
            2
        }
    }
}

// ---------------------------------------------------------------------------
// Training index

const MIN_ENTRY_LEN: usize = 4;
const MAX_ROWS: usize = 5000;

/// Strings observed in the training environment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingManifestIndex {
    pub filenames: BTreeSet<String>,
    pub fields: BTreeSet<String>,
    pub entities: BTreeSet<String>,
    pub numerics: BTreeSet<String>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte offsets of token-bounded occurrences of `needle` in `hay`.
fn bounded_matches<'a>(hay: &'a str, needle: &'a str) -> impl Iterator<Item = usize> + 'a {
    hay.match_indices(needle).filter_map(move |(i, _)| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + needle.len()..].chars().next();
        let starts_word = needle.chars().next().is_some_and(is_word_char);
        let ends_word = needle.chars().next_back().is_some_and(is_word_char);
        let ok_before = !starts_word || before.is_none_or(|c| !is_word_char(c));
        let ok_after = !ends_word || after.is_none_or(|c| !is_word_char(c));
        (ok_before && ok_after).then_some(i)
    })
}

fn contains_bounded(hay: &str, needle: &str) -> bool {
    bounded_matches(hay, needle).next().is_some()
}

impl TrainingManifestIndex {
    /// Index `train_env` read-only, skipping anything under `exclude`.
    pub fn build(train_env: &Path, exclude: Option<&Path>) -> Result<Self> {
        let mut index = TrainingManifestIndex::default();
        for entry in walkdir::WalkDir::new(train_env).sort_by_file_name() {
            let entry = entry
                .map_err(|e| Error::Workspace(format!("index {}: {e}", train_env.display())))?;
            let path = entry.path();
            if exclude.is_some_and(|x| path.starts_with(x)) || !entry.file_type().is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            index.add_filename(&name);
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or("")
                .to_ascii_lowercase();
            match ext.as_str() {
                "csv" | "tsv" => {
                    let delim = if ext == "tsv" { b'\t' } else { b',' };
                    index.add_delimited(path, delim);
                }
                "json" => {
                    if let Ok(text) = std::fs::read_to_string(path) {
                        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
                            index.add_json(&v);
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(index)
    }

    fn insert(set: &mut BTreeSet<String>, s: &str) {
        let s = s.trim();
        if s.chars().count() >= MIN_ENTRY_LEN {
            set.insert(s.to_string());
        }
    }

    pub fn add_filename(&mut self, name: &str) {
        Self::insert(&mut self.filenames, name);
    }

    pub fn add_field(&mut self, field: &str) {
        Self::insert(&mut self.fields, field);
    }

    pub fn add_value(&mut self, value: &str) {
        if value.trim().parse::<f64>().is_ok() {
            Self::insert(&mut self.numerics, value);
        } else {
            Self::insert(&mut self.entities, value);
        }
    }

    fn add_delimited(&mut self, path: &Path, delimiter: u8) {
        let Ok(mut reader) = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(true)
            .from_path(path)
        else {
            return;
        };
        if let Ok(headers) = reader.headers() {
            for h in headers.iter() {
                self.add_field(h);
            }
        }
        for record in reader.records().take(MAX_ROWS).flatten() {
            for cell in record.iter() {
                self.add_value(cell);
            }
        }
    }

    fn add_json(&mut self, v: &serde_json::Value) {
        use serde_json::Value;
        match v {
            Value::Object(map) => {
                for (k, v) in map {
                    self.add_field(k);
                    self.add_json(v);
                }
            }
            Value::Array(items) => items.iter().for_each(|i| self.add_json(i)),
            Value::String(s) => self.add_value(s),
            Value::Number(n) => self.add_value(&n.to_string()),
            _ => {}
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        self.filenames
            .iter()
            .chain(&self.fields)
            .chain(&self.entities)
            .chain(&self.numerics)
            .map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries().next().is_none()
    }

    /// Entries occurring inside the string literals of `text`.
    pub fn literal_hits(&self, text: &str) -> BTreeSet<String> {
        let mut hits = BTreeSet::new();
        for line in text.lines() {
            for lit in string_literals(line) {
                for e in self.entries() {
                    if contains_bounded(lit, e) {
                        hits.insert(e.to_string());
                    }
                }
            }
        }
        hits
    }

    /// Replace every token-bounded entry occurrence with a placeholder.
    pub fn abstract_literals(&self, text: &str) -> String {
        let mut entries: Vec<&str> = self.entries().collect();
        entries.sort_by_key(|e| std::cmp::Reverse(e.len()));
        let mut out = text.to_string();
        for e in entries {
            let spans: Vec<usize> = bounded_matches(&out, e).collect();
            for i in spans.into_iter().rev() {
                out.replace_range(i..i + e.len(), "<runtime value>");
            }
        }
        out
    }
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static pattern compiles"))
}

/// Quoted spans plus whitespace tokens that look like paths or file names.
pub fn string_literals(line: &str) -> Vec<&str> {
    static QUOTED: OnceLock<Regex> = OnceLock::new();
    static PATHY: OnceLock<Regex> = OnceLock::new();
    let quoted = regex(&QUOTED, r#""([^"]*)"|`([^`]*)`|(?:^|[^\w])'([^'\n]*)'"#);
    let pathy = regex(&PATHY, r"^[\w.\-]+\.[A-Za-z0-9]{1,5}$");
    let mut out: Vec<&str> = quoted
        .captures_iter(line)
        .filter_map(|c| c.get(1).or(c.get(2)).or(c.get(3)))
        .map(|m| m.as_str())
        .collect();
    for tok in line.split_whitespace() {
        let tok = tok.trim_matches(|c: char| "\"'`()[]{}<>,;:".contains(c));
        if tok.contains('/') || pathy.is_match(tok) {
            out.push(tok);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Audit input and registry

/// Everything an audit may look at. Anything else, such as the evolver's
/// contrast signal, is refused at the interface.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditInput {
    pub candidate: SkillArtifact,
    pub instruction: String,
    pub task_kind: TaskKind,
    pub reward_kind: RewardKind,
    #[serde(default)]
    pub no_skill_baseline_mean: Option<f64>,
    pub index: TrainingManifestIndex,
    #[serde(default)]
    pub outcomes: Vec<TrialOutcome>,
    /// Observed values of parametric axes, if known.
    #[serde(default)]
    pub parametric_values: Vec<String>,
}

impl AuditInput {
    pub fn for_task(
        task: &TaskSpec,
        candidate: SkillArtifact,
        index: TrainingManifestIndex,
        outcomes: Vec<TrialOutcome>,
        parametric_values: Vec<String>,
    ) -> Self {
        AuditInput {
            candidate,
            instruction: task.instruction.clone(),
            task_kind: task.task_kind,
            reward_kind: task.reward_kind.clone(),
            no_skill_baseline_mean: task.no_skill_baseline_mean,
            index,
            outcomes,
            parametric_values,
        }
    }

    fn is_fail(&self, o: &TrialOutcome) -> bool {
        if o.over_budget {
            return true;
        }
        match self.reward_kind {
            RewardKind::Binary => o.reward < 1.0,
            RewardKind::ScalarSpeedup { .. } => match self.no_skill_baseline_mean {
                Some(mean) => o.reward < mean,
                None => o.reward <= 0.0,
            },
        }
    }

    pub fn pass_count(&self) -> usize {
        self.outcomes.iter().filter(|o| !self.is_fail(o)).count()
    }

    fn text_files(&self) -> impl Iterator<Item = (&str, &str)> {
        self.candidate
            .files
            .iter()
            .filter_map(|(p, b)| std::str::from_utf8(b).ok().map(|t| (p.as_str(), t)))
    }

    fn prose_files(&self) -> impl Iterator<Item = (&str, &str)> {
        self.text_files().filter(|(p, _)| p.ends_with(".md"))
    }

    fn scripts(&self) -> impl Iterator<Item = (&str, &str)> {
        self.text_files()
            .filter(|(p, _)| p.starts_with(crate::skill::SCRIPTS_DIR))
    }
}

pub struct AuditContext<'a> {
    pub input: &'a AuditInput,
    pub reasoner: &'a dyn Reasoner,
}

pub trait AuditCheck: Send + Sync {
    fn id(&self) -> CheckId;
    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation>;
}

pub struct Auditor {
    checks: Vec<Box<dyn AuditCheck>>,
    disabled: BTreeSet<CheckId>,
}

impl Default for Auditor {
    fn default() -> Self {
        Self::standard()
    }
}

impl Auditor {
    pub fn standard() -> Self {
        Auditor {
            checks: vec![
                Box::new(Framing),
                Box::new(Literals),
                Box::new(ScriptBloat),
                Box::new(Untraceable),
                Box::new(ShapeBake),
                Box::new(Coverage),
                Box::new(CrossRef),
                Box::new(UnderAbstraction),
                Box::new(Hoisting),
                Box::new(SilentBypass),
            ],
            disabled: BTreeSet::new(),
        }
    }

    pub fn empty() -> Self {
        Auditor {
            checks: Vec::new(),
            disabled: BTreeSet::new(),
        }
    }

    pub fn register(mut self, check: Box<dyn AuditCheck>) -> Self {
        self.checks.push(check);
        self
    }

    pub fn disable(mut self, id: CheckId) -> Self {
        self.disabled.insert(id);
        self
    }

    pub fn only(mut self, id: CheckId) -> Self {
        self.disabled = CheckId::ALL.into_iter().filter(|c| *c != id).collect();
        self
    }

    pub fn audit(&self, input: &AuditInput, reasoner: &dyn Reasoner) -> AuditReport {
        let ctx = AuditContext { input, reasoner };
        let violations = self
            .checks
            .iter()
            .filter(|c| !self.disabled.contains(&c.id()))
            .flat_map(|c| c.run(&ctx))
            .collect();
        AuditReport::new(violations)
    }
}

/// Audit with every standard check enabled.
pub fn audit(input: &AuditInput, reasoner: &dyn Reasoner) -> AuditReport {
    Auditor::standard().audit(input, reasoner)
}

// ---------------------------------------------------------------------------
// Text helpers

/// Number of lines taken by a leading `---` block, delimiters included.
fn frontmatter_len(text: &str) -> usize {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some("---") {
        return 0;
    }
    lines
        .position(|l| l.trim_end() == "---")
        .map_or(0, |i| i + 2)
}

/// Lines outside frontmatter and code fences, 1-based.
fn prose_lines(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut in_fm = false;
    let mut in_fence = false;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim_start();
        if i == 0 && line.trim_end() == "---" {
            in_fm = true;
            continue;
        }
        if in_fm {
            if line.trim_end() == "---" {
                in_fm = false;
            }
            continue;
        }
        if t.starts_with("```") || t.starts_with("~~~") {
            in_fence = !in_fence;
            continue;
        }
        if !in_fence && !t.starts_with('#') {
            out.push((i + 1, line));
        }
    }
    out
}

/// Sentences of the prose with the line each starts on.
fn sentences(text: &str) -> Vec<(usize, String)> {
    static SPLIT: OnceLock<Regex> = OnceLock::new();
    let split = regex(&SPLIT, r"[.!?](\s+|$)");
    let mut out = Vec::new();
    for (n, line) in prose_lines(text) {
        let line = line.trim().trim_start_matches(['-', '*', ' ']);
        let mut last = 0;
        for m in split.find_iter(line) {
            let s = line[last..m.end()].trim();
            if !s.is_empty() {
                out.push((n, s.to_string()));
            }
            last = m.end();
        }
        let rest = line[last..].trim();
        if !rest.is_empty() {
            out.push((n, rest.to_string()));
        }
    }
    out
}

fn is_imperative(sentence: &str) -> bool {
    static IMP: OnceLock<Regex> = OnceLock::new();
    regex(
        &IMP,
        r"(?i)\b(never|always|must|required|do not|don't|avoid|only)\b|^(use|set|pick|choose|prefer)\b|\buse \S+ (not|instead of)\b",
    )
    .is_match(sentence)
}

fn has_citation(s: &str) -> bool {
    s.contains("[trace:")
}

fn has_rederive(s: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    regex(
        &RE,
        r"(?i)re-?derive|derive\b.*\bat runtime|at runtime|from the inputs?|detect\b|probe\b|inspect\b|invarian",
    )
    .is_match(s)
}

fn judge(ctx: &AuditContext<'_>, check: CheckId, question: &str) -> Option<Vec<JudgeFinding>> {
    let req = ReasonerRequest::Judge(JudgeRequest {
        check,
        question: question.into(),
        instruction: ctx.input.instruction.clone(),
        skill: SkillSnapshot::from(&ctx.input.candidate),
        index_entities: ctx.input.index.entries().map(str::to_string).collect(),
        traces: ctx
            .input
            .outcomes
            .iter()
            .map(TrialOutcome::summary)
            .collect(),
    });
    match ctx.reasoner.respond(&req) {
        Ok(ReasonerResponse::Verdicts { findings }) => Some(findings),
        Ok(_) => None,
        Err(e) => {
            log::warn!("judge for check {check} failed, using heuristic: {e}");
            None
        }
    }
}

fn from_findings(
    check: CheckId,
    severity: Severity,
    findings: Vec<JudgeFinding>,
) -> Vec<Violation> {
    findings
        .into_iter()
        .map(|f| {
            let locus = match (f.path, f.lines) {
                (Some(path), Some(lines)) => Locus::File { path, lines },
                (Some(path), None) => Locus::File {
                    path,
                    lines: (1, 1),
                },
                _ => Locus::Artifact,
            };
            Violation::new(check, severity, locus, f.evidence)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checks

struct Framing;

impl AuditCheck for Framing {
    fn id(&self) -> CheckId {
        CheckId::Framing
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        let q = "Does the skill name or description borrow a training-instance business noun instead of naming the abstract operation?";
        if let Some(f) = judge(ctx, self.id(), q) {
            return from_findings(self.id(), Severity::Critical, f);
        }
        let m = &ctx.input.candidate.manifest;
        let text = ctx.input.candidate.manifest_text();
        let line_of = |key: &str| {
            text.lines()
                .position(|l| l.starts_with(&format!("{key}:")))
                .map_or(1, |i| i + 1)
        };
        let idx = &ctx.input.index;
        let nouns: Vec<&String> = idx.entities.iter().chain(&idx.filenames).collect();
        let mut out = Vec::new();
        for (key, value) in [("name", &m.name), ("description", &m.description)] {
            let lower = value.to_lowercase();
            for noun in &nouns {
                if contains_bounded(&lower, &noun.to_lowercase()) {
                    out.push(
                        Violation::new(
                            self.id(),
                            Severity::Critical,
                            Locus::line(MANIFEST_FILE, line_of(key)),
                            format!("{key} contains training entity {noun:?}"),
                        )
                        .heuristic(),
                    );
                }
            }
        }
        out
    }
}

struct Literals;

impl AuditCheck for Literals {
    fn id(&self) -> CheckId {
        CheckId::Literals
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        static SOFT: OnceLock<Regex> = OnceLock::new();
        let soft = regex(
            &SOFT,
            r"(?i)\b(typically|usually|generally|normally|often|around|about|approximately|roughly|mostly)\s*(<=|>=|<|>|≈|~|=)?\s*-?\d+(\.\d+)?",
        );
        let mut out = Vec::new();
        for (path, text) in ctx.input.text_files() {
            let skip = if path.ends_with(".md") {
                frontmatter_len(text)
            } else {
                0
            };
            for (i, line) in text.lines().enumerate().skip(skip) {
                for e in ctx.input.index.entries() {
                    if contains_bounded(line, e) {
                        out.push(Violation::new(
                            self.id(),
                            Severity::Critical,
                            Locus::line(path, i + 1),
                            format!("hardcoded training value {e:?}"),
                        ));
                    }
                }
            }
        }
        for (path, text) in ctx.input.prose_files() {
            for (n, line) in prose_lines(text) {
                if let Some(m) = soft.find(line) {
                    if !has_citation(line) {
                        out.push(
                            Violation::new(
                                self.id(),
                                Severity::Critical,
                                Locus::line(path, n),
                                format!("soft-qualifier numeric {:?}", m.as_str()),
                            )
                            .heuristic(),
                        );
                    }
                }
            }
        }
        out
    }
}

const BLOAT_IMPORTANT: usize = 200;
const BLOAT_CRITICAL: usize = 400;

struct ScriptBloat;

impl AuditCheck for ScriptBloat {
    fn id(&self) -> CheckId {
        CheckId::ScriptBloat
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        ctx.input
            .candidate
            .scripts()
            .filter_map(|(path, bytes)| {
                let n = String::from_utf8_lossy(bytes).lines().count();
                let severity = if n > BLOAT_CRITICAL {
                    Severity::Critical
                } else if n > BLOAT_IMPORTANT {
                    Severity::Important
                } else {
                    return None;
                };
                Some(Violation::new(
                    self.id(),
                    severity,
                    Locus::File {
                        path: path.to_string(),
                        lines: (1, n),
                    },
                    format!("{n} lines"),
                ))
            })
            .collect()
    }
}

struct Untraceable;

impl AuditCheck for Untraceable {
    fn id(&self) -> CheckId {
        CheckId::Untraceable
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        let q = "List imperative assertions that have no trace provenance and are not pretraining-obvious.";
        if let Some(f) = judge(ctx, self.id(), q) {
            return from_findings(self.id(), Severity::Important, f);
        }
        let mut out = Vec::new();
        for (path, text) in ctx.input.prose_files() {
            for (n, s) in sentences(text) {
                if is_imperative(&s) && !has_citation(&s) {
                    out.push(
                        Violation::new(
                            self.id(),
                            Severity::Important,
                            Locus::line(path, n),
                            format!("uncited: {s}"),
                        )
                        .heuristic(),
                    );
                }
            }
        }
        out
    }
}

struct ShapeBake;

/// Minimum keyword-membership branches in one script that flag dispatch.
pub const KEYWORD_BRANCH_LIMIT: usize = 3;

impl AuditCheck for ShapeBake {
    fn id(&self) -> CheckId {
        CheckId::ShapeBake
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        static SUBSCRIPT: OnceLock<Regex> = OnceLock::new();
        static PROBE: OnceLock<Regex> = OnceLock::new();
        static KEYWORD: OnceLock<Regex> = OnceLock::new();
        let subscript = regex(&SUBSCRIPT, r#"(\w+)\s*\[\s*["']([^"'\]]+)["']\s*\]"#);
        let probe = regex(
            &PROBE,
            r"\.columns\b|\.sheetnames\b|\.sheet_names\b|\.keys\(\)|\.fieldnames\b|\.dtypes\b|\.get_sheet_names\(|\bhasattr\(|\.headers\b|\.list_objects|\bjq\s+(-r\s+)?'?keys",
        );
        let keyword = regex(
            &KEYWORD,
            r#"^\s*(if|elif|else\s+if)\b.*["'][^"']+["']\s+in\s+\w"#,
        );
        let mut out = Vec::new();
        for (path, text) in ctx.input.scripts() {
            if !probe.is_match(text) {
                let hit = text.lines().enumerate().find_map(|(i, l)| {
                    subscript
                        .captures(l)
                        .filter(|c| &c[1] != "environ")
                        .map(|c| (i + 1, c[0].to_string()))
                });
                if let Some((n, expr)) = hit {
                    out.push(Violation::new(
                        self.id(),
                        Severity::Critical,
                        Locus::line(path, n),
                        format!("fixed key access {expr} with no runtime probe"),
                    ));
                }
            }
            let branches: Vec<usize> = text
                .lines()
                .enumerate()
                .filter(|(_, l)| keyword.is_match(l))
                .map(|(i, _)| i + 1)
                .collect();
            if branches.len() >= KEYWORD_BRANCH_LIMIT {
                out.push(Violation::new(
                    self.id(),
                    Severity::Critical,
                    Locus::File {
                        path: path.to_string(),
                        lines: (branches[0], *branches.last().expect("non-empty")),
                    },
                    format!("{} keyword-dispatch branches", branches.len()),
                ));
            }
        }
        out
    }
}

struct Coverage;

impl AuditCheck for Coverage {
    fn id(&self) -> CheckId {
        CheckId::Coverage
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        let input = ctx.input;
        if input.task_kind != TaskKind::Mechanical || input.scripts().next().is_some() {
            return Vec::new();
        }
        let k = input.outcomes.len();
        let high_pass = k > 0 && 4 * input.pass_count() >= 3 * k;
        if high_pass {
            return Vec::new();
        }
        vec![Violation::new(
            self.id(),
            Severity::Important,
            Locus::Artifact,
            "mechanical task with no bundled scripts",
        )]
    }
}

struct CrossRef;

impl AuditCheck for CrossRef {
    fn id(&self) -> CheckId {
        CheckId::CrossRef
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        let mut out = Vec::new();
        for (path, text) in ctx.input.text_files() {
            for (i, line) in text.lines().enumerate() {
                let mut seen = BTreeSet::new();
                for lit in string_literals(line) {
                    for e in ctx.input.index.entries() {
                        if contains_bounded(lit, e) && seen.insert(e) {
                            out.push(Violation::new(
                                self.id(),
                                Severity::Critical,
                                Locus::line(path, i + 1),
                                format!("literal {lit:?} matches training entry {e:?}"),
                            ));
                        }
                    }
                }
            }
        }
        out
    }
}

struct UnderAbstraction;

impl AuditCheck for UnderAbstraction {
    fn id(&self) -> CheckId {
        CheckId::UnderAbstraction
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        let q = "List imperative claims embedding a parametric training constant without a sibling re-derive-at-runtime instruction.";
        if let Some(f) = judge(ctx, self.id(), q) {
            return from_findings(self.id(), Severity::Critical, f);
        }
        let constants: Vec<&str> = if ctx.input.parametric_values.is_empty() {
            ctx.input
                .index
                .numerics
                .iter()
                .map(String::as_str)
                .collect()
        } else {
            ctx.input
                .parametric_values
                .iter()
                .map(String::as_str)
                .collect()
        };
        let mut out = Vec::new();
        for (path, text) in ctx.input.prose_files() {
            let sents = sentences(text);
            for (i, (n, s)) in sents.iter().enumerate() {
                if !is_imperative(s) {
                    continue;
                }
                let Some(c) = constants
                    .iter()
                    .find(|c| !c.is_empty() && contains_bounded(s, c))
                else {
                    continue;
                };
                let sibling = sents.get(i + 1).is_some_and(|(_, next)| has_rederive(next));
                if !has_rederive(s) && !sibling {
                    out.push(
                        Violation::new(
                            self.id(),
                            Severity::Critical,
                            Locus::line(path, *n),
                            format!("constant {c:?} stated without a re-derive instruction"),
                        )
                        .heuristic(),
                    );
                }
            }
        }
        out
    }
}

struct Hoisting;

impl AuditCheck for Hoisting {
    fn id(&self) -> CheckId {
        CheckId::Hoisting
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        let m = &ctx.input.candidate.manifest;
        let Some(script) = &m.primary_script else {
            return Vec::new();
        };
        let Some(idx) = m.invocation_section() else {
            return vec![Violation::new(
                self.id(),
                Severity::Critical,
                Locus::File {
                    path: MANIFEST_FILE.into(),
                    lines: (1, 1),
                },
                format!("primary_script {script} is never invoked in SKILL.md"),
            )];
        };
        let blocking = m.body_sections[..idx]
            .iter()
            .find(|s| !section_body(s).trim().is_empty());
        match blocking {
            None => Vec::new(),
            Some(s) => vec![Violation::new(
                self.id(),
                Severity::Critical,
                Locus::File {
                    path: MANIFEST_FILE.into(),
                    lines: (s.lines.0, s.lines.1.saturating_sub(1).max(s.lines.0)),
                },
                format!(
                    "section {:?} precedes the invocation of {script} in section {:?}",
                    s.heading, m.body_sections[idx].heading
                ),
            )],
        }
    }
}

struct SilentBypass;

impl AuditCheck for SilentBypass {
    fn id(&self) -> CheckId {
        CheckId::SilentBypass
    }

    fn run(&self, ctx: &AuditContext<'_>) -> Vec<Violation> {
        let input = ctx.input;
        let Some(script) = &input.candidate.manifest.primary_script else {
            return Vec::new();
        };
        let k = input.outcomes.len();
        let fails = input.outcomes.iter().filter(|o| input.is_fail(o)).count();
        if 2 * fails <= k {
            return Vec::new();
        }
        let file = script.rsplit('/').next().unwrap_or(script);
        let invoked = input.outcomes.iter().any(|o| {
            o.trace.events.iter().any(|e| {
                e.is_shell()
                    && e.command
                        .as_deref()
                        .is_some_and(|c| c.contains(script.as_str()) || contains_bounded(c, file))
            })
        });
        if invoked {
            return Vec::new();
        }
        vec![Violation::new(
            self.id(),
            Severity::Critical,
            Locus::Artifact,
            format!("{fails}/{k} trials failed and none invoked {script}"),
        )]
    }
}

/// Violations grouped by check, for report rendering.
pub fn by_check(report: &AuditReport) -> BTreeMap<CheckId, Vec<&Violation>> {
    let mut m: BTreeMap<CheckId, Vec<&Violation>> = BTreeMap::new();
    for v in &report.violations {
        m.entry(v.check).or_default().push(v);
    }
    m
}

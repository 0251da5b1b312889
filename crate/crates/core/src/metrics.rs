//! Scoring, taxonomy bucketing, efficiency deltas and the results table.
//!
//! A run store is a directory of run folders plus one flat results table:
//!
//! ```text
//! <store>/results.tsv    one row per (task, condition)
//! <store>/runs/<name>/   run directories written by the pipelines
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolver::{RunDir, RunManifest};
use crate::runner::TrialPhase;

pub const NO_SKILL: &str = "no_skill";
pub const CURATED: &str = "curated";
pub const CONTROL: &str = "control";

pub fn evolver_condition(r_max: u32) -> String {
    format!("evolver_r{r_max}")
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Fraction of rewards at or above the pass threshold.
pub fn avg_at_v(rewards: &[f64], threshold: f64) -> f64 {
    if rewards.is_empty() {
        return 0.0;
    }
    rewards.iter().filter(|&&r| r >= threshold).count() as f64 / rewards.len() as f64
}

/// Round to one decimal place.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

// ---------------------------------------------------------------------------
// Taxonomy

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    A,
    B1,
    B2,
    B3,
    C1,
    C2,
    D,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::A,
        Category::B1,
        Category::B2,
        Category::B3,
        Category::C1,
        Category::C2,
        Category::D,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            Category::A => "solved without help",
            Category::B1 => "curated skill helps",
            Category::B2 => "curated skill neutral",
            Category::B3 => "curated skill hurts",
            Category::C1 => "curated skill unlocks strongly",
            Category::C2 => "curated skill unlocks weakly",
            Category::D => "unsolved either way",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_easy: f64,
    pub t_delta: f64,
    pub t_strong: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            t_easy: 0.8,
            t_delta: 0.15,
            t_strong: 0.5,
        }
    }
}

pub fn categorize(no_skill: f64, curated: f64, t: &Thresholds) -> Category {
    if no_skill >= t.t_easy {
        Category::A
    } else if no_skill == 0.0 && curated == 0.0 {
        Category::D
    } else if no_skill == 0.0 {
        if curated >= t.t_strong {
            Category::C1
        } else {
            Category::C2
        }
    } else {
        let d = curated - no_skill;
        if d > t.t_delta {
            Category::B1
        } else if d < -t.t_delta {
            Category::B3
        } else {
            Category::B2
        }
    }
}

// ---------------------------------------------------------------------------
// Pairwise comparison

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinTieLoss {
    pub fn total(&self) -> usize {
        self.wins + self.ties + self.losses
    }

    /// Fraction of tasks where the first arm scores at least as well.
    pub fn at_least_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.wins + self.ties) as f64 / self.total() as f64
        }
    }
}

/// Per-task comparison of `a` against `b`; both must cover the same tasks.
/// Differences within `epsilon` count as ties.
pub fn win_tie_loss(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
    epsilon: f64,
) -> Result<WinTieLoss> {
    let ka: BTreeSet<_> = a.keys().collect();
    let kb: BTreeSet<_> = b.keys().collect();
    if ka != kb {
        let missing: Vec<_> = ka.symmetric_difference(&kb).take(5).collect();
        return Err(Error::Metrics(format!(
            "result sets cover different tasks: {missing:?}"
        )));
    }
    let mut out = WinTieLoss {
        wins: 0,
        ties: 0,
        losses: 0,
    };
    for (task, sa) in a {
        let sb = b[task];
        if (sa - sb).abs() <= epsilon {
            out.ties += 1;
        } else if *sa > sb {
            out.wins += 1;
        } else {
            out.losses += 1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Efficiency

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub tokens: f64,
    pub turns: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyDelta {
    pub tokens_pct: f64,
    pub turns_pct: f64,
    pub duration_pct: f64,
}

impl EfficiencyDelta {
    pub fn rounded(&self) -> EfficiencyDelta {
        EfficiencyDelta {
            tokens_pct: round1(self.tokens_pct),
            turns_pct: round1(self.turns_pct),
            duration_pct: round1(self.duration_pct),
        }
    }
}

fn pct(name: &str, before: f64, after: f64) -> Result<f64> {
    if before <= 0.0 || !before.is_finite() || !after.is_finite() {
        return Err(Error::Metrics(format!(
            "{name}: baseline {before} cannot anchor a relative change"
        )));
    }
    Ok((after - before) / before * 100.0)
}

/// Relative change of each counter, in percent.
pub fn efficiency_delta(before: &Counters, after: &Counters) -> Result<EfficiencyDelta> {
    Ok(EfficiencyDelta {
        tokens_pct: pct("tokens", before.tokens, after.tokens)?,
        turns_pct: pct("turns", before.turns, after.turns)?,
        duration_pct: pct("duration", before.duration_s, after.duration_s)?,
    })
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub condition: String,
    pub domain: Option<String>,
    pub binary: bool,
    /// avg@V for binary tasks, mean reward for scalar ones.
    pub score: f64,
    pub rewards: Vec<f64>,
    pub cost_usd: f64,
    pub counters: Counters,
}

impl TaskResult {
    pub fn check(&self) -> Result<()> {
        if self.rewards.is_empty() {
            return Err(Error::Metrics(format!(
                "{}/{}: no trial rewards",
                self.task_id, self.condition
            )));
        }
        if self.binary && !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Metrics(format!(
                "{}/{}: avg@V {} outside [0, 1]",
                self.task_id, self.condition, self.score
            )));
        }
        Ok(())
    }

    /// Summarize a finished run's validation phase.
    pub fn from_run(run_dir: &Path, condition: &str) -> Result<Self> {
        let manifest = RunManifest::load(run_dir)?;
        let validation = manifest.validation.as_ref().ok_or_else(|| {
            Error::Metrics(format!("{} has no validation result", run_dir.display()))
        })?;
        let rows: Vec<_> = RunDir::open(run_dir)?
            .load_trials()?
            .into_iter()
            .filter(|t| t.phase == TrialPhase::Validation)
            .collect();
        let pick = |f: fn(&crate::evolver::TrialRecord) -> f64| {
            mean(&rows.iter().map(f).collect::<Vec<_>>())
        };
        let r = TaskResult {
            task_id: manifest.task_id.clone(),
            condition: condition.to_string(),
            domain: manifest.domain.clone(),
            binary: validation.binary,
            score: validation.score,
            rewards: validation.rewards.clone(),
            cost_usd: pick(|t| t.cost_usd),
            counters: Counters {
                tokens: pick(|t| t.tokens as f64),
                turns: pick(|t| t.turns as f64),
                duration_s: pick(|t| t.wall_clock_s),
            },
        };
        r.check()?;
        Ok(r)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRow {
    task_id: String,
    condition: String,
    domain: String,
    binary: bool,
    score: f64,
    rewards: String,
    cost_usd: f64,
    tokens: f64,
    turns: f64,
    duration_s: f64,
}

impl From<&TaskResult> for ResultRow {
    fn from(r: &TaskResult) -> Self {
        ResultRow {
            task_id: r.task_id.clone(),
            condition: r.condition.clone(),
            domain: r.domain.clone().unwrap_or_default(),
            binary: r.binary,
            score: r.score,
            rewards: r
                .rewards
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(";"),
            cost_usd: r.cost_usd,
            tokens: r.counters.tokens,
            turns: r.counters.turns,
            duration_s: r.counters.duration_s,
        }
    }
}

impl TryFrom<ResultRow> for TaskResult {
    type Error = Error;

    fn try_from(r: ResultRow) -> Result<Self> {
        let rewards = r
            .rewards
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| f64::from_str(s).map_err(|_| Error::Metrics(format!("bad reward {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let t = TaskResult {
            task_id: r.task_id,
            condition: r.condition,
            domain: (!r.domain.is_empty()).then_some(r.domain),
            binary: r.binary,
            score: r.score,
            rewards,
            cost_usd: r.cost_usd,
            counters: Counters {
                tokens: r.tokens,
                turns: r.turns,
                duration_s: r.duration_s,
            },
        };
        t.check()?;
        Ok(t)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Metrics(format!("{}: {e}", path.display()))
}

/// Append-only results table plus run directories.
#[derive(Debug, Clone)]
pub struct RunStore {
    pub root: PathBuf,
}

impl RunStore {
    pub const RESULTS: &'static str = "results.tsv";

    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("runs")).map_err(|e| Error::io(root, e))?;
        Ok(RunStore {
            root: root.to_path_buf(),
        })
    }

    pub fn results_path(&self) -> PathBuf {
        self.root.join(Self::RESULTS)
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    pub fn append(&self, result: &TaskResult) -> Result<()> {
        result.check()?;
        let path = self.results_path();
        let fresh = !path.exists();
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .has_headers(fresh)
            .from_writer(f);
        w.serialize(ResultRow::from(result))
            .map_err(|e| csv_err(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(&self) -> Result<Vec<TaskResult>> {
        load_results(&self.results_path())
    }
}

pub fn load_results(path: &Path) -> Result<Vec<TaskResult>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    r.deserialize::<ResultRow>()
        .map(|row| {
            row.map_err(|e| csv_err(path, e))
                .and_then(TaskResult::try_from)
        })
        .collect()
}

/// Scores of one condition keyed by task; a repeated (task, condition) keeps
/// the latest row.
pub fn scores_for(results: &[TaskResult], condition: &str) -> BTreeMap<String, f64> {
    results
        .iter()
        .filter(|r| r.condition == condition)
        .map(|r| (r.task_id.clone(), r.score))
        .collect()
}

pub fn conditions(results: &[TaskResult]) -> BTreeSet<String> {
    results.iter().map(|r| r.condition.clone()).collect()
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: Category,
    pub tasks: usize,
    /// Mean score per condition over the tasks in this category.
    pub means: BTreeMap<String, f64>,
}

/// Bucket tasks by their no-skill and curated scores and average every
/// condition inside each bucket.
pub fn by_category(results: &[TaskResult], t: &Thresholds) -> Result<Vec<CategoryRow>> {
    let base = scores_for(results, NO_SKILL);
    let curated = scores_for(results, CURATED);
    if base.is_empty() || curated.is_empty() {
        return Err(Error::Metrics(format!(
            "categorizing needs both {NO_SKILL} and {CURATED} rows"
        )));
    }
    let mut labels = BTreeMap::new();
    for (task, b) in &base {
        if let Some(c) = curated.get(task) {
            labels.insert(task.clone(), categorize(*b, *c, t));
        }
    }
    let mut rows = Vec::new();
    for cat in Category::ALL {
        let tasks: BTreeSet<&String> = labels
            .iter()
            .filter(|(_, c)| **c == cat)
            .map(|(t, _)| t)
            .collect();
        if tasks.is_empty() {
            continue;
        }
        let mut means = BTreeMap::new();
        for cond in conditions(results) {
            let scores: Vec<f64> = scores_for(results, &cond)
                .into_iter()
                .filter(|(task, _)| tasks.contains(task))
                .map(|(_, s)| s)
                .collect();
            if !scores.is_empty() {
                means.insert(cond, mean(&scores));
            }
        }
        rows.push(CategoryRow {
            category: cat,
            tasks: tasks.len(),
            means,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub before_condition: String,
    pub after_condition: String,
    pub tasks: usize,
    pub before: Counters,
    pub after: Counters,
    pub delta: EfficiencyDelta,
}

/// Mean counters over the tasks both conditions cover, and their change.
pub fn efficiency_report(
    results: &[TaskResult],
    before: &str,
    after: &str,
) -> Result<EfficiencyReport> {
    let pick = |cond: &str| -> BTreeMap<String, Counters> {
        results
            .iter()
            .filter(|r| r.condition == cond)
            .map(|r| (r.task_id.clone(), r.counters))
            .collect()
    };
    let (b, a) = (pick(before), pick(after));
    let shared: Vec<&String> = b.keys().filter(|k| a.contains_key(*k)).collect();
    if shared.is_empty() {
        return Err(Error::Metrics(format!(
            "no task has both {before} and {after} rows"
        )));
    }
    let avg = |m: &BTreeMap<String, Counters>| Counters {
        tokens: mean(&shared.iter().map(|k| m[*k].tokens).collect::<Vec<_>>()),
        turns: mean(&shared.iter().map(|k| m[*k].turns).collect::<Vec<_>>()),
        duration_s: mean(&shared.iter().map(|k| m[*k].duration_s).collect::<Vec<_>>()),
    };
    let (cb, ca) = (avg(&b), avg(&a));
    Ok(EfficiencyReport {
        before_condition: before.into(),
        after_condition: after.into(),
        tasks: shared.len(),
        delta: efficiency_delta(&cb, &ca)?,
        before: cb,
        after: ca,
    })
}

/// Win/tie/loss of `a` against `b` over the tasks both cover.
pub fn win_tie_loss_report(
    results: &[TaskResult],
    a: &str,
    b: &str,
    epsilon: f64,
) -> Result<WinTieLoss> {
    let (mut sa, mut sb) = (scores_for(results, a), scores_for(results, b));
    sa.retain(|k, _| sb.contains_key(k));
    sb.retain(|k, _| sa.contains_key(k));
    if sa.is_empty() {
        return Err(Error::Metrics(format!("no task has both {a} and {b} rows")));
    }
    win_tie_loss(&sa, &sb, epsilon)
}

fn tsv(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn render_categories(rows: &[CategoryRow]) -> String {
    let conds: BTreeSet<&String> = rows.iter().flat_map(|r| r.means.keys()).collect();
    let mut header = vec!["category", "tasks"];
    header.extend(conds.iter().map(|c| c.as_str()));
    let body = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.category.to_string(), r.tasks.to_string()];
            cells.extend(conds.iter().map(|c| {
                r.means
                    .get(*c)
                    .map(|m| format!("{m:.3}"))
                    .unwrap_or_default()
            }));
            cells
        })
        .collect();
    tsv(&header, body)
}

pub fn render_efficiency(r: &EfficiencyReport) -> String {
    let line = |name: &str, b: f64, a: f64, d: f64| {
        vec![
            name.to_string(),
            format!("{b:.1}"),
            format!("{a:.1}"),
            format!("{:+.1}%", round1(d)),
        ]
    };
    tsv(
        &["counter", &r.before_condition, &r.after_condition, "delta"],
        vec![
            line(
                "tokens",
                r.before.tokens,
                r.after.tokens,
                r.delta.tokens_pct,
            ),
            line("turns", r.before.turns, r.after.turns, r.delta.turns_pct),
            line(
                "duration_s",
                r.before.duration_s,
                r.after.duration_s,
                r.delta.duration_pct,
            ),
        ],
    )
}

pub fn render_win_tie_loss(a: &str, b: &str, w: &WinTieLoss) -> String {
    tsv(
        &["a", "b", "wins", "ties", "losses", "a_at_least_b"],
        vec![vec![
            a.into(),
            b.into(),
            w.wins.to_string(),
            w.ties.to_string(),
            w.losses.to_string(),
            format!("{:.1}%", round1(w.at_least_rate() * 100.0)),
        ]],
    )
}

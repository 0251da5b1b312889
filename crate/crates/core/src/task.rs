//! Task manifests, reward semantics and per-task budgets.
//!
//! A task manifest is a TOML file:
//!
//! ```toml
//! id = "fjsp-scheduling"
//! instruction = "Produce a feasible schedule for the jobs in input/."
//! train_env = "train"          # relative to the manifest's directory
//! val_env = "val"
//! reward_kind = "binary"       # or "scalar_speedup"
//! task_kind = "mechanical"     # or "open"
//! curated_training_skill_slot = "train/skills/curated"
//!
//! [budget]
//! max_cost_usd = 15.0
//! max_turns = 200
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::physical_or_lexical;

/// Default name of the measurement file a scalar-reward environment writes
/// into the trial workspace.
pub const DEFAULT_TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    Binary,
    /// Correctness times reference/candidate time. Timings are read from a
    /// measurement file the environment writes into the workspace.
    ScalarSpeedup {
        timing_file: String,
    },
}

impl RewardKind {
    pub fn is_binary(&self) -> bool {
        matches!(self, RewardKind::Binary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Mechanical,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_cost_usd: f64,
    pub max_turns: u32,
}

impl Budget {
    pub fn new(max_cost_usd: f64, max_turns: u32) -> Result<Self> {
        if !(max_cost_usd.is_finite() && max_cost_usd > 0.0) {
            return Err(Error::Budget(format!(
                "max_cost_usd must be positive, got {max_cost_usd}"
            )));
        }
        if max_turns == 0 {
            return Err(Error::Budget("max_turns must be positive".into()));
        }
        Ok(Budget {
            max_cost_usd,
            max_turns,
        })
    }
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_cost_usd: 15.0,
            max_turns: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub instruction: String,
    pub train_env: PathBuf,
    pub val_env: PathBuf,
    pub reward_kind: RewardKind,
    pub task_kind: TaskKind,
    pub budget: Budget,
    pub curated_training_skill_slot: Option<PathBuf>,
    /// Mean reward of the no-skill baseline; the fail threshold for scalar
    /// tasks in the silent-bypass check.
    pub no_skill_baseline_mean: Option<f64>,
    /// Shell command run inside the trial workspace after the agent exits;
    /// exit status 0 means correct.
    pub verifier: Option<String>,
    pub domain: Option<String>,
}

impl TaskSpec {
    /// Reward at or above which a trial counts as passing.
    pub fn pass_threshold(&self) -> f64 {
        match self.reward_kind {
            RewardKind::Binary => 1.0,
            RewardKind::ScalarSpeedup { .. } => {
                self.no_skill_baseline_mean.unwrap_or(f64::MIN_POSITIVE)
            }
        }
    }

    pub fn is_pass(&self, reward: f64) -> bool {
        reward >= self.pass_threshold()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    id: String,
    instruction: String,
    train_env: PathBuf,
    val_env: PathBuf,
    reward_kind: String,
    #[serde(default)]
    task_kind: Option<TaskKind>,
    #[serde(default)]
    timing_file: Option<String>,
    #[serde(default)]
    budget: Option<RawBudget>,
    #[serde(default)]
    curated_training_skill_slot: Option<PathBuf>,
    #[serde(default)]
    no_skill_baseline_mean: Option<f64>,
    #[serde(default)]
    verifier: Option<String>,
    #[serde(default)]
    domain: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBudget {
    max_cost_usd: f64,
    max_turns: u32,
}

/// Load and validate a task manifest. Relative paths resolve against the
/// manifest's directory. Environment contents are not touched.
pub fn load_task(manifest: &Path) -> Result<TaskSpec> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_task(&text, &base).map_err(|e| match e {
        Error::Manifest { message, .. } => Error::Manifest {
            path: manifest.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn parse_task(text: &str, base: &Path) -> Result<TaskSpec> {
    let malformed = |message: String| Error::Manifest {
        path: PathBuf::new(),
        message,
    };
    let raw: RawManifest = toml::from_str(text).map_err(|e| malformed(e.to_string()))?;
    if raw.id.trim().is_empty() {
        return Err(malformed("id must be non-empty".into()));
    }
    let reward_kind = match raw.reward_kind.as_str() {
        "binary" => RewardKind::Binary,
        "scalar_speedup" => RewardKind::ScalarSpeedup {
            timing_file: raw
                .timing_file
                .unwrap_or_else(|| DEFAULT_TIMING_FILE.to_string()),
        },
        other => return Err(malformed(format!("unknown reward_kind {other:?}"))),
    };
    let budget = match raw.budget {
        Some(b) => Budget::new(b.max_cost_usd, b.max_turns)?,
        None => Budget::default(),
    };
    let absolutize = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    let train_env = absolutize(raw.train_env);
    let val_env = absolutize(raw.val_env);
    let train_phys = physical_or_lexical(&train_env);
    if train_phys == physical_or_lexical(&val_env) {
        return Err(Error::SplitViolation(train_phys));
    }
    Ok(TaskSpec {
        id: raw.id,
        instruction: raw.instruction,
        train_env,
        val_env,
        reward_kind,
        task_kind: raw.task_kind.unwrap_or_default(),
        budget,
        curated_training_skill_slot: raw.curated_training_skill_slot.map(absolutize),
        no_skill_baseline_mean: raw.no_skill_baseline_mean,
        verifier: raw.verifier,
        domain: raw.domain,
    })
}

/// Reward of a single trial.
///
/// Binary: 1 if correct else 0. Scalar speedup: 0 if incorrect, otherwise
/// `reference_time / candidate_time`; both times must be strictly positive.
pub fn reward_of(
    correct: bool,
    reference_time: f64,
    candidate_time: f64,
    kind: &RewardKind,
) -> Result<f64> {
    match kind {
        RewardKind::Binary => Ok(if correct { 1.0 } else { 0.0 }),
        RewardKind::ScalarSpeedup { .. } => {
            if !correct {
                return Ok(0.0);
            }
            for (name, t) in [("reference", reference_time), ("candidate", candidate_time)] {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::Timing(format!(
                        "{name} time must be strictly positive, got {t}"
                    )));
                }
            }
            Ok(reference_time / candidate_time)
        }
    }
}

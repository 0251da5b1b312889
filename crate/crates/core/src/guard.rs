//! Tool-call path guard: per-trial workspace whitelist behind a denylist
//! tripwire.
//!
//! Every target path of a tool call is checked in two forms: the raw string
//! (made absolute against the workspace) and its physical form with symlinks
//! resolved. The tripwire runs first and denies any `..` component in the raw
//! string and anything equal to or under a deny slot. Only then does the
//! whitelist require both forms to sit under the workspace prefix.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskSpec;
use crate::util::{normalize_lexically, now_millis};

/// Upper bound on symlink hops during resolution; beyond it the path is
/// treated as unresolvable.
const MAX_LINK_HOPS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardPhase {
    Exploration,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPolicy {
    workspace_prefix: PathBuf,
    deny_slots: Vec<PathBuf>,
    phase: GuardPhase,
}

impl PathPolicy {
    pub fn new(
        workspace_prefix: impl Into<PathBuf>,
        deny_slots: impl IntoIterator<Item = PathBuf>,
        phase: GuardPhase,
    ) -> Result<Self> {
        let workspace_prefix = workspace_prefix.into();
        if !workspace_prefix.is_absolute() {
            return Err(Error::SandboxConfig(format!(
                "workspace prefix {} is not absolute",
                workspace_prefix.display()
            )));
        }
        let workspace_prefix = normalize_lexically(&workspace_prefix);
        let ws_resolved = resolve(&workspace_prefix);
        let mut slots = Vec::new();
        for slot in deny_slots {
            if !slot.is_absolute() {
                return Err(Error::SandboxConfig(format!(
                    "deny slot {} is not absolute",
                    slot.display()
                )));
            }
            let slot = normalize_lexically(&slot);
            let slot_resolved = resolve(&slot);
            let nested = slot.starts_with(&workspace_prefix)
                || match (&slot_resolved, &ws_resolved) {
                    (Some(s), Some(w)) => s.starts_with(w),
                    _ => false,
                };
            if nested {
                return Err(Error::SandboxConfig(format!(
                    "deny slot {} lies inside workspace {}",
                    slot.display(),
                    workspace_prefix.display()
                )));
            }
            slots.push(slot);
        }
        Ok(PathPolicy {
            workspace_prefix,
            deny_slots: slots,
            phase,
        })
    }

    /// Policy for one trial of `task`: the curated training slot is always
    /// denied; the held-out side of the split is denied by phase.
    pub fn for_trial(task: &TaskSpec, workspace: &Path, phase: GuardPhase) -> Result<Self> {
        let mut slots: Vec<PathBuf> = task.curated_training_skill_slot.iter().cloned().collect();
        match phase {
            GuardPhase::Exploration => slots.push(task.val_env.clone()),
            GuardPhase::Validation => slots.push(task.train_env.clone()),
        }
        PathPolicy::new(workspace, slots, phase)
    }

    pub fn workspace_prefix(&self) -> &Path {
        &self.workspace_prefix
    }

    pub fn deny_slots(&self) -> &[PathBuf] {
        &self.deny_slots
    }

    pub fn phase(&self) -> GuardPhase {
        self.phase
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRequest {
    pub tool: String,
    #[serde(default)]
    pub target_paths: Vec<String>,
    #[serde(default)]
    pub phase: Option<GuardPhase>,
}

impl ToolCallRequest {
    pub fn new(tool: impl Into<String>, targets: &[&str]) -> Self {
        ToolCallRequest {
            tool: tool.into(),
            target_paths: targets.iter().map(|s| s.to_string()).collect(),
            phase: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    TripwireTraversal,
    TripwireSlot,
    OutsideWorkspace,
    /// Hook-protocol line that could not be decoded.
    MalformedRequest,
    Ok,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub reason: Reason,
}

impl Verdict {
    pub const ALLOW: Verdict = Verdict {
        decision: Decision::Allow,
        reason: Reason::Ok,
    };

    pub fn deny(reason: Reason) -> Self {
        Verdict {
            decision: Decision::Deny,
            reason,
        }
    }

    pub fn is_allow(&self) -> bool {
        self.decision == Decision::Allow
    }
}

fn has_traversal(raw: &str) -> bool {
    Path::new(raw)
        .components()
        .any(|c| matches!(c, Component::ParentDir))
}

/// Raw path made absolute against the workspace, with `.` removed.
fn absolute_raw(raw: &str, workspace: &Path) -> PathBuf {
    let p = Path::new(raw);
    let joined = if p.is_absolute() {
        p.to_path_buf()
    } else {
        workspace.join(p)
    };
    normalize_lexically(&joined)
}

/// Physical form of an absolute path. Symlinks are followed component by
/// component, including dangling ones (their target is where a write would
/// land); components that do not exist are appended as-is. `None` when a
/// link cycle or hop limit is hit.
pub fn resolve(path: &Path) -> Option<PathBuf> {
    let mut pending: Vec<std::ffi::OsString> = path
        .components()
        .rev()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_os_string()),
            Component::ParentDir => Some("..".into()),
            _ => None,
        })
        .collect();
    let mut out = PathBuf::from("/");
    let mut hops = 0;
    while let Some(part) = pending.pop() {
        if part == ".." {
            out.pop();
            continue;
        }
        let candidate = out.join(&part);
        match fs::symlink_metadata(&candidate) {
            Ok(meta) if meta.file_type().is_symlink() => {
                hops += 1;
                if hops > MAX_LINK_HOPS {
                    return None;
                }
                let target = fs::read_link(&candidate).ok()?;
                if target.is_absolute() {
                    out = PathBuf::from("/");
                }
                for c in target.components().rev() {
                    match c {
                        Component::Normal(s) => pending.push(s.to_os_string()),
                        Component::ParentDir => pending.push("..".into()),
                        _ => {}
                    }
                }
            }
            _ => out = candidate,
        }
    }
    Some(out)
}

/// Evaluate one tool call against a policy. Pure with respect to its inputs
/// and the filesystem state at call time.
pub fn evaluate(policy: &PathPolicy, req: &ToolCallRequest) -> Verdict {
    let ws = &policy.workspace_prefix;
    let ws_resolved = resolve(ws);
    let slot_forms: Vec<(PathBuf, Option<PathBuf>)> = policy
        .deny_slots
        .iter()
        .map(|s| (s.clone(), resolve(s)))
        .collect();

    let mut forms = Vec::with_capacity(req.target_paths.len());
    for raw in &req.target_paths {
        if has_traversal(raw) {
            return Verdict::deny(Reason::TripwireTraversal);
        }
        let abs = absolute_raw(raw, ws);
        let resolved = resolve(&abs);
        let in_slot = |p: &Path| {
            slot_forms
                .iter()
                .any(|(s, sr)| p.starts_with(s) || sr.as_ref().is_some_and(|sr| p.starts_with(sr)))
        };
        if in_slot(&abs) || resolved.as_deref().is_some_and(in_slot) {
            return Verdict::deny(Reason::TripwireSlot);
        }
        forms.push((abs, resolved));
    }

    for (abs, resolved) in &forms {
        let raw_ok = abs.starts_with(ws);
        let resolved_ok = match (resolved, &ws_resolved) {
            (Some(r), Some(w)) => r.starts_with(w),
            _ => false,
        };
        if !(raw_ok && resolved_ok) {
            return Verdict::deny(Reason::OutsideWorkspace);
        }
    }
    Verdict::ALLOW
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepRecord {
    pub slot: Option<PathBuf>,
    pub removed: bool,
    pub at_ms: u64,
}

/// Delete the curated training skill slot at source before any trial runs.
/// A slot located inside the run's workspace root is a configuration error.
pub fn prepare_training_env(task: &TaskSpec, workspace_root: &Path) -> Result<PrepRecord> {
    let Some(slot) = &task.curated_training_skill_slot else {
        return Ok(PrepRecord {
            slot: None,
            removed: false,
            at_ms: now_millis(),
        });
    };
    // validates slot placement against the workspace root
    PathPolicy::new(workspace_root, [slot.clone()], GuardPhase::Exploration)?;
    let removed = match fs::symlink_metadata(slot) {
        Ok(meta) if meta.is_dir() => {
            fs::remove_dir_all(slot).map_err(|e| Error::io(slot, e))?;
            true
        }
        Ok(_) => {
            fs::remove_file(slot).map_err(|e| Error::io(slot, e))?;
            true
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(Error::io(slot, e)),
    };
    if fs::symlink_metadata(slot).is_ok() {
        return Err(Error::SandboxConfig(format!(
            "curated slot {} still present after deletion",
            slot.display()
        )));
    }
    Ok(PrepRecord {
        slot: Some(slot.clone()),
        removed,
        at_ms: now_millis(),
    })
}

#[derive(Debug, Serialize)]
struct HookReply {
    #[serde(flatten)]
    verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Serve the pre-tool hook protocol: one JSON request per input line, one
/// JSON verdict per output line. Undecodable lines are denied.
pub fn serve_hook<R: BufRead, W: Write>(
    policy: &PathPolicy,
    input: R,
    mut output: W,
) -> Result<usize> {
    let mut served = 0;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<hook input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ToolCallRequest>(&line) {
            Ok(req) => HookReply {
                verdict: evaluate(policy, &req),
                error: None,
            },
            Err(e) => HookReply {
                verdict: Verdict::deny(Reason::MalformedRequest),
                error: Some(e.to_string()),
            },
        };
        let text = serde_json::to_string(&reply)?;
        writeln!(output, "{text}").map_err(|e| Error::io("<hook output>", e))?;
        output.flush().map_err(|e| Error::io("<hook output>", e))?;
        served += 1;
    }
    Ok(served)
}

//! Control pipeline: draft a skill from a rubric, refine it by local A/B
//! comparison, and touch the harness only for validation.
//!
//! Grading and analysis sessions are isolated: any path they report reading
//! is checked against a role barrier, and a breach aborts the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::TrainingManifestIndex;
use crate::contrast::{
    Arm, ArmGrade, ArmResult, Reasoner, ReasonerRequest, ReasonerResponse, SkillSnapshot,
};
use crate::error::{Error, Result};
use crate::evolver::{validate, RunDir, RunManifest, ValidationResult};
use crate::guard::{prepare_training_env, resolve};
use crate::runner::{run_parallel, AgentBackend, TrialOutcome, TrialPhase, TrialRequest};
use crate::skill::{
    apply_patch, artifact_from_patch, mirror, Edit, Patch, RelPath, SkillArtifact, MANIFEST_FILE,
};
use crate::task::{Budget, TaskSpec};
use crate::util::{normalize_lexically, read_tree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlRole {
    EvalDesigner,
    Grader,
    Analyzer,
    Improver,
}

impl std::fmt::Display for ControlRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ControlRole::EvalDesigner => "eval_designer",
            ControlRole::Grader => "grader",
            ControlRole::Analyzer => "analyzer",
            ControlRole::Improver => "improver",
        };
        f.write_str(s)
    }
}

/// What one control role may and may not read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleBarrier {
    pub role: ControlRole,
    pub readable: Vec<PathBuf>,
    pub forbidden: Vec<PathBuf>,
    /// Base for relative paths.
    pub cwd: PathBuf,
}

impl RoleBarrier {
    pub fn for_role(role: ControlRole, task: &TaskSpec, skill_dir: &Path) -> Self {
        let (readable, forbidden) = match role {
            ControlRole::EvalDesigner => (vec![task.train_env.clone()], vec![task.val_env.clone()]),
            ControlRole::Grader | ControlRole::Analyzer => (
                Vec::new(),
                vec![
                    skill_dir.to_path_buf(),
                    task.train_env.clone(),
                    task.val_env.clone(),
                ],
            ),
            ControlRole::Improver => (
                vec![skill_dir.to_path_buf(), task.train_env.clone()],
                vec![task.val_env.clone()],
            ),
        };
        RoleBarrier {
            role,
            readable,
            forbidden,
            cwd: skill_dir.to_path_buf(),
        }
    }

    fn physical(&self, p: &Path) -> Option<PathBuf> {
        let abs = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.cwd.join(p)
        };
        resolve(&normalize_lexically(&abs))
    }

    /// True when `path` stays clear of every forbidden root. Paths that cannot
    /// be resolved are treated as forbidden.
    pub fn permits(&self, path: &str) -> bool {
        let Some(p) = self.physical(Path::new(path)) else {
            return false;
        };
        self.forbidden.iter().all(|f| {
            let f = self.physical(f).unwrap_or_else(|| normalize_lexically(f));
            !p.starts_with(&f)
        })
    }

    pub fn check(&self, accessed: &[String]) -> Result<()> {
        match accessed.iter().find(|p| !self.permits(p)) {
            Some(p) => Err(Error::Barrier {
                role: self.role.to_string(),
                path: p.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    /// Improvement rounds.
    pub j: u32,
    /// Validation trials.
    pub v: usize,
    /// Local sessions per A/B arm.
    pub arm_trials: usize,
    pub budget: Budget,
}

impl ControlConfig {
    pub fn new(j: u32, v: usize) -> Result<Self> {
        let c = ControlConfig {
            j,
            v,
            arm_trials: 2,
            budget: Budget::default(),
        };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        if self.v == 0 || self.arm_trials == 0 {
            return Err(Error::Loop("V and arm trials must be at least 1".into()));
        }
        Ok(())
    }

    /// Apply `SCSB_*` overrides read through `get`.
    pub fn with_overrides(mut self, get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let num = |key: &str| -> Result<Option<f64>> {
            get(key)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Loop(format!("{key}={v:?} is not a number")))
                })
                .transpose()
        };
        let cost = num("SCSB_MAX_BUDGET")?.unwrap_or(self.budget.max_cost_usd);
        let turns = match num("SCSB_MAX_TURNS")? {
            Some(t) if t >= 0.0 && t.fract() == 0.0 => t as u32,
            Some(t) => {
                return Err(Error::Loop(format!(
                    "SCSB_MAX_TURNS={t} is not a turn count"
                )))
            }
            None => self.budget.max_turns,
        };
        self.budget = Budget::new(cost, turns)?;
        self.check()?;
        Ok(self)
    }

    pub fn from_env(self) -> Result<Self> {
        self.with_overrides(|k| std::env::var(k).ok())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub skill_version: u32,
    pub grades: Vec<ArmGrade>,
    pub feedback: String,
}

#[derive(Debug, Clone)]
pub struct ControlResult {
    pub final_skill: SkillArtifact,
    pub rubric: String,
    pub rounds: Vec<RoundRecord>,
    pub validation: ValidationResult,
    pub manifest: RunManifest,
    pub run_dir: PathBuf,
}

fn heuristic_rubric(task: &TaskSpec, index: &TrainingManifestIndex) -> String {
    format!(
        "Task: {}\n\nA session passes when the task verifier accepts its output.\n\
         Among passing sessions prefer fewer turns and fewer shell commands.\n",
        index.abstract_literals(task.instruction.trim())
    )
}

fn heuristic_draft(
    task: &TaskSpec,
    rubric: &str,
    index: &TrainingManifestIndex,
) -> Result<SkillArtifact> {
    let content = format!(
        "---\nname: task-procedure\ndescription: Drafted procedure for this task family.\n---\n\n\
         ## Task\n\n{}\n\n## Success criteria\n\n{}\n",
        index.abstract_literals(task.instruction.trim()),
        index.abstract_literals(rubric.trim())
    );
    artifact_from_patch(
        &Patch::new(vec![Edit::AddFile {
            path: RelPath::new(MANIFEST_FILE)?,
            content,
        }]),
        1,
    )
}

fn heuristic_improve(
    v: &SkillArtifact,
    round: u32,
    feedback: &str,
    index: &TrainingManifestIndex,
) -> Patch {
    let text = v.manifest_text();
    let lines = text.lines().count();
    let notes: String = feedback
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| format!("- {}\n", index.abstract_literals(l.trim())))
        .collect();
    let lead = if text.ends_with('\n') || text.is_empty() {
        ""
    } else {
        "\n"
    };
    Patch::new(vec![Edit::ReplaceRegion {
        path: RelPath::new(MANIFEST_FILE).expect("static path"),
        start: lines,
        end: lines,
        content: format!("{lead}\n## Notes from comparison round {round}\n\n{notes}"),
    }])
}

fn heuristic_grade(arm: &ArmResult) -> ArmGrade {
    let n = arm.trials.len().max(1) as f64;
    let passed = arm
        .trials
        .iter()
        .filter(|t| t.reward > 0.0 && !t.over_budget)
        .count();
    ArmGrade {
        arm: arm.arm,
        score: passed as f64 / n,
        notes: format!("{passed}/{} sessions passed", arm.trials.len()),
    }
}

fn heuristic_feedback(grades: &[ArmGrade]) -> String {
    let score = |a: Arm| {
        grades
            .iter()
            .find(|g| g.arm == a)
            .map(|g| g.score)
            .unwrap_or(0.0)
    };
    let (with, without) = (score(Arm::WithSkill), score(Arm::WithoutSkill));
    if with > without {
        format!("The skill helps ({with:.2} vs {without:.2}); keep its procedure and tighten the success checks.")
    } else if with < without {
        format!("The skill hurts ({with:.2} vs {without:.2}); remove steps that constrain the approach.")
    } else {
        format!("No difference between arms ({with:.2}); make the procedure more concrete about verification.")
    }
}

struct Control<'a> {
    task: Arc<TaskSpec>,
    config: &'a ControlConfig,
    backend: &'a dyn AgentBackend,
    reasoner: &'a dyn Reasoner,
    run: RunDir,
    index: TrainingManifestIndex,
    manifest: RunManifest,
}

impl Control<'_> {
    fn skill_dir(&self, version: u32) -> PathBuf {
        self.run.root.join("lineage").join(format!("v{version}"))
    }

    fn ab(&mut self, round: u32, v: &SkillArtifact) -> Result<Vec<(Arm, Vec<TrialOutcome>)>> {
        let mut requests = Vec::new();
        for (arm, tag) in [(Arm::WithSkill, "with"), (Arm::WithoutSkill, "without")] {
            for i in 1..=self.config.arm_trials {
                let id = format!("ab{round}-{tag}-t{i}");
                requests.push((
                    arm,
                    TrialRequest {
                        workspace: self.run.workspace(&id),
                        trial_id: id,
                        task: self.task.clone(),
                        deployed_skill: (arm == Arm::WithSkill).then(|| v.clone()),
                        strategy_index: i + if arm == Arm::WithSkill {
                            0
                        } else {
                            self.config.arm_trials
                        },
                        strategy: None,
                        iteration: round,
                        phase: TrialPhase::Local,
                        budget: self.config.budget,
                    },
                ));
            }
        }
        let reqs: Vec<TrialRequest> = requests.iter().map(|(_, r)| r.clone()).collect();
        let outcomes = run_parallel(self.backend, &reqs, &self.run.store)?;
        self.manifest.local_sessions += reqs.len();
        self.run.append_trials(&outcomes)?;
        Ok([Arm::WithSkill, Arm::WithoutSkill]
            .into_iter()
            .map(|arm| {
                let mine = requests
                    .iter()
                    .zip(&outcomes)
                    .filter(|((a, _), _)| *a == arm)
                    .map(|(_, o)| o.clone())
                    .collect();
                (arm, mine)
            })
            .collect())
    }

    fn grade(&self, rubric: &str, arm: ArmResult, barrier: &RoleBarrier) -> Result<ArmGrade> {
        let req = ReasonerRequest::Grade {
            rubric: rubric.into(),
            arm: arm.clone(),
        };
        match self.reasoner.respond(&req)? {
            ReasonerResponse::Grade {
                grade,
                accessed_paths,
            } => {
                barrier.check(&accessed_paths)?;
                Ok(grade)
            }
            ReasonerResponse::Unavailable => Ok(heuristic_grade(&arm)),
            other => Err(Error::Reasoner(format!(
                "grader answered with {}",
                other.role()
            ))),
        }
    }

    fn analyze(&self, rubric: &str, grades: &[ArmGrade], barrier: &RoleBarrier) -> Result<String> {
        let req = ReasonerRequest::Analyze {
            rubric: rubric.into(),
            grades: grades.to_vec(),
        };
        match self.reasoner.respond(&req)? {
            ReasonerResponse::Analysis {
                feedback,
                accessed_paths,
            } => {
                barrier.check(&accessed_paths)?;
                Ok(feedback)
            }
            ReasonerResponse::Unavailable => Ok(heuristic_feedback(grades)),
            other => Err(Error::Reasoner(format!(
                "analyzer answered with {}",
                other.role()
            ))),
        }
    }

    fn rounds(
        &mut self,
        rubric: &str,
        mut v: SkillArtifact,
        rounds: &mut Vec<RoundRecord>,
    ) -> Result<SkillArtifact> {
        for round in 1..=self.config.j {
            let dir = self.skill_dir(v.version_index);
            self.manifest.stamp(format!("ab-r{round}"));
            let arms = self.ab(round, &v)?;
            let grader = RoleBarrier::for_role(ControlRole::Grader, &self.task, &dir);
            let mut grades = Vec::new();
            for (arm, outcomes) in arms {
                let result = ArmResult {
                    arm,
                    trials: outcomes.iter().map(TrialOutcome::summary).collect(),
                };
                grades.push(self.grade(rubric, result, &grader)?);
            }
            let analyzer = RoleBarrier::for_role(ControlRole::Analyzer, &self.task, &dir);
            let feedback = self.analyze(rubric, &grades, &analyzer)?;
            let req = ReasonerRequest::Improve {
                skill: SkillSnapshot::from(&v),
                feedback: feedback.clone(),
            };
            let patch = match self.reasoner.respond(&req)? {
                ReasonerResponse::Patch(p) => p,
                ReasonerResponse::Unavailable => {
                    heuristic_improve(&v, round, &feedback, &self.index)
                }
                other => {
                    return Err(Error::Reasoner(format!(
                        "improver answered with {}",
                        other.role()
                    )))
                }
            };
            rounds.push(RoundRecord {
                round,
                skill_version: v.version_index,
                grades,
                feedback,
            });
            v = apply_patch(&v, &patch)?;
            mirror(&v, &self.skill_dir(v.version_index))?;
        }
        Ok(v)
    }
}

pub fn run_control(
    task: &TaskSpec,
    config: &ControlConfig,
    backend: &dyn AgentBackend,
    reasoner: &dyn Reasoner,
    run_root: &Path,
) -> Result<ControlResult> {
    config.check()?;
    let run = RunDir::create(run_root)?;
    let mut manifest = RunManifest::new("control", task, serde_json::to_value(config)?);
    manifest.stamp("prepare");
    manifest.prep = Some(prepare_training_env(task, &run.root.join("workspaces"))?);
    let index =
        TrainingManifestIndex::build(&task.train_env, task.curated_training_skill_slot.as_deref())?;
    let mut c = Control {
        task: Arc::new(task.clone()),
        config,
        backend,
        reasoner,
        run,
        index,
        manifest,
    };

    c.manifest.stamp("eval-design");
    let req = ReasonerRequest::EvalDesign {
        instruction: task.instruction.clone(),
        train_files: read_tree(&task.train_env)?.into_keys().collect(),
    };
    let rubric = match reasoner.respond(&req)? {
        ReasonerResponse::Rubric { text } => text,
        ReasonerResponse::Unavailable => heuristic_rubric(task, &c.index),
        other => {
            return Err(Error::Reasoner(format!(
                "eval designer answered with {}",
                other.role()
            )))
        }
    };
    fs::write(c.run.root.join("rubric.md"), &rubric)
        .map_err(|e| Error::io(c.run.root.join("rubric.md"), e))?;
    c.manifest.notes.insert("rubric".into(), rubric.clone());

    c.manifest.stamp("draft");
    let req = ReasonerRequest::Draft {
        instruction: task.instruction.clone(),
        rubric: rubric.clone(),
    };
    let v1 = match reasoner.respond(&req)? {
        ReasonerResponse::Patch(p) => artifact_from_patch(&p, 1)?,
        ReasonerResponse::Unavailable => heuristic_draft(task, &rubric, &c.index)?,
        other => {
            return Err(Error::Reasoner(format!(
                "drafter answered with {}",
                other.role()
            )))
        }
    };
    mirror(&v1, &c.skill_dir(1))?;

    let mut rounds = Vec::new();
    let last = match c.rounds(&rubric, v1, &mut rounds) {
        Ok(v) => v,
        Err(e) => {
            c.manifest.aborted = Some(e.to_string());
            c.manifest.stamp("aborted");
            c.run.write_manifest(&c.manifest)?;
            return Err(e);
        }
    };
    c.manifest.iterations_executed = config.j;
    c.manifest.finalize_at_ms = Some(c.manifest.stamp("finalize"));
    mirror(&last, &c.run.root.join("final"))?;
    c.run.write_manifest(&c.manifest)?;

    let validation = validate(
        &c.task,
        Some(&last),
        config.v,
        config.budget,
        backend,
        &c.run,
        config.j,
    )?;
    c.manifest.harness_invocations += validation.trial_ids.len();
    c.manifest.validation = Some(validation.clone());
    c.manifest.stamp("done");
    c.run.write_manifest(&c.manifest)?;
    Ok(ControlResult {
        final_skill: last,
        rubric,
        rounds,
        validation,
        manifest: c.manifest,
        run_dir: c.run.root,
    })
}

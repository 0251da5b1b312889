#![allow(dead_code)]

pub mod corpus;
pub mod laws;

use std::fs;
use std::path::{Path, PathBuf};

use skillsmith_core::contrast::{HeuristicReasoner, Reasoner, ReasonerResponse, ScriptedReasoner};
use skillsmith_core::evolver::{run_evolution, LoopConfig, RunOptions, RunResult};
use skillsmith_core::runner::{
    EventTemplate, ScriptedBackend, ScriptedFixture, ScriptedTrial, TrialMatch, TrialPhase,
};
use skillsmith_core::skill::{Edit, Patch, RelPath};
use skillsmith_core::task::{load_task, TaskSpec};

pub struct TaskFixture {
    pub dir: tempfile::TempDir,
    pub root: PathBuf,
    pub task: TaskSpec,
}

impl TaskFixture {
    pub fn run_root(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
}

const TRAIN_JOBS: &str = "job_id,machine,duration\nJ1,M1,3\nJ2,M2,4\nJ3,M1,2\n";
const VAL_JOBS: &str = "job_id,machine,duration\nJ7,M3,5\nJ8,M4,1\n";

pub fn write(path: &Path, text: &str) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, text).unwrap();
}

/// Task with a small scheduling-flavoured train/val split and a curated
/// skill slot under the training environment.
pub fn task_fixture(task_kind: &str) -> TaskFixture {
    let dir = tempfile::tempdir().unwrap();
    let root = fs::canonicalize(dir.path()).unwrap();
    write(&root.join("task/train/data/jobs.csv"), TRAIN_JOBS);
    write(
        &root.join("task/train/config.json"),
        r#"{"shop": "north-plant", "tolerance": 0.75}"#,
    );
    write(
        &root.join("task/train/skills/curated/SKILL.md"),
        "---\nname: curated\ndescription: curated skill\n---\n\nUse north-plant settings.\n",
    );
    write(&root.join("task/val/data/jobs.csv"), VAL_JOBS);
    write(
        &root.join("task/val/config.json"),
        r#"{"shop": "south-plant", "tolerance": 0.5}"#,
    );
    write(
        &root.join("task/task.toml"),
        &format!(
            "id = \"shop-schedule\"\n\
             instruction = \"Produce a feasible schedule for every job listed under data/.\"\n\
             train_env = \"train\"\nval_env = \"val\"\n\
             reward_kind = \"binary\"\ntask_kind = \"{task_kind}\"\n\
             curated_training_skill_slot = \"train/skills/curated\"\n\
             domain = \"manufacturing\"\n"
        ),
    );
    let task = load_task(&root.join("task/task.toml")).unwrap();
    TaskFixture { dir, root, task }
}

pub fn any_trial() -> TrialMatch {
    TrialMatch::default()
}

pub fn on(phase: TrialPhase) -> TrialMatch {
    TrialMatch {
        phase: Some(phase),
        ..TrialMatch::default()
    }
}

pub fn explore(iteration: u32, index: usize) -> TrialMatch {
    TrialMatch {
        phase: Some(TrialPhase::Exploration),
        iteration: Some(iteration),
        strategy_index: Some(index),
        ..TrialMatch::default()
    }
}

pub fn passing(cmd: &str) -> ScriptedTrial {
    ScriptedTrial::pass().with_events(vec![
        EventTemplate::read("{env}/data/jobs.csv"),
        EventTemplate::shell(cmd),
    ])
}

pub fn failing(cmd: &str) -> ScriptedTrial {
    ScriptedTrial::fail().with_events(vec![
        EventTemplate::read("{env}/data/jobs.csv"),
        EventTemplate::shell(cmd),
    ])
}

/// Backend where every trial passes after reading the data and running a
/// solver command.
pub fn pass_backend() -> ScriptedBackend {
    ScriptedBackend::new(
        ScriptedFixture { rules: vec![] }.rule(any_trial(), passing("python3 solve.py")),
    )
}

pub fn config(k: usize, r: u32, v: usize) -> LoopConfig {
    LoopConfig::new(k, r, v).unwrap()
}

pub fn evolve(
    fx: &TaskFixture,
    name: &str,
    cfg: &LoopConfig,
    backend: &ScriptedBackend,
    reasoner: &dyn Reasoner,
) -> RunResult {
    run_evolution(
        &fx.task,
        cfg,
        backend,
        reasoner,
        &fx.run_root(name),
        &RunOptions::default(),
    )
    .unwrap()
}

pub fn heuristic() -> HeuristicReasoner {
    HeuristicReasoner
}

pub const SOLVER: &str = "import csv\nimport pathlib\nimport sys\n\n\
def main(root):\n    for path in sorted(pathlib.Path(root).rglob(\"*.csv\")):\n        \
with open(path) as fh:\n            rows = list(csv.DictReader(fh))\n        \
print(path.name, len(rows))\n\n\
if __name__ == \"__main__\":\n    main(sys.argv[1])\n";

pub fn add(path: &str, content: &str) -> Edit {
    Edit::AddFile {
        path: RelPath::new(path).unwrap(),
        content: content.into(),
    }
}

/// v1 declares a primary script but buries its invocation under a prose
/// section.
pub const UNHOISTED_MANIFEST: &str = "---\n\
name: schedule-builder\n\
description: Build a feasible plan from the task inputs.\n\
primary_script: scripts/solve.py\n\
---\n\n\
## Constraints\n\n\
Every operation runs on exactly one eligible resource.\n\
Check that no two operations overlap on one resource.\n\n\
## Run\n\n\
Run `python3 scripts/solve.py <data-dir>` and inspect its report.\n";

/// Scenario with a buried invocation: validation passes only when the
/// deployed skill hoists the invocation.
pub fn hoist_scenario(
    fx: &TaskFixture,
    name: &str,
    r_max: u32,
) -> (RunResult, ScriptedBackend, ScriptedReasoner) {
    let reasoner = ScriptedReasoner::new().with(ReasonerResponse::Patch(Patch::new(vec![
        add("SKILL.md", UNHOISTED_MANIFEST),
        add("scripts/solve.py", SOLVER),
    ])));
    let fixture = ScriptedFixture { rules: vec![] }
        .rule(
            TrialMatch {
                phase: Some(TrialPhase::Validation),
                primary_hoisted: Some(true),
                ..TrialMatch::default()
            },
            passing("python3 {primary}"),
        )
        .rule(on(TrialPhase::Validation), failing("python3 attempt.py"))
        .rule(explore(0, 1), passing("python3 attempt.py --greedy"))
        .rule(explore(0, 2), passing("python3 attempt.py --greedy"))
        .rule(explore(1, 4), failing("python3 {primary}"))
        .rule(
            TrialMatch {
                phase: Some(TrialPhase::Exploration),
                iteration: Some(1),
                ..TrialMatch::default()
            },
            passing("python3 {primary}"),
        )
        .rule(on(TrialPhase::Exploration), failing("python3 attempt.py"));
    let backend = ScriptedBackend::new(fixture);
    let result = evolve(fx, name, &config(4, r_max, 5), &backend, &reasoner);
    (result, backend, reasoner)
}

pub const BYPASS_MANIFEST: &str = "---\n\
name: schedule-builder\n\
description: Build a feasible plan from the task inputs.\n\
primary_script: scripts/solve.py\n\
---\n\n\
## Run\n\n\
Run `python3 scripts/solve.py <data-dir>` first and read the plan it prints.\n";

pub const HELPER: &str =
    "def plan(rows):\n    return sorted(rows, key=lambda r: list(r.values()))\n";

/// Scenario where the declared script is never invoked and most trials
/// fail: validation passes only when the skill bundles the helper the
/// script needs.
pub fn bypass_scenario(
    fx: &TaskFixture,
    name: &str,
    r_max: u32,
) -> (RunResult, ScriptedBackend, ScriptedReasoner) {
    let reasoner = ScriptedReasoner::new()
        .with(ReasonerResponse::Patch(Patch::new(vec![
            add("SKILL.md", BYPASS_MANIFEST),
            add("scripts/solve.py", SOLVER),
        ])))
        .with(ReasonerResponse::Patch(Patch::new(vec![add(
            "scripts/helper.py",
            HELPER,
        )])));
    let fixture = ScriptedFixture { rules: vec![] }
        .rule(
            TrialMatch {
                phase: Some(TrialPhase::Validation),
                skill_has_file: Some("scripts/helper.py".into()),
                ..TrialMatch::default()
            },
            passing("python3 {primary}"),
        )
        .rule(on(TrialPhase::Validation), failing("python3 attempt.py"))
        .rule(explore(0, 1), passing("python3 attempt.py"))
        .rule(
            TrialMatch {
                phase: Some(TrialPhase::Exploration),
                iteration: Some(0),
                ..TrialMatch::default()
            },
            failing("python3 attempt.py"),
        )
        .rule(explore(1, 1), passing("python3 {primary}"))
        .rule(explore(1, 2), passing("python3 {primary}"))
        .rule(on(TrialPhase::Exploration), failing("python3 {primary}"));
    let backend = ScriptedBackend::new(fixture);
    let result = evolve(fx, name, &config(4, r_max, 5), &backend, &reasoner);
    (result, backend, reasoner)
}

use std::collections::BTreeMap;

use skillsmith_core::audit::TrainingManifestIndex;
use skillsmith_core::runner::{Trace, TraceEvent, TrialOutcome};
use skillsmith_core::skill::SkillArtifact;

/// Exploration outcome whose trace runs `cmds` in order, one per turn.
pub fn outcome(id: &str, index: usize, reward: f64, cmds: &[&str]) -> TrialOutcome {
    let events = cmds
        .iter()
        .enumerate()
        .map(|(i, c)| TraceEvent {
            seq: i as u32,
            turn: i as u32 + 1,
            tool: "Bash".into(),
            target_paths: Vec::new(),
            command: Some(c.to_string()),
            command_digest: None,
            output_digest: None,
            output_bytes: None,
            denied: None,
        })
        .collect::<Vec<_>>();
    TrialOutcome {
        trial_id: id.into(),
        phase: TrialPhase::Exploration,
        iteration: 0,
        strategy_index: index,
        trace: Trace {
            turns: events.len() as u32,
            events,
            tokens: 1000,
            tokens_approximate: false,
            wall_clock_s: 1.0,
            cost_usd: 0.01,
        },
        reward,
        correctness: reward > 0.0,
        over_budget: false,
        crashed: None,
        deployed_skill: None,
        workspace: PathBuf::from("/ws").join(id),
        started_at_ms: 0,
        finished_at_ms: 0,
    }
}

pub fn skill(files: &[(&str, &str)]) -> SkillArtifact {
    let map: BTreeMap<RelPath, Vec<u8>> = files
        .iter()
        .map(|(p, c)| (RelPath::new(*p).unwrap(), c.as_bytes().to_vec()))
        .collect();
    SkillArtifact::from_files(map, 1).unwrap()
}

/// Index matching the training side of `task_fixture`.
pub fn fixture_index() -> TrainingManifestIndex {
    let mut idx = TrainingManifestIndex::default();
    idx.add_filename("jobs.csv");
    idx.add_filename("config.json");
    for f in ["job_id", "machine", "duration", "shop", "tolerance"] {
        idx.add_field(f);
    }
    idx.add_value("north-plant");
    idx.add_value("0.75");
    idx
}

use super::*;
use skillsmith_core::audit::{audit, AuditInput, AuditReport, CheckId, Severity};
use skillsmith_core::contrast::HeuristicReasoner;
use skillsmith_core::runner::TrialOutcome;
use skillsmith_core::skill::SkillArtifact;
use skillsmith_core::task::{RewardKind, TaskKind};

const CLEAN_MANIFEST: &str = "---\nname: plan-builder\ndescription: Build a feasible plan from runtime inputs.\n---\n\n## Steps\n\nRead the inputs, then write the plan.\n";

const HOISTED: &str = "---\nname: plan-builder\ndescription: Build a feasible plan from runtime inputs.\nprimary_script: scripts/solve.py\n---\n\n## Run\n\nRun `python3 scripts/solve.py <data-dir>` first.\n\n## Notes\n\nConfirm the plan covers every operation.\n";

fn input(candidate: SkillArtifact, outcomes: Vec<TrialOutcome>, kind: TaskKind) -> AuditInput {
    AuditInput {
        candidate,
        instruction: "Produce a feasible plan.".into(),
        task_kind: kind,
        reward_kind: RewardKind::Binary,
        no_skill_baseline_mean: None,
        index: fixture_index(),
        outcomes,
        parametric_values: vec!["0.75".into()],
    }
}

fn batch(passes: usize, k: usize, cmd: &str) -> Vec<TrialOutcome> {
    (1..=k)
        .map(|i| {
            outcome(
                &format!("t{i}"),
                i,
                if i <= passes { 1.0 } else { 0.0 },
                &[cmd],
            )
        })
        .collect()
}

fn run(candidate: SkillArtifact, outcomes: Vec<TrialOutcome>, kind: TaskKind) -> AuditReport {
    let r = audit(&input(candidate, outcomes, kind), &HeuristicReasoner);
    assert_eq!(r.gate, r.count(Severity::Critical) == 0, "gate law");
    r
}

fn fired(r: &AuditReport, c: CheckId) -> bool {
    r.checks_fired().contains(&c)
}

fn with_script(script: &str) -> SkillArtifact {
    skill(&[("SKILL.md", HOISTED), ("scripts/solve.py", script)])
}

fn lines(n: usize) -> String {
    (0..n).map(|i| format!("x{i} = {i}\n")).collect()
}

pub fn clean_skill_passes_every_check() {
    let r = run(
        with_script(SOLVER),
        batch(4, 4, "python3 scripts/solve.py in"),
        TaskKind::Mechanical,
    );
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    assert!(r.gate);
    assert_eq!(r.exit_code(), 0);
}

pub fn literals_check() {
    let bad = CLEAN_MANIFEST.replace("Read the inputs", "Read the north-plant inputs");
    let r = run(
        skill(&[("SKILL.md", &bad)]),
        batch(4, 4, "x"),
        TaskKind::Open,
    );
    assert!(fired(&r, CheckId::Literals));
    assert!(!r.gate);
    let soft = CLEAN_MANIFEST.replace(
        "write the plan.",
        "write the plan; gaps are typically < 2.5 units.",
    );
    assert!(fired(
        &run(
            skill(&[("SKILL.md", &soft)]),
            batch(4, 4, "x"),
            TaskKind::Open
        ),
        CheckId::Literals
    ));
    let cited = soft.replace("units.", "units [trace:t1#0-0].");
    assert!(!fired(
        &run(
            skill(&[("SKILL.md", &cited)]),
            batch(4, 4, "x"),
            TaskKind::Open
        ),
        CheckId::Literals
    ));
    let r = run(
        skill(&[("SKILL.md", CLEAN_MANIFEST)]),
        batch(4, 4, "x"),
        TaskKind::Open,
    );
    assert!(!fired(&r, CheckId::Literals));
    // token-bounded: "machines" is not the field "machine"
    let plural =
        CLEAN_MANIFEST.replace("Read the inputs", "Read the machines listed in the inputs");
    assert!(!fired(
        &run(
            skill(&[("SKILL.md", &plural)]),
            batch(4, 4, "x"),
            TaskKind::Open
        ),
        CheckId::Literals
    ));
}

pub fn script_bloat_boundaries() {
    let at = |n: usize| {
        run(
            with_script(&lines(n)),
            batch(4, 4, "python3 scripts/solve.py"),
            TaskKind::Mechanical,
        )
    };
    assert!(!fired(&at(200), CheckId::ScriptBloat));
    let r = at(201);
    assert!(fired(&r, CheckId::ScriptBloat));
    assert_eq!(r.count(Severity::Critical), 0);
    assert!(r.gate);
    assert_eq!(r.exit_code(), 2);
    assert_eq!(at(400).count(Severity::Critical), 0);
    let r = at(401);
    assert!(fired(&r, CheckId::ScriptBloat));
    assert!(!r.gate);
    assert_eq!(r.exit_code(), 3);
}

pub fn shape_bake_subscript_and_keyword_branches() {
    let fixed = "import json, sys\nrow = json.load(open(sys.argv[1]))\nprint(row[\"span\"])\n";
    assert!(fired(
        &run(
            with_script(fixed),
            batch(4, 4, "solve.py"),
            TaskKind::Mechanical
        ),
        CheckId::ShapeBake
    ));
    let probed = "import json, sys\nrow = json.load(open(sys.argv[1]))\nassert \"span\" in row.keys()\nprint(row[\"span\"])\n";
    assert!(!fired(
        &run(
            with_script(probed),
            batch(4, 4, "solve.py"),
            TaskKind::Mechanical
        ),
        CheckId::ShapeBake
    ));
    let env = "import os\nprint(os.environ[\"HOME\"])\n";
    assert!(!fired(
        &run(
            with_script(env),
            batch(4, 4, "solve.py"),
            TaskKind::Mechanical
        ),
        CheckId::ShapeBake
    ));

    let branch = |kw: &str| {
        format!(
            "    {} \"{kw}\" in text:\n        mode = \"{kw}\"\n",
            "elif"
        )
    };
    let dispatch = |n: usize| {
        let mut s =
            "import sys\ntext = sys.argv[1]\nmode = None\nif False:\n    pass\n".to_string();
        for kw in ["alpha", "beta", "gamma", "delta"].iter().take(n) {
            s.push_str(&branch(kw).replacen("    elif", "elif", 1));
        }
        s
    };
    assert!(!fired(
        &run(
            with_script(&dispatch(2)),
            batch(4, 4, "solve.py"),
            TaskKind::Mechanical
        ),
        CheckId::ShapeBake
    ));
    assert!(fired(
        &run(
            with_script(&dispatch(3)),
            batch(4, 4, "solve.py"),
            TaskKind::Mechanical
        ),
        CheckId::ShapeBake
    ));
}

pub fn coverage_check() {
    let bare = skill(&[("SKILL.md", CLEAN_MANIFEST)]);
    let r = run(bare.clone(), batch(2, 4, "x"), TaskKind::Mechanical);
    assert!(fired(&r, CheckId::Coverage));
    assert_eq!(r.count(Severity::Critical), 0);
    assert!(!fired(
        &run(bare.clone(), batch(3, 4, "x"), TaskKind::Mechanical),
        CheckId::Coverage
    ));
    assert!(!fired(
        &run(bare, batch(2, 4, "x"), TaskKind::Open),
        CheckId::Coverage
    ));
    assert!(!fired(
        &run(
            with_script(SOLVER),
            batch(2, 4, "solve.py"),
            TaskKind::Mechanical
        ),
        CheckId::Coverage
    ));
}

pub fn cross_ref_check() {
    let hard = "import csv\nrows = list(csv.reader(open(\"data/jobs.csv\")))\nprint(len(rows))\n";
    let r = run(
        with_script(hard),
        batch(4, 4, "solve.py"),
        TaskKind::Mechanical,
    );
    assert!(fired(&r, CheckId::CrossRef));
    assert_eq!(
        r.violations
            .iter()
            .filter(|v| v.check == CheckId::CrossRef)
            .count(),
        1
    );
    let glob = "import glob\nprint(glob.glob(\"*.csv\"))\n";
    assert!(!fired(
        &run(
            with_script(glob),
            batch(4, 4, "solve.py"),
            TaskKind::Mechanical
        ),
        CheckId::CrossRef
    ));
}

pub fn hoisting_check() {
    let r = run(
        skill(&[
            ("SKILL.md", UNHOISTED_MANIFEST),
            ("scripts/solve.py", SOLVER),
        ]),
        batch(4, 4, "solve.py"),
        TaskKind::Mechanical,
    );
    assert!(fired(&r, CheckId::Hoisting));
    assert!(!r.gate);
    assert!(!fired(
        &run(
            with_script(SOLVER),
            batch(4, 4, "solve.py"),
            TaskKind::Mechanical
        ),
        CheckId::Hoisting
    ));
    let never = HOISTED.replace(
        "Run `python3 scripts/solve.py <data-dir>` first.",
        "Run the bundled tool first.",
    );
    let r = run(
        skill(&[("SKILL.md", &never), ("scripts/solve.py", SOLVER)]),
        batch(4, 4, "solve.py"),
        TaskKind::Mechanical,
    );
    assert!(fired(&r, CheckId::Hoisting));
    // no declared script means nothing to hoist
    assert!(!fired(
        &run(
            skill(&[("SKILL.md", CLEAN_MANIFEST)]),
            batch(4, 4, "x"),
            TaskKind::Open
        ),
        CheckId::Hoisting
    ));
}

pub fn silent_bypass_boundaries() {
    let s = || with_script(SOLVER);
    // K/2 fails is not a majority
    assert!(!fired(
        &run(s(), batch(2, 4, "python3 other.py"), TaskKind::Mechanical),
        CheckId::SilentBypass
    ));
    let r = run(s(), batch(1, 4, "python3 other.py"), TaskKind::Mechanical);
    assert!(fired(&r, CheckId::SilentBypass));
    assert!(!r.gate);
    // invoked by file name alone
    assert!(!fired(
        &run(
            s(),
            batch(1, 4, "cd scripts && python3 solve.py x"),
            TaskKind::Mechanical
        ),
        CheckId::SilentBypass
    ));
    // a different file sharing the stem is not an invocation
    assert!(fired(
        &run(s(), batch(1, 4, "python3 resolve.py"), TaskKind::Mechanical),
        CheckId::SilentBypass
    ));
    // over-budget counts as a fail
    let mut b = batch(2, 4, "python3 other.py");
    b[0].over_budget = true;
    assert!(fired(
        &run(s(), b, TaskKind::Mechanical),
        CheckId::SilentBypass
    ));
}

pub fn scalar_fail_threshold_uses_baseline() {
    let mut i = input(with_script(SOLVER), Vec::new(), TaskKind::Mechanical);
    i.reward_kind = RewardKind::ScalarSpeedup {
        timing_file: "timing.json".into(),
    };
    i.no_skill_baseline_mean = Some(1.2);
    i.outcomes = [1.0, 1.1, 1.5, 0.9]
        .iter()
        .enumerate()
        .map(|(n, r)| outcome(&format!("t{n}"), n + 1, *r, &["python3 other.py"]))
        .collect();
    let r = audit(&i, &HeuristicReasoner);
    assert!(fired(&r, CheckId::SilentBypass));
    i.no_skill_baseline_mean = Some(1.0);
    assert!(!fired(
        &audit(&i, &HeuristicReasoner),
        CheckId::SilentBypass
    ));
}

pub fn framing_and_under_abstraction() {
    let named = CLEAN_MANIFEST.replace("name: plan-builder", "name: north-plant-planner");
    assert!(fired(
        &run(
            skill(&[("SKILL.md", &named)]),
            batch(4, 4, "x"),
            TaskKind::Open
        ),
        CheckId::Framing
    ));
    let constant = CLEAN_MANIFEST.replace("then write the plan.", "then always use a 0.75 ratio.");
    assert!(fired(
        &run(
            skill(&[("SKILL.md", &constant)]),
            batch(4, 4, "x"),
            TaskKind::Open
        ),
        CheckId::UnderAbstraction
    ));
    let rederive = constant.replace(
        "0.75 ratio.",
        "0.75 ratio. Re-derive the ratio from the inputs at runtime.",
    );
    assert!(!fired(
        &run(
            skill(&[("SKILL.md", &rederive)]),
            batch(4, 4, "x"),
            TaskKind::Open
        ),
        CheckId::UnderAbstraction
    ));
}

pub fn report_json_rejects_inconsistent_gate() {
    let r = run(
        with_script(&lines(401)),
        batch(4, 4, "solve.py"),
        TaskKind::Mechanical,
    );
    let mut v = serde_json::to_value(&r).unwrap();
    assert_eq!(serde_json::from_value::<AuditReport>(v.clone()).unwrap(), r);
    v["gate"] = serde_json::Value::Bool(true);
    assert!(serde_json::from_value::<AuditReport>(v).is_err());
}

pub const ALL: &[fn()] = &[
    clean_skill_passes_every_check,
    literals_check,
    script_bloat_boundaries,
    shape_bake_subscript_and_keyword_branches,
    coverage_check,
    cross_ref_check,
    hoisting_check,
    silent_bypass_boundaries,
    scalar_fail_threshold_uses_baseline,
    framing_and_under_abstraction,
    report_json_rejects_inconsistent_gate,
];

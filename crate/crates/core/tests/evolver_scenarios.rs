mod common;

use common::*;
use skillsmith_core::audit::CheckId;
use skillsmith_core::evolver::{phase_order_violations, split_hygiene, Chosen};
use skillsmith_core::runner::{TraceStore, TrialPhase};

#[test]
fn accounting_matches_iterations_times_k_plus_v() {
    for (r, expected) in [(1, 9), (2, 13)] {
        let fx = task_fixture("open");
        let backend = pass_backend();
        let res = evolve(&fx, "run", &config(4, r, 5), &backend, &heuristic());
        assert_eq!(backend.total_calls(), expected, "R={r}");
        assert_eq!(backend.harness_calls(), expected);
        assert_eq!(res.manifest.harness_invocations, expected);
        assert_eq!(res.manifest.iterations_executed, r);
    }
}

#[test]
fn curated_slot_is_removed_before_exploration() {
    let fx = task_fixture("open");
    let res = evolve(&fx, "run", &config(4, 1, 5), &pass_backend(), &heuristic());
    let prep = res.manifest.prep.unwrap();
    assert!(prep.removed);
    assert!(!fx.root.join("task/train/skills/curated").exists());
}

#[test]
fn hoist_repair_moves_validation_from_zero_to_full() {
    let fx = task_fixture("mechanical");
    let (before, _, _) = hoist_scenario(&fx, "r1", 1);
    assert_eq!(before.validation.pass_count, 0);
    let v1 = &before.state.lineage.candidates[0];
    assert!(v1.report.checks_fired().contains(&CheckId::Hoisting));

    let fx = task_fixture("mechanical");
    let (after, backend, _) = hoist_scenario(&fx, "r2", 2);
    assert_eq!(after.validation.pass_count, 5);
    assert_eq!(after.validation.score, 1.0);
    let chosen = after.final_skill.as_ref().unwrap();
    assert!(chosen.manifest.invocation_hoisted());
    assert_eq!(chosen.version_index, 2);
    assert_eq!(
        after.decision.unwrap().chosen,
        Chosen::Version { version: 2 }
    );
    assert_eq!(backend.harness_calls(), 13);
    // only the manifest changed between v1 and v2
    let v1 = after.state.lineage.find(1).unwrap();
    assert_eq!(v1.file("scripts/solve.py"), chosen.file("scripts/solve.py"));
}

#[test]
fn bypass_is_caught_and_repaired() {
    let fx = task_fixture("mechanical");
    let (before, _, _) = bypass_scenario(&fx, "r1", 1);
    assert_eq!(before.validation.pass_count, 0);
    assert!(before.state.lineage.candidates[0]
        .report
        .checks_fired()
        .contains(&CheckId::SilentBypass));

    let fx = task_fixture("mechanical");
    let (after, _, reasoner) = bypass_scenario(&fx, "r2", 2);
    assert_eq!(after.validation.pass_count, 5);
    let chosen = after.final_skill.as_ref().unwrap();
    assert!(chosen.file("scripts/helper.py").is_some());
    assert_eq!(reasoner.remaining(), 0);
}

#[test]
fn deployed_skill_matches_lineage_entry() {
    let fx = task_fixture("mechanical");
    let (res, _, _) = hoist_scenario(&fx, "run", 2);
    let store = TraceStore::open(res.run_dir.join("traces")).unwrap();
    let mut checked = 0;
    for o in store.load_all().unwrap() {
        if o.phase != TrialPhase::Exploration || o.iteration == 0 {
            continue;
        }
        let d = o.deployed_skill.unwrap();
        let v = res.state.lineage.find(d.version_index).unwrap();
        assert_eq!(d.digest, v.digest());
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[test]
fn persisted_runs_keep_phase_order_and_split() {
    let fx = task_fixture("mechanical");
    let (res, _, _) = hoist_scenario(&fx, "run", 2);
    assert!(phase_order_violations(&res.run_dir).unwrap().is_empty());
    let store = TraceStore::open(res.run_dir.join("traces")).unwrap();
    assert!(split_hygiene(&store, &fx.task).unwrap().is_empty());
    assert!(res.run_dir.join("output/SKILL.md").exists());
    assert!(res.run_dir.join("final/SKILL.md").exists());
    assert!(res.run_dir.join("audits/v1.json").exists());
}

#[test]
fn hygiene_scan_flags_validation_paths_in_exploration() {
    use skillsmith_core::runner::{EventTemplate, ScriptedBackend, ScriptedFixture, ScriptedTrial};
    let fx = task_fixture("open");
    let leak = format!("cat {}/data/jobs.csv", fx.task.val_env.display());
    let backend = ScriptedBackend::new(ScriptedFixture { rules: vec![] }.rule(
        any_trial(),
        ScriptedTrial::pass().with_events(vec![EventTemplate::shell(&leak)]),
    ));
    let res = evolve(&fx, "run", &config(2, 1, 1), &backend, &heuristic());
    let store = TraceStore::open(res.run_dir.join("traces")).unwrap();
    let found = split_hygiene(&store, &fx.task).unwrap();
    assert!(found.iter().any(|f| f.phase == TrialPhase::Exploration));
}

#[test]
fn merge_patch_is_applied_and_recorded() {
    use skillsmith_core::evolver::{run_evolution, RunOptions};
    use skillsmith_core::skill::Patch;
    let fx = task_fixture("open");
    let opts = RunOptions {
        merge_patch: Some(Patch::new(vec![add(
            "references/notes.md",
            "Check the plan twice.\n",
        )])),
    };
    let res = run_evolution(
        &fx.task,
        &config(4, 1, 2),
        &pass_backend(),
        &heuristic(),
        &fx.run_root("run"),
        &opts,
    )
    .unwrap();
    assert!(res.manifest.merge_applied);
    let skill = res.final_skill.unwrap();
    assert!(skill.file("references/notes.md").is_some());
    assert!(matches!(res.decision.unwrap().chosen, Chosen::Merge { .. }));
}

#[test]
fn run_directory_refuses_reuse() {
    let fx = task_fixture("open");
    evolve(&fx, "run", &config(2, 1, 1), &pass_backend(), &heuristic());
    let again = skillsmith_core::evolver::run_evolution(
        &fx.task,
        &config(2, 1, 1),
        &pass_backend(),
        &heuristic(),
        &fx.run_root("run"),
        &Default::default(),
    );
    assert!(again.is_err());
}

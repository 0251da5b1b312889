use std::collections::{BTreeMap, BTreeSet};

use super::outcome;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skillsmith_core::contrast::{
    extract_contrast, normalize_description, partition, ContrastOptions, Degenerate, EventRef,
    Feature, FeatureKind, HeuristicReasoner, Reasoner, ReasonerResponse, ScriptedReasoner,
};
use skillsmith_core::runner::TrialOutcome;
use skillsmith_core::task::RewardKind;

const DESCRIPTIONS: [&str; 6] = [
    "probe the input columns before parsing",
    "validate the plan with the checker",
    "retry on solver timeout",
    "write output atomically",
    "sort operations by release time",
    "skip the verification step",
];

const COMMANDS: [&str; 5] = [
    "python3 solve.py",
    "ls data",
    "cat notes.md",
    "python3 check.py",
    "pip list",
];

fn batch(rng: &mut ChaCha8Rng) -> Vec<TrialOutcome> {
    let k = rng.gen_range(2..=8);
    (1..=k)
        .map(|i| {
            let n = rng.gen_range(1..=10);
            let cmds: Vec<&str> = (0..n).map(|_| *COMMANDS.choose(rng).unwrap()).collect();
            let mut o = outcome(
                &format!("t{i}"),
                i,
                if rng.gen_bool(0.5) { 1.0 } else { 0.0 },
                &cmds,
            );
            o.over_budget = rng.gen_bool(0.1);
            o
        })
        .collect()
}

fn noisy(rng: &mut ChaCha8Rng, s: &str) -> String {
    match rng.gen_range(0..3) {
        0 => s.to_string(),
        1 => s.to_uppercase(),
        _ => s.replace(' ', "  "),
    }
}

fn random_features(rng: &mut ChaCha8Rng, ids: &[String]) -> Vec<Feature> {
    (0..rng.gen_range(0..6))
        .map(|_| {
            let d = *DESCRIPTIONS.choose(rng).unwrap();
            Feature {
                description: noisy(rng, d),
                provenance: (0..rng.gen_range(0..3))
                    .map(|_| {
                        let start = rng.gen_range(0..14);
                        EventRef {
                            trial_id: ids.choose(rng).unwrap().clone(),
                            start,
                            end: if rng.gen_bool(0.1) {
                                start.saturating_sub(1)
                            } else {
                                start + rng.gen_range(0..3)
                            },
                        }
                    })
                    .collect(),
                kind: FeatureKind::CodePattern,
                pretraining_obvious: rng.gen_bool(0.1),
            }
        })
        .collect()
}

/// Features with at least one reference landing on an event of a trial in
/// `side`.
fn traceable(features: &[Feature], side: &[String], outcomes: &[TrialOutcome]) -> Vec<Feature> {
    let seqs: BTreeMap<&str, BTreeSet<u32>> = outcomes
        .iter()
        .filter(|o| side.contains(&o.trial_id))
        .map(|o| {
            (
                o.trial_id.as_str(),
                o.trace.events.iter().map(|e| e.seq).collect(),
            )
        })
        .collect();
    features
        .iter()
        .filter(|f| {
            f.provenance.iter().any(|r| {
                r.start <= r.end
                    && seqs
                        .get(r.trial_id.as_str())
                        .is_some_and(|s| s.range(r.start..=r.end).next().is_some())
            })
        })
        .cloned()
        .collect()
}

fn keys(fs: &[Feature]) -> BTreeSet<String> {
    fs.iter()
        .map(|f| normalize_description(&f.description))
        .collect()
}

/// Randomized contrast iterations checking set difference against the
/// losing side and that every kept provenance reference resolves. Panics on
/// the first violation.
pub fn contrast_laws(iterations: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exercised = BTreeMap::new();
    for it in 0..iterations {
        let outcomes = batch(&mut rng);
        let split = partition(&outcomes, &RewardKind::Binary).unwrap();
        let pos: BTreeSet<&String> = split.positives.iter().collect();
        assert!(
            split.negatives.iter().all(|n| !pos.contains(n)),
            "disjoint sides"
        );
        assert_eq!(
            split.positives.len() + split.negatives.len(),
            outcomes.len()
        );

        let ids: Vec<String> = outcomes.iter().map(|o| o.trial_id.clone()).collect();
        let pos_raw = random_features(&mut rng, &ids);
        let neg_raw = random_features(&mut rng, &ids);
        let scripted = it % 5 != 0;
        let reasoner: Box<dyn Reasoner> = if scripted {
            let r = match split.degenerate {
                Some(Degenerate::AllFail) => {
                    ScriptedReasoner::new().with(ReasonerResponse::Features {
                        features: neg_raw.clone(),
                    })
                }
                _ => ScriptedReasoner::new()
                    .with(ReasonerResponse::Features {
                        features: pos_raw.clone(),
                    })
                    .with(ReasonerResponse::Features {
                        features: neg_raw.clone(),
                    }),
            };
            Box::new(r)
        } else {
            Box::new(HeuristicReasoner)
        };
        let opts = ContrastOptions {
            distill_on_all_pass: true,
            ..ContrastOptions::default()
        };
        let signal = extract_contrast(0, &split, &outcomes, reasoner.as_ref(), opts).unwrap();
        *exercised
            .entry(format!("{:?}", split.degenerate))
            .or_insert(0) += 1;

        // provenance totality: every kept feature resolves into its side
        let side = match split.degenerate {
            Some(Degenerate::AllFail) => &split.negatives,
            _ => &split.positives,
        };
        for f in &signal.features {
            assert!(!f.provenance.is_empty(), "iteration {it}: {f:?}");
            assert_eq!(
                traceable(std::slice::from_ref(f), side, &outcomes).len(),
                1,
                "iteration {it}: {f:?}"
            );
            let all_refs_resolve = traceable(
                &f.provenance
                    .iter()
                    .map(|r| Feature {
                        provenance: vec![r.clone()],
                        ..f.clone()
                    })
                    .collect::<Vec<_>>(),
                side,
                &outcomes,
            );
            assert_eq!(
                all_refs_resolve.len(),
                f.provenance.len(),
                "iteration {it}: dangling ref kept"
            );
        }
        assert_eq!(
            keys(&signal.features).len(),
            signal.features.len(),
            "deduplicated"
        );
        assert!(signal.features.iter().all(|f| !f.pretraining_obvious));

        if !scripted {
            continue;
        }
        // exact expected key set from an independent reading of the law
        let expected: BTreeSet<String> = match split.degenerate {
            Some(Degenerate::AllFail) => keys(&traceable(&neg_raw, &split.negatives, &outcomes)),
            Some(Degenerate::AllPass) => keys(&traceable(&pos_raw, &split.positives, &outcomes)),
            None => {
                let losers = keys(&traceable(&neg_raw, &split.negatives, &outcomes));
                keys(&traceable(&pos_raw, &split.positives, &outcomes))
                    .difference(&losers)
                    .cloned()
                    .collect()
            }
        };
        let kept_or_dropped: BTreeSet<String> = keys(&signal.features)
            .union(&keys(&signal.dropped_as_pretraining))
            .cloned()
            .collect();
        assert_eq!(kept_or_dropped, expected, "iteration {it}");
        if split.degenerate.is_none() {
            let losers = keys(&traceable(&neg_raw, &split.negatives, &outcomes));
            assert!(
                keys(&signal.features).is_disjoint(&losers),
                "iteration {it}: set difference"
            );
        }
    }
    assert!(
        exercised.len() >= 3,
        "all partition shapes exercised: {exercised:?}"
    );
}

use skillsmith_core::skill::{apply_patch, Edit, Patch, RelPath, SkillArtifact};

const PATHS: [&str; 7] = [
    "SKILL.md",
    "scripts/solve.py",
    "scripts/check.py",
    "references/notes.md",
    "references/deep/table.md",
    "assets/template.txt",
    "scripts/extra.sh",
];

fn random_text(rng: &mut ChaCha8Rng, lines: usize) -> String {
    (0..lines)
        .map(|i| format!("line {i} {}\n", rng.gen::<u16>()))
        .collect()
}

fn random_manifest(rng: &mut ChaCha8Rng) -> String {
    let mut s = "---\nname: plan-builder\ndescription: Build a plan.\n---\n\n".to_string();
    for h in ["Run", "Constraints", "Notes"]
        .iter()
        .take(rng.gen_range(1..=3))
    {
        let n = rng.gen_range(1..4);
        s.push_str(&format!("## {h}\n\n{}\n", random_text(rng, n)));
    }
    s
}

fn random_artifact(rng: &mut ChaCha8Rng) -> SkillArtifact {
    let mut files = BTreeMap::new();
    files.insert(
        RelPath::new("SKILL.md").unwrap(),
        random_manifest(rng).into_bytes(),
    );
    for p in PATHS[1..].iter() {
        if rng.gen_bool(0.5) {
            let n = rng.gen_range(0..8);
            files.insert(RelPath::new(*p).unwrap(), random_text(rng, n).into_bytes());
        }
    }
    SkillArtifact::from_files(files, rng.gen_range(1..5)).unwrap()
}

fn random_edit(rng: &mut ChaCha8Rng, v: &SkillArtifact) -> Edit {
    let path = RelPath::new(*PATHS.choose(rng).unwrap()).unwrap();
    let len = v.text(path.as_str()).map_or(0, |t| t.lines().count());
    match rng.gen_range(0..5) {
        0 => Edit::AddFile {
            content: random_text(rng, 3),
            path,
        },
        1 | 2 => {
            let start = rng.gen_range(0..=len + 1);
            let end = (start + rng.gen_range(0..3)).min(len + 1);
            let n = rng.gen_range(0..3);
            Edit::ReplaceRegion {
                path,
                start,
                end,
                content: random_text(rng, n),
            }
        }
        3 => Edit::DeleteFile { path },
        _ => {
            let n = v.manifest.body_sections.len();
            let mut permutation: Vec<usize> = (0..n).collect();
            permutation.shuffle(rng);
            Edit::ReorderSections {
                path: RelPath::new("SKILL.md").unwrap(),
                permutation,
            }
        }
    }
}

/// Random (artifact, patch) pairs: whenever a patch applies, every file
/// whose bytes differ is named by the patch. Returns how many applied.
pub fn surgical_patch(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut applied = 0;
    for case in 0..cases {
        let v = random_artifact(&mut rng);
        let n = rng.gen_range(1..=3);
        let edits = (0..n).map(|_| random_edit(&mut rng, &v)).collect();
        let patch = Patch::new(edits);
        let Ok(w) = apply_patch(&v, &patch) else {
            continue;
        };
        applied += 1;
        let named = patch.named_paths();
        let before = v.file_digests();
        let after = w.file_digests();
        let touched: BTreeSet<&RelPath> = before
            .keys()
            .chain(after.keys())
            .filter(|p| before.get(*p) != after.get(*p))
            .collect();
        for p in touched {
            assert!(
                named.contains(p),
                "case {case}: {p} changed but the patch names only {named:?}"
            );
        }
        assert_eq!(w.version_index, v.version_index + 1, "case {case}");
    }
    applied
}

use std::fs;
use std::os::unix::fs::symlink;
use std::path::{Component, Path, PathBuf};

use skillsmith_core::guard::{evaluate, GuardPhase, PathPolicy, Reason, ToolCallRequest};

/// Sandbox layout for the guard fuzz: a workspace holding plain files,
/// internal links, escaping links, link chains up to depth four, a link onto
/// the curated slot, and a link cycle.
pub struct SandboxLayout {
    pub dir: tempfile::TempDir,
    pub root: PathBuf,
    pub ws: PathBuf,
    pub slot: PathBuf,
    pub val: PathBuf,
    pub policy: PathPolicy,
}

pub fn sandbox_layout() -> SandboxLayout {
    let dir = tempfile::tempdir().unwrap();
    let root = fs::canonicalize(dir.path()).unwrap();
    let ws = root.join("ws");
    let slot = root.join("train/skills/curated");
    let val = root.join("val");
    for d in [
        ws.join("sub/deep"),
        root.join("outside"),
        slot.clone(),
        val.clone(),
    ] {
        fs::create_dir_all(d).unwrap();
    }
    fs::write(ws.join("file.txt"), "x").unwrap();
    fs::write(ws.join("sub/deep/data.csv"), "x").unwrap();
    fs::write(slot.join("SKILL.md"), "x").unwrap();
    fs::write(root.join("outside/secret"), "x").unwrap();
    let link = |target: &Path, name: &str| symlink(target, ws.join(name)).unwrap();
    link(&ws.join("sub"), "inlink");
    link(Path::new("sub/deep"), "rel_in");
    link(&root.join("outside"), "esc");
    link(Path::new("../outside"), "rel_esc");
    link(&slot, "slotlink");
    link(&val, "vallink");
    link(&root.join("outside/not-yet"), "dangle");
    link(Path::new("sub/missing"), "dangle_in");
    // escaping chain c1 -> c2 -> c3 -> c4 -> outside
    link(&ws.join("c2"), "c1");
    link(&ws.join("c3"), "c2");
    link(&ws.join("c4"), "c3");
    link(&root.join("outside"), "c4");
    // internal chain d1 -> d2 -> d3 -> sub
    link(&ws.join("d2"), "d1");
    link(&ws.join("d3"), "d2");
    link(&ws.join("sub"), "d3");
    // cycle
    link(&ws.join("loop2"), "loop1");
    link(&ws.join("loop1"), "loop2");
    let policy =
        PathPolicy::new(&ws, [slot.clone(), val.clone()], GuardPhase::Exploration).unwrap();
    SandboxLayout {
        dir,
        root,
        ws,
        slot,
        val,
        policy,
    }
}

/// Independent physical-location oracle: canonicalize the longest existing
/// prefix and append the rest, following a dangling link by hand. `None` for
/// link cycles.
fn physical(p: &Path) -> Option<PathBuf> {
    physical_within(p, 40)
}

fn physical_within(p: &Path, hops: usize) -> Option<PathBuf> {
    let parts: Vec<Component> = p.components().collect();
    for cut in (1..=parts.len()).rev() {
        let prefix: PathBuf = parts[..cut].iter().collect();
        let Ok(c) = fs::canonicalize(&prefix) else {
            continue;
        };
        if cut == parts.len() {
            return Some(c);
        }
        let next = c.join(parts[cut]);
        let rest: PathBuf = parts[cut + 1..].iter().collect();
        return match fs::read_link(&next) {
            Ok(target) if hops > 0 => physical_within(&c.join(target).join(rest), hops - 1),
            Ok(_) => None,
            Err(_) => Some(next.join(rest)),
        };
    }
    None
}

const SEGMENTS: [&str; 19] = [
    "sub",
    "deep",
    "file.txt",
    "data.csv",
    "inlink",
    "rel_in",
    "esc",
    "rel_esc",
    "slotlink",
    "vallink",
    "dangle",
    "dangle_in",
    "c1",
    "c3",
    "d1",
    "loop1",
    "..",
    ".",
    "new",
];

fn random_path(rng: &mut ChaCha8Rng, l: &SandboxLayout) -> String {
    let bases = [
        String::new(),
        l.ws.display().to_string(),
        l.root.display().to_string(),
        l.root.join("outside").display().to_string(),
        l.slot.display().to_string(),
        l.val.display().to_string(),
        "/etc".to_string(),
        format!("{}/./sub", l.ws.display()),
    ];
    let base = bases.choose(rng).unwrap().clone();
    let n = rng.gen_range(1..=5);
    let tail: Vec<&str> = (0..n).map(|_| *SEGMENTS.choose(rng).unwrap()).collect();
    let tail = tail.join("/");
    if base.is_empty() {
        tail
    } else {
        format!("{base}/{tail}")
    }
}

/// Fuzz the guard with generated requests and check that no allowed target
/// lands outside the workspace. Returns (allowed, denied).
pub fn sandbox_fuzz(requests: usize, seed: u64) -> (usize, usize) {
    let l = sandbox_layout();
    let ws_phys = fs::canonicalize(&l.ws).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut allowed, mut denied) = (0, 0);
    for i in 0..requests {
        let n = rng.gen_range(1..=3);
        let targets: Vec<String> = (0..n).map(|_| random_path(&mut rng, &l)).collect();
        let refs: Vec<&str> = targets.iter().map(String::as_str).collect();
        let v = evaluate(&l.policy, &ToolCallRequest::new("Read", &refs));
        if !v.is_allow() {
            denied += 1;
            continue;
        }
        allowed += 1;
        for t in &targets {
            assert!(
                !t.split('/').any(|s| s == ".."),
                "request {i}: traversal allowed: {t}"
            );
            let abs = if t.starts_with('/') {
                PathBuf::from(t)
            } else {
                l.ws.join(t)
            };
            let phys = physical(&abs)
                .unwrap_or_else(|| panic!("request {i}: unresolvable target allowed: {t}"));
            assert!(
                phys.starts_with(&ws_phys),
                "request {i}: {t} resolves to {}",
                phys.display()
            );
        }
    }
    (allowed, denied)
}

/// Named fixtures with the exact reason each must be denied with.
pub fn tripwire_fixtures() -> Vec<(String, Reason, Reason)> {
    let l = sandbox_layout();
    let cases: Vec<(String, Reason)> = vec![
        ("../outside/secret".into(), Reason::TripwireTraversal),
        (
            format!("{}/../outside/secret", l.ws.display()),
            Reason::TripwireTraversal,
        ),
        ("sub/../../val".into(), Reason::TripwireTraversal),
        ("slotlink/SKILL.md".into(), Reason::TripwireSlot),
        ("slotlink".into(), Reason::TripwireSlot),
        (
            format!("{}/SKILL.md", l.slot.display()),
            Reason::TripwireSlot,
        ),
        (l.val.display().to_string(), Reason::TripwireSlot),
        ("vallink/data.csv".into(), Reason::TripwireSlot),
        ("/etc/passwd".into(), Reason::OutsideWorkspace),
        ("esc/secret".into(), Reason::OutsideWorkspace),
        ("c1/secret".into(), Reason::OutsideWorkspace),
        ("dangle".into(), Reason::OutsideWorkspace),
        ("loop1/x".into(), Reason::OutsideWorkspace),
        ("file.txt".into(), Reason::Ok),
        ("d1/deep/data.csv".into(), Reason::Ok),
        ("dangle_in".into(), Reason::Ok),
    ];
    cases
        .into_iter()
        .map(|(p, want)| {
            let got = evaluate(&l.policy, &ToolCallRequest::new("Read", &[p.as_str()])).reason;
            (p, want, got)
        })
        .collect()
}

use skillsmith_core::metrics::{
    avg_at_v, categorize, efficiency_delta, round1, win_tie_loss_report, Category, Counters,
    EfficiencyDelta, TaskResult, Thresholds, CURATED,
};

/// Per-task rows for an 83-task comparison: 24 tasks where
/// the evolved skill beats the curated one, 38 ties, 21 losses.
pub fn win_tie_loss_fixture() -> Vec<TaskResult> {
    let row = |task: String, condition: &str, score: f64| TaskResult {
        task_id: task,
        condition: condition.into(),
        domain: None,
        binary: true,
        score,
        rewards: (0..5)
            .map(|i| if i < (score * 5.0).round() as usize { 1.0 } else { 0.0 })
            .collect(),
        cost_usd: 0.0,
        counters: Counters::default(),
    };
    let mut out = Vec::new();
    for (n, (count, evolved, curated)) in [(24, 0.8, 0.4), (38, 0.6, 0.6), (21, 0.2, 0.6)]
        .into_iter()
        .enumerate()
    {
        for i in 0..count {
            let task = format!("task-{n}-{i}");
            out.push(row(task.clone(), "evolver_r2", evolved));
            out.push(row(task, CURATED, curated));
        }
    }
    out
}

fn counters(tokens_k: f64, turns: f64, duration_s: f64) -> Counters {
    Counters {
        tokens: tokens_k * 1000.0,
        turns,
        duration_s,
    }
}

/// Reference scoring arithmetic, each computed value rounded to one decimal
/// before comparison with the reference figure.
pub fn scoring_arithmetic() {
    assert_eq!(avg_at_v(&[1.0, 1.0, 1.0, 1.0, 0.0], 1.0), 0.8);

    // table entries are themselves rounded, so recomputed deltas land within 0.1 of the reference ones
    let close = |d: EfficiencyDelta, want: [f64; 3]| {
        let got = d.rounded();
        for (g, w) in [got.tokens_pct, got.turns_pct, got.duration_pct]
            .into_iter()
            .zip(want)
        {
            assert!((g - w).abs() <= 0.1 + 1e-9, "{got:?} vs {want:?}");
        }
    };
    close(
        efficiency_delta(&counters(423.9, 12.5, 201.0), &counters(341.9, 10.6, 153.0)).unwrap(),
        [-19.4, -15.3, -23.8],
    );
    close(
        efficiency_delta(&counters(299.3, 10.1, 213.0), &counters(281.4, 9.2, 198.0)).unwrap(),
        [-6.0, -8.9, -6.9],
    );

    let w = win_tie_loss_report(&win_tie_loss_fixture(), "evolver_r2", CURATED, 1e-9).unwrap();
    assert_eq!((w.wins, w.ties, w.losses), (24, 38, 21));
    assert_eq!(round1(w.at_least_rate() * 100.0), 74.7);
    let pct = |n: usize| round1(n as f64 / w.total() as f64 * 100.0);
    assert_eq!(
        (pct(w.wins), pct(w.ties), pct(w.losses)),
        (28.9, 45.8, 25.3)
    );

    let t = Thresholds::default();
    for (base, curated, want) in [
        (0.94, 0.89, Category::A),
        (0.24, 0.64, Category::B1),
        (0.40, 0.40, Category::B2),
        (0.40, 0.14, Category::B3),
        (0.00, 0.65, Category::C1),
        (0.00, 0.23, Category::C2),
        (0.00, 0.00, Category::D),
    ] {
        assert_eq!(categorize(base, curated, &t), want, "({base}, {curated})");
    }
}

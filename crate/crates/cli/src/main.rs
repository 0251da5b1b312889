use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use skillsmith_core::audit::{AuditInput, Auditor, TrainingManifestIndex};
use skillsmith_core::contrast::{
    HeuristicReasoner, Reasoner, ScriptedReasoner, SubprocessReasoner,
};
use skillsmith_core::control::{run_control, ControlConfig};
use skillsmith_core::evolver::{
    run_evolution, validate, LoopConfig, RunDir, RunManifest, RunOptions,
};
use skillsmith_core::guard::{serve_hook, PathPolicy};
use skillsmith_core::metrics::{self, RunStore, TaskResult, Thresholds};
use skillsmith_core::runner::{
    AgentBackend, ScriptedBackend, ScriptedFixture, SubprocessBackend, TraceStore, TrialPhase,
};
use skillsmith_core::skill::{parse_skill, Patch};
use skillsmith_core::task::{load_task, RewardKind, TaskKind, TaskSpec};

/// Author, audit and refine agent skills from contrastive trial traces.
#[derive(Parser, Debug)]
#[command(author, version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Engines {
    /// Agent backend: scripted:<fixture.json> or subprocess:<config.toml>
    #[arg(long)]
    backend: String,

    /// Reasoner: heuristic, scripted:<responses.json> or subprocess:<program>
    #[arg(long, default_value = "heuristic")]
    reasoner: String,

    /// Run store that receives the run directory and its results row
    #[arg(long, default_value = "run-store")]
    store: PathBuf,

    /// Run name inside the store; defaults to <task>-<condition>
    #[arg(long)]
    name: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the contrastive evolution loop on one task
    Evolve {
        task: PathBuf,
        #[command(flatten)]
        engines: Engines,
        /// Parallel exploration trials per iteration
        #[arg(short = 'k', long, default_value_t = 4)]
        k: usize,
        /// Maximum iterations
        #[arg(short = 'r', long, default_value_t = 2)]
        r: u32,
        /// Validation trials
        #[arg(short = 'v', long, default_value_t = 5)]
        v: usize,
        /// Patch applied to the chosen version before validation
        #[arg(long)]
        merge_patch: Option<PathBuf>,
    },
    /// Run the comparison pipeline with A/B rounds and role barriers
    Control {
        task: PathBuf,
        #[command(flatten)]
        engines: Engines,
        /// Improvement rounds
        #[arg(short = 'j', long, default_value_t = 2)]
        j: u32,
        /// Validation trials
        #[arg(short = 'v', long, default_value_t = 5)]
        v: usize,
    },
    /// Audit a skill directory; exits 0 clean, 2 important only, 3 critical
    Audit {
        skill: PathBuf,
        /// Trace store whose exploration trials feed the trace checks
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Task manifest supplying the instruction and training index
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long, default_value = "heuristic")]
        reasoner: String,
    },
    /// Validate a fixed skill directory, or `none` for the no-skill baseline
    Validate {
        skill: String,
        task: PathBuf,
        #[command(flatten)]
        engines: Engines,
        /// Condition recorded in the results table
        #[arg(long)]
        condition: Option<String>,
        #[arg(short = 'v', long, default_value_t = 5)]
        v: usize,
    },
    /// Summarize a run store as tab-separated tables
    Report {
        store: PathBuf,
        /// Mean score per taxonomy bucket (the default view)
        #[arg(long, group = "view")]
        by_category: bool,
        #[arg(long, group = "view")]
        efficiency: bool,
        #[arg(long, group = "view")]
        win_tie_loss: bool,
        /// Condition compared against the baseline
        #[arg(long, default_value = "evolver_r2")]
        condition: String,
        /// Baseline condition
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Serve the pre-tool hook protocol on stdin/stdout
    Guard {
        /// Policy file written for the trial; defaults to $EVOLVER_GUARD_POLICY
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

fn backend(spec: &str) -> Result<Box<dyn AgentBackend>> {
    match spec.split_once(':') {
        Some(("scripted", path)) => Ok(Box::new(ScriptedBackend::new(ScriptedFixture::load(
            Path::new(path),
        )?))),
        Some(("subprocess", path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            Ok(Box::new(SubprocessBackend::new(
                toml::from_str(&text).with_context(|| format!("parsing {path}"))?,
            )))
        }
        _ => bail!("unknown backend {spec:?}; expected scripted:<fixture> or subprocess:<config>"),
    }
}

fn reasoner(spec: &str) -> Result<Box<dyn Reasoner>> {
    match spec.split_once(':') {
        None if spec == "heuristic" => Ok(Box::new(HeuristicReasoner)),
        Some(("scripted", path)) => Ok(Box::new(ScriptedReasoner::load(Path::new(path))?)),
        Some(("subprocess", cmd)) => {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| anyhow!("empty reasoner command"))?;
            Ok(Box::new(SubprocessReasoner {
                program: program.into(),
                args: parts.map(String::from).collect(),
            }))
        }
        _ => bail!(
            "unknown reasoner {spec:?}; expected heuristic, scripted:<file> or subprocess:<cmd>"
        ),
    }
}

struct Target {
    store: RunStore,
    run_dir: PathBuf,
    condition: String,
}

fn target(engines: &Engines, task: &TaskSpec, condition: String) -> Result<Target> {
    let store = RunStore::open(&engines.store)?;
    let name = engines
        .name
        .clone()
        .unwrap_or_else(|| format!("{}-{condition}", task.id));
    Ok(Target {
        run_dir: store.run_dir(&name),
        store,
        condition,
    })
}

fn record(t: &Target) -> Result<TaskResult> {
    let result = TaskResult::from_run(&t.run_dir, &t.condition)?;
    t.store.append(&result)?;
    println!(
        "{}\t{}\tscore={:.3}\trun={}",
        result.task_id,
        result.condition,
        result.score,
        t.run_dir.display()
    );
    Ok(result)
}

fn evolve(
    task: &Path,
    engines: &Engines,
    k: usize,
    r: u32,
    v: usize,
    merge: Option<&Path>,
) -> Result<()> {
    let task = load_task(task)?;
    let mut cfg = LoopConfig::new(k, r, v)?;
    cfg.budget = task.budget;
    let cfg = cfg.from_env()?;
    let options = RunOptions {
        merge_patch: merge
            .map(|p| -> Result<Patch> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) })
            .transpose()?,
    };
    let t = target(engines, &task, metrics::evolver_condition(cfg.r_max))?;
    let backend = backend(&engines.backend)?;
    let reasoner = reasoner(&engines.reasoner)?;
    run_evolution(
        &task,
        &cfg,
        backend.as_ref(),
        reasoner.as_ref(),
        &t.run_dir,
        &options,
    )?;
    record(&t)?;
    Ok(())
}

fn control(task: &Path, engines: &Engines, j: u32, v: usize) -> Result<()> {
    let task = load_task(task)?;
    let mut cfg = ControlConfig::new(j, v)?;
    cfg.budget = task.budget;
    let cfg = cfg.from_env()?;
    let t = target(engines, &task, metrics::CONTROL.to_string())?;
    let backend = backend(&engines.backend)?;
    let reasoner = reasoner(&engines.reasoner)?;
    run_control(&task, &cfg, backend.as_ref(), reasoner.as_ref(), &t.run_dir)?;
    record(&t)?;
    Ok(())
}

fn validate_fixed(
    skill: &str,
    task: &Path,
    engines: &Engines,
    condition: Option<String>,
    v: usize,
) -> Result<()> {
    let task = load_task(task)?;
    let skill = match skill {
        "none" => None,
        dir => Some(parse_skill(Path::new(dir))?),
    };
    let default = if skill.is_some() {
        metrics::CURATED
    } else {
        metrics::NO_SKILL
    };
    let t = target(
        engines,
        &task,
        condition.unwrap_or_else(|| default.to_string()),
    )?;
    let backend = backend(&engines.backend)?;
    let run = RunDir::create(&t.run_dir)?;
    let mut manifest = RunManifest::new(
        "validate",
        &task,
        serde_json::json!({ "v": v, "budget": task.budget }),
    );
    manifest.stamp("validate");
    let result = validate(
        &Arc::new(task.clone()),
        skill.as_ref(),
        v,
        task.budget,
        backend.as_ref(),
        &run,
        0,
    )?;
    manifest.harness_invocations = result.trial_ids.len();
    manifest.validation = Some(result);
    manifest.stamp("done");
    run.write_manifest(&manifest)?;
    record(&t)?;
    Ok(())
}

fn audit(
    skill: &Path,
    traces: Option<&Path>,
    task: Option<&Path>,
    reasoner_spec: &str,
) -> Result<ExitCode> {
    let candidate = parse_skill(skill)?;
    let outcomes = match traces {
        Some(dir) => TraceStore::open(dir)?
            .load_all()?
            .into_iter()
            .filter(|o| o.phase == TrialPhase::Exploration)
            .collect(),
        None => Vec::new(),
    };
    let input = match task {
        Some(path) => {
            let task = load_task(path)?;
            let index = TrainingManifestIndex::build(
                &task.train_env,
                task.curated_training_skill_slot.as_deref(),
            )?;
            AuditInput::for_task(&task, candidate, index, outcomes, Vec::new())
        }
        None => AuditInput {
            candidate,
            instruction: String::new(),
            task_kind: TaskKind::Open,
            reward_kind: RewardKind::Binary,
            no_skill_baseline_mean: None,
            index: TrainingManifestIndex::default(),
            outcomes,
            parametric_values: Vec::new(),
        },
    };
    let report = Auditor::standard().audit(&input, reasoner(reasoner_spec)?.as_ref());
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::from(report.exit_code() as u8))
}

fn report(
    store: &Path,
    efficiency: bool,
    win_tie_loss: bool,
    condition: &str,
    baseline: Option<String>,
) -> Result<()> {
    let results = RunStore::open(store)?.load()?;
    let out = if efficiency {
        let base = baseline.unwrap_or_else(|| metrics::NO_SKILL.into());
        metrics::render_efficiency(&metrics::efficiency_report(&results, &base, condition)?)
    } else if win_tie_loss {
        let base = baseline.unwrap_or_else(|| metrics::CURATED.into());
        let w = metrics::win_tie_loss_report(&results, condition, &base, 1e-9)?;
        metrics::render_win_tie_loss(condition, &base, &w)
    } else {
        metrics::render_categories(&metrics::by_category(&results, &Thresholds::default())?)
    };
    print!("{out}");
    Ok(())
}

fn guard(policy: Option<PathBuf>) -> Result<()> {
    let path = match policy {
        Some(p) => p,
        None => std::env::var_os("EVOLVER_GUARD_POLICY")
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .ok_or_else(|| anyhow!("no --policy and EVOLVER_GUARD_POLICY is unset"))?,
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let policy: PathPolicy =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    serve_hook(&policy, io::stdin().lock(), io::stdout().lock())?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Evolve {
            task,
            engines,
            k,
            r,
            v,
            merge_patch,
        } => evolve(&task, &engines, k, r, v, merge_patch.as_deref())?,
        Command::Control {
            task,
            engines,
            j,
            v,
        } => control(&task, &engines, j, v)?,
        Command::Audit {
            skill,
            traces,
            task,
            reasoner,
        } => return audit(&skill, traces.as_deref(), task.as_deref(), &reasoner),
        Command::Validate {
            skill,
            task,
            engines,
            condition,
            v,
        } => validate_fixed(&skill, &task, &engines, condition, v)?,
        Command::Report {
            store,
            efficiency,
            win_tie_loss,
            condition,
            baseline,
            ..
        } => report(&store, efficiency, win_tie_loss, &condition, baseline)?,
        Command::Guard { policy } => guard(policy)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use stranglerkit_core::dbsplit::verify_isolation;
use stranglerkit_core::model::{validate_trace, ModelError};
use stranglerkit_core::simulator::{execute_trace_with, run_migration_with, seed_log, SimConfig};
use stranglerkit_core::{
    build_context_graph_with, coupling_scores, generate_plan, infer_contexts, load_model, load_trace,
    serialize_model, validate, ChangeRecord, Faults, InferOptions, MigrationPlan, MigrationStep, Migrator, PlanError,
    PlanOptions, StepKind, SystemModel, WorkloadTrace, Weighting,
};

use crate::{client, serve, Cli, Command, DbCommand, GatewayCommand, Status, UsageError};

pub fn run(cli: Cli) -> Result<Status> {
    let out = Out { json: cli.json };
    let seed = cli.seed;
    match cli.command {
        Command::Analyze { model, unweighted, infer } => analyze(&out, &model, unweighted, infer, seed),
        Command::Validate { model, trace } => validate_cmd(&out, &model, trace.as_deref()),
        Command::Plan {
            model,
            target,
            schedule,
            output,
        } => plan(&out, &model, &target, schedule, output.as_deref()),
        Command::Apply {
            model,
            plan,
            step,
            state,
            changelog,
            output,
        } => {
            let state = state.unwrap_or_else(|| default_state_path(&model));
            apply(&out, &model, &plan, &step, &state, changelog.as_deref(), output.as_deref(), seed)
        }
        Command::Rollback { state, step, output } => rollback(&out, &state, step, output.as_deref()),
        Command::Simulate {
            model,
            trace,
            plan,
            stale_cutover,
            replicas,
        } => simulate(&out, &model, &trace, plan.as_deref(), stale_cutover, replicas, seed),
        Command::Db { command } => match command {
            DbCommand::SyncStatus { model } => sync_status(&out, &model),
            DbCommand::Cutover {
                model,
                context,
                changelog,
                output,
            } => db_cutover(&out, &model, &context, changelog.as_deref(), output.as_deref(), seed),
            DbCommand::Verify { model } => db_verify(&out, &model),
        },
        Command::Gateway {
            command: GatewayCommand::Serve(args),
        } => serve::gateway(args),
        Command::Registry { command } => client::run(&out, command),
        Command::StubUpstream { listen, name } => serve::stub(listen, name),
    }
}

/// Stdout writer honouring `--json`.
pub struct Out {
    pub json: bool,
}

impl Out {
    pub fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
        } else {
            let text = human();
            if !text.is_empty() {
                println!("{}", text.trim_end());
            }
        }
    }
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn model_error(path: &Path, e: ModelError) -> anyhow::Error {
    match e {
        ModelError::Parse(p) => usage(format!("{}: {p}", path.display())),
        ModelError::Validation(report) => {
            let lines: Vec<String> = report.violations.iter().map(|v| v.message.clone()).collect();
            anyhow::anyhow!("{}: invalid model: {}", path.display(), lines.join("; "))
        }
    }
}

pub(crate) fn read_model(path: &Path) -> Result<SystemModel> {
    load_model(&read(path)?).map_err(|e| model_error(path, e))
}

fn read_trace(path: &Path, model: &SystemModel) -> Result<WorkloadTrace> {
    load_trace(&read(path)?, model).map_err(|e| model_error(path, e))
}

fn read_plan(path: &Path) -> Result<MigrationPlan> {
    serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_changelog(path: &Path) -> Result<Vec<ChangeRecord>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn source_log(model: &SystemModel, changelog: Option<&Path>, seed: u64) -> Result<Vec<ChangeRecord>> {
    match changelog {
        Some(p) => read_changelog(p),
        None => Ok(seed_log(model, seed, SimConfig::default().rows_per_table)),
    }
}

fn default_state_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

fn analyze(out: &Out, path: &Path, unweighted: bool, infer: bool, seed: u64) -> Result<Status> {
    let model = read_model(path)?;
    let weighting = if unweighted { Weighting::Unweighted } else { Weighting::Weighted };
    let graph = build_context_graph_with(&model, weighting);
    let mut scores = coupling_scores(&graph);
    scores.sort_by(|a, b| a.total.cmp(&b.total).then_with(|| a.context.cmp(&b.context)));
    let ranking: Vec<&str> = scores.iter().map(|s| s.context.as_str()).collect();
    let proposal = infer.then(|| infer_contexts(&model, seed, InferOptions::default()));
    out.emit(
        &json!({ "scores": scores, "ranking": ranking, "proposal": proposal }),
        || {
            let mut s = format!("{:<4} {:<12} {:>6} {:>6} {:>6}\n", "rank", "context", "in", "out", "total");
            for (i, c) in scores.iter().enumerate() {
                s += &format!(
                    "{:<4} {:<12} {:>6} {:>6} {:>6}\n",
                    i + 1,
                    c.context,
                    c.in_degree,
                    c.out_degree,
                    c.total
                );
            }
            if let Some(p) = &proposal {
                s += "\nproposed contexts:\n";
                for (module, label) in &p.labels {
                    s += &format!("  {module} -> {label}\n");
                }
            }
            s
        },
    );
    Ok(Status::Clean)
}

fn validate_cmd(out: &Out, path: &Path, trace: Option<&Path>) -> Result<Status> {
    let text = read(path)?;
    let mut model: SystemModel =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    model.normalize();
    let mut report = validate(&model);
    if let Some(t) = trace {
        let trace: WorkloadTrace =
            serde_json::from_str(&read(t)?).map_err(|e| usage(format!("{}: {e}", t.display())))?;
        report.violations.extend(validate_trace(&model, &trace).violations);
    }
    out.emit(&report, || {
        if report.is_empty() {
            "ok".into()
        } else {
            report
                .violations
                .iter()
                .map(|v| format!("{:?}: {}\n", v.rule, v.message))
                .collect()
        }
    });
    Ok(if report.is_empty() { Status::Clean } else { Status::Findings })
}

fn plan(out: &Out, path: &Path, target: &str, schedule: Vec<u8>, output: Option<&Path>) -> Result<Status> {
    let model = read_model(path)?;
    let plan = generate_plan(&model, target, &PlanOptions { schedule })?;
    if let Some(o) = output {
        write(o, &serde_json::to_string_pretty(&plan)?)?;
    }
    out.emit(&plan, || plan.steps.iter().map(|s| format!("{s}\n")).collect());
    Ok(Status::Clean)
}

fn load_state(path: &Path) -> Result<Migrator> {
    serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn save_state(path: &Path, m: &Migrator) -> Result<()> {
    write(path, &serde_json::to_string(m)?)
}

#[allow(clippy::too_many_arguments)]
fn apply(
    out: &Out,
    model: &Path,
    plan: &Path,
    ids: &[u32],
    state: &Path,
    changelog: Option<&Path>,
    output: Option<&Path>,
    seed: u64,
) -> Result<Status> {
    let plan = read_plan(plan)?;
    let mut migrator = if state.exists() {
        load_state(state)?
    } else {
        let m = read_model(model)?;
        let log = source_log(&m, changelog, seed)?;
        Migrator::new(m, log)
    };
    let mut applied: Vec<MigrationStep> = Vec::new();
    let mut failure = None;
    for id in ids {
        let result = plan
            .step(*id)
            .cloned()
            .ok_or_else(|| PlanError::UnknownStep(format!("#{id}")))
            .and_then(|step| migrator.apply(&step).map(|_| step));
        match result {
            Ok(step) => applied.push(step),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    save_state(state, &migrator)?;
    if let Some(o) = output {
        write(o, &serialize_model(&migrator.model))?;
    }
    out.emit(
        &json!({
            "applied": applied,
            "journal": migrator.journal.applied(),
            "error": failure.as_ref().map(|e| e.to_string()),
        }),
        || {
            let mut s: String = applied.iter().map(|st| format!("applied {st}\n")).collect();
            s += &format!("{} step(s) in journal {}\n", migrator.journal.entries.len(), state.display());
            s
        },
    );
    match failure {
        None => Ok(Status::Clean),
        Some(e) => {
            eprintln!("error: {e}");
            Ok(Status::Findings)
        }
    }
}

fn rollback(out: &Out, state: &Path, id: Option<u32>, output: Option<&Path>) -> Result<Status> {
    let mut migrator = load_state(state)?;
    let last = migrator.journal.last().cloned().ok_or(PlanError::NothingToRollback)?;
    if let Some(id) = id {
        if last.id != id {
            return Err(PlanError::NotLastApplied(format!("#{id}")).into());
        }
    }
    migrator.rollback(&last)?;
    save_state(state, &migrator)?;
    if let Some(o) = output {
        write(o, &serialize_model(&migrator.model))?;
    }
    out.emit(&json!({ "rolled_back": last, "journal": migrator.journal.applied() }), || {
        format!("rolled back {last}")
    });
    Ok(Status::Clean)
}

fn simulate(
    out: &Out,
    model: &Path,
    trace: &Path,
    plan: Option<&Path>,
    stale_cutover: bool,
    replicas: usize,
    seed: u64,
) -> Result<Status> {
    if replicas == 0 {
        return Err(usage("--replicas must be at least 1".into()));
    }
    let model = read_model(model)?;
    let trace = read_trace(trace, &model)?;
    let config = SimConfig {
        replicas,
        ..SimConfig::default()
    };
    let Some(plan) = plan else {
        let report = execute_trace_with(&model, &trace, seed, &config)?;
        out.emit(&report, || {
            let m = &report.metrics;
            format!(
                "{} responses; local {} api {} db {} glue {}",
                report.responses.len(),
                m.local_calls,
                m.api_calls,
                m.db_calls,
                m.glue_calls
            )
        });
        return Ok(Status::Clean);
    };
    let plan = read_plan(plan)?;
    let run = run_migration_with(&model, &plan, &trace, seed, &config, Faults { stale_cutover })?;
    let r = &run.report;
    out.emit(r, || {
        let b = &r.baseline;
        let mut s = format!(
            "baseline: local {} api {} db {} glue {}\n",
            b.local_calls, b.api_calls, b.db_calls, b.glue_calls
        );
        for st in &r.steps {
            let m = &st.metrics;
            s += &format!(
                "#{:<3} {:<40} {:<9} local {} api {} db {} glue {}{}\n",
                st.step_id,
                st.step,
                if st.verdict.is_equal() { "equal" } else { "DIVERGED" },
                m.local_calls,
                m.api_calls,
                m.db_calls,
                m.glue_calls,
                if st.rolled_back { " (rolled back)" } else { "" }
            );
        }
        s += &format!(
            "{}; {} isolation violation(s)\n",
            if r.completed { "completed" } else { "stopped" },
            r.isolation.len()
        );
        s
    });
    Ok(if r.completed { Status::Clean } else { Status::Findings })
}

fn sync_status(out: &Out, path: &Path) -> Result<Status> {
    let model = read_model(path)?;
    let rows: Vec<_> = model
        .databases
        .iter()
        .filter_map(|db| db.sync.as_ref().map(|s| json!({ "database": db.id, "sync": s })))
        .collect();
    out.emit(&rows, || {
        if rows.is_empty() {
            return "no replicas".into();
        }
        model
            .databases
            .iter()
            .filter_map(|db| {
                db.sync.as_ref().map(|s| {
                    format!(
                        "{} <- {}: {:?} at seq {}\n",
                        db.id, s.source_db, s.mode, s.applied_seq
                    )
                })
            })
            .collect()
    });
    Ok(Status::Clean)
}

fn db_cutover(
    out: &Out,
    path: &Path,
    context: &str,
    changelog: Option<&Path>,
    output: Option<&Path>,
    seed: u64,
) -> Result<Status> {
    let model = read_model(path)?;
    let log = source_log(&model, changelog, seed)?;
    let step = MigrationStep {
        id: 0,
        kind: StepKind::Cutover {
            context: context.to_string(),
        },
    };
    let next = Migrator::new(model, log).preview(&step)?;
    let violations = verify_isolation(&next);
    match output {
        Some(o) => {
            write(o, &serialize_model(&next))?;
            out.emit(&json!({ "isolation": violations }), || {
                format!("cut over {context}; {} isolation violation(s)", violations.len())
            });
        }
        None => out.emit(&next, || serialize_model(&next)),
    }
    Ok(Status::Clean)
}

fn db_verify(out: &Out, path: &Path) -> Result<Status> {
    let model = read_model(path)?;
    let violations = verify_isolation(&model);
    out.emit(&violations, || {
        if violations.is_empty() {
            "isolated".into()
        } else {
            violations.iter().map(|v| format!("{v:?}\n")).collect()
        }
    });
    Ok(if violations.is_empty() { Status::Clean } else { Status::Findings })
}

//! Strangler-fig migration plans: generation, application and rollback.
//!
//! A plan for one context always has the shape
//!
//! ```text
//! FreezeMonolith, SplitFrontend, ExtractService, AddGlueCode,
//! AddGatewayRoute*, [MirrorTables, StartSync, Cutover], ShiftTraffic*, RemoveGlue
//! ```
//!
//! The bracketed database steps are present only when the context touches
//! at least one table. `apply_step` is a pure function; the [`Journal`]
//! records before-images so the last step can be undone exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::dbsplit::{self, ChangeRecord, DbSplitError, RowStore};
use crate::model::{
    extracted_service_id, validate, Adapter, AdapterKind, CallEdge, CallKind, FreezeBaseline, GlueMapping, Layer,
    RouteEntry, Service, ServiceRole, SyncMode, SystemModel, ValidationReport,
};

pub const FRONTEND_SERVICE: &str = "frontend";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum StepKind {
    FreezeMonolith {},
    SplitFrontend {},
    ExtractService { context: String },
    AddGlueCode { context: String },
    AddGatewayRoute { path: String, context: String },
    MirrorTables { context: String },
    StartSync { context: String },
    Cutover { context: String },
    ShiftTraffic { path: String, percent: u8 },
    RemoveGlue { context: String },
}

impl StepKind {
    /// Position in the canonical ordering. Steps of a plan never decrease.
    pub fn rank(&self) -> u8 {
        match self {
            StepKind::FreezeMonolith {} => 0,
            StepKind::SplitFrontend {} => 1,
            StepKind::ExtractService { .. } => 2,
            StepKind::AddGlueCode { .. } => 3,
            StepKind::AddGatewayRoute { .. } => 4,
            StepKind::MirrorTables { .. } => 5,
            StepKind::StartSync { .. } => 6,
            StepKind::Cutover { .. } => 7,
            StepKind::ShiftTraffic { .. } => 8,
            StepKind::RemoveGlue { .. } => 9,
        }
    }

    pub fn context(&self) -> Option<&str> {
        match self {
            StepKind::ExtractService { context }
            | StepKind::AddGlueCode { context }
            | StepKind::AddGatewayRoute { context, .. }
            | StepKind::MirrorTables { context }
            | StepKind::StartSync { context }
            | StepKind::Cutover { context }
            | StepKind::RemoveGlue { context } => Some(context),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StepKind::FreezeMonolith {} => "FreezeMonolith",
            StepKind::SplitFrontend {} => "SplitFrontend",
            StepKind::ExtractService { .. } => "ExtractService",
            StepKind::AddGlueCode { .. } => "AddGlueCode",
            StepKind::AddGatewayRoute { .. } => "AddGatewayRoute",
            StepKind::MirrorTables { .. } => "MirrorTables",
            StepKind::StartSync { .. } => "StartSync",
            StepKind::Cutover { .. } => "Cutover",
            StepKind::ShiftTraffic { .. } => "ShiftTraffic",
            StepKind::RemoveGlue { .. } => "RemoveGlue",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepKind::FreezeMonolith {} | StepKind::SplitFrontend {} => write!(f, "{}", self.name()),
            StepKind::ExtractService { context }
            | StepKind::AddGlueCode { context }
            | StepKind::MirrorTables { context }
            | StepKind::StartSync { context }
            | StepKind::Cutover { context }
            | StepKind::RemoveGlue { context } => write!(f, "{}({context})", self.name()),
            StepKind::AddGatewayRoute { path, context } => write!(f, "{}({path}, {context})", self.name()),
            StepKind::ShiftTraffic { path, percent } => write!(f, "{}({path}, {percent})", self.name()),
        }
    }
}

/// One plan entry; serialized as `{"id": .., "kind": .., "params": {..}}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MigrationStep {
    pub id: u32,
    #[serde(flatten)]
    pub kind: StepKind,
}

impl fmt::Display for MigrationStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} {}", self.id, self.kind)
    }
}

/// Plan files are a bare JSON array of steps; the target is read back from
/// the first step that names a context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<MigrationStep>", from = "Vec<MigrationStep>")]
pub struct MigrationPlan {
    pub target: String,
    pub steps: Vec<MigrationStep>,
}

impl From<Vec<MigrationStep>> for MigrationPlan {
    fn from(steps: Vec<MigrationStep>) -> Self {
        let target = steps
            .iter()
            .find_map(|s| s.kind.context())
            .unwrap_or_default()
            .to_string();
        MigrationPlan { target, steps }
    }
}

impl From<MigrationPlan> for Vec<MigrationStep> {
    fn from(plan: MigrationPlan) -> Self {
        plan.steps
    }
}

impl MigrationPlan {
    pub fn step(&self, id: u32) -> Option<&MigrationStep> {
        self.steps.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("unknown context {0}")]
    UnknownContext(String),
    #[error("context {0} already has its own service")]
    AlreadyExtracted(String),
    #[error("precondition failed: {0}")]
    PreconditionFailed(String),
    #[error("unknown step {0}")]
    UnknownStep(String),
    #[error("step {0} is not the most recently applied step")]
    NotLastApplied(String),
    #[error("nothing to roll back")]
    NothingToRollback,
    #[error("step {step} breaks the plan ordering: {reason}")]
    OutOfOrder { step: String, reason: String },
    #[error("model is invalid: {0}")]
    InvalidModel(ValidationReport),
    #[error(transparent)]
    DbSplit(#[from] DbSplitError),
}

pub type Result<T> = std::result::Result<T, PlanError>;

fn precondition(msg: impl Into<String>) -> PlanError {
    PlanError::PreconditionFailed(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanOptions {
    /// Traffic-shift percentages, strictly increasing and ending at 100.
    pub schedule: Vec<u8>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            schedule: vec![10, 50, 100],
        }
    }
}

/// Segment-wise longest common prefix of absolute paths.
fn common_prefix<'a>(paths: impl IntoIterator<Item = &'a str>) -> String {
    let mut iter = paths.into_iter();
    let Some(first) = iter.next() else {
        return "/".into();
    };
    let mut prefix: Vec<&str> = first.split('/').filter(|s| !s.is_empty()).collect();
    for p in iter {
        let segs: Vec<&str> = p.split('/').filter(|s| !s.is_empty()).collect();
        let n = prefix.iter().zip(&segs).take_while(|(a, b)| a == b).count();
        prefix.truncate(n);
    }
    format!("/{}", prefix.join("/"))
}

/// Gateway prefixes covering a context's endpoints. One shared prefix when
/// the endpoints have one, otherwise one route per endpoint.
pub fn route_prefixes(model: &SystemModel, context: &str) -> Vec<String> {
    let paths: Vec<&str> = model
        .endpoints
        .iter()
        .filter(|e| model.module(&e.module).is_some_and(|m| m.context == context))
        .map(|e| e.path.as_str())
        .collect();
    if paths.is_empty() {
        return Vec::new();
    }
    let prefix = common_prefix(paths.iter().copied());
    if prefix == "/" {
        let set: BTreeSet<&str> = paths.into_iter().collect();
        set.into_iter().map(str::to_string).collect()
    } else {
        vec![prefix]
    }
}

/// Build the migration plan extracting `target` from the monolith.
pub fn generate_plan(model: &SystemModel, target: &str, options: &PlanOptions) -> Result<MigrationPlan> {
    let report = validate(model);
    if !report.is_empty() {
        return Err(PlanError::InvalidModel(report));
    }
    let monolith = model.monolith().ok_or_else(|| precondition("model has no monolith"))?;
    if model.service(&extracted_service_id(target)).is_some() {
        return Err(PlanError::AlreadyExtracted(target.to_string()));
    }
    let in_monolith = monolith
        .modules
        .iter()
        .any(|m| model.module(m).is_some_and(|n| n.context == target));
    if !in_monolith {
        return Err(PlanError::UnknownContext(target.to_string()));
    }
    let schedule = &options.schedule;
    if schedule.last() != Some(&100) || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(precondition("shift schedule must increase strictly and end at 100"));
    }

    let ctx = target.to_string();
    let routes = route_prefixes(model, target);
    let related = dbsplit::related_tables(model, target)?;

    let mut kinds = vec![
        StepKind::FreezeMonolith {},
        StepKind::SplitFrontend {},
        StepKind::ExtractService { context: ctx.clone() },
        StepKind::AddGlueCode { context: ctx.clone() },
    ];
    for path in &routes {
        kinds.push(StepKind::AddGatewayRoute {
            path: path.clone(),
            context: ctx.clone(),
        });
    }
    if !related.is_empty() {
        kinds.push(StepKind::MirrorTables { context: ctx.clone() });
        kinds.push(StepKind::StartSync { context: ctx.clone() });
        kinds.push(StepKind::Cutover { context: ctx.clone() });
    }
    for &percent in schedule {
        for path in &routes {
            kinds.push(StepKind::ShiftTraffic {
                path: path.clone(),
                percent,
            });
        }
    }
    kinds.push(StepKind::RemoveGlue { context: ctx.clone() });

    Ok(MigrationPlan {
        target: ctx,
        steps: kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| MigrationStep { id: i as u32 + 1, kind })
            .collect(),
    })
}

/// Ordering problems of a step sequence. Empty for a valid plan prefix.
pub fn ordering_violations(steps: &[MigrationStep]) -> Vec<String> {
    let mut out = Vec::new();
    let mut last_percent: BTreeMap<&str, u8> = BTreeMap::new();
    let mut cutovers: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, pair) in steps.windows(2).enumerate() {
        if pair[1].kind.rank() < pair[0].kind.rank() {
            out.push(format!("{} after {} (position {})", pair[1].kind, pair[0].kind, i + 2));
        }
    }
    for s in steps {
        match &s.kind {
            StepKind::ShiftTraffic { path, percent } => {
                if *percent > 100 {
                    out.push(format!("{} exceeds 100", s.kind));
                }
                if let Some(prev) = last_percent.insert(path, *percent) {
                    if *percent < prev {
                        out.push(format!("{} lowers the shift from {prev}", s.kind));
                    }
                }
            }
            StepKind::Cutover { context } => *cutovers.entry(context).or_default() += 1,
            _ => {}
        }
    }
    for (ctx, n) in cutovers {
        if n > 1 {
            out.push(format!("{n} cutovers for {ctx}"));
        }
    }
    out
}

/// Ordering problems of a complete plan: the prefix rules plus the
/// completion rules (StartSync before Cutover, every shifted route reaching
/// 100 before RemoveGlue).
pub fn check_plan(plan: &MigrationPlan) -> Vec<String> {
    let mut out = ordering_violations(&plan.steps);
    let pos = |pred: &dyn Fn(&StepKind) -> bool| plan.steps.iter().position(|s| pred(&s.kind));
    let sync = pos(&|k| matches!(k, StepKind::StartSync { .. }));
    let cut = pos(&|k| matches!(k, StepKind::Cutover { .. }));
    match (sync, cut) {
        (Some(a), Some(b)) if a > b => out.push("StartSync after Cutover".into()),
        (Some(_), None) => out.push("StartSync without Cutover".into()),
        (None, Some(_)) => out.push("Cutover without StartSync".into()),
        _ => {}
    }
    let mut final_percent: BTreeMap<&str, u8> = BTreeMap::new();
    for s in &plan.steps {
        if let StepKind::ShiftTraffic { path, percent } = &s.kind {
            final_percent.insert(path, *percent);
        }
    }
    for (path, p) in final_percent {
        if p != 100 {
            out.push(format!("route {path} ends at {p}"));
        }
    }
    let ids: BTreeSet<u32> = plan.steps.iter().map(|s| s.id).collect();
    if ids.len() != plan.steps.len() {
        out.push("duplicate step ids".into());
    }
    out
}

fn require_frozen(model: &SystemModel) -> Result<&Service> {
    let mono = model.monolith().ok_or_else(|| precondition("model has no monolith"))?;
    if !mono.frozen {
        return Err(precondition("FreezeMonolith has not been applied"));
    }
    Ok(mono)
}

fn require_service<'a>(model: &'a SystemModel, context: &str) -> Result<&'a Service> {
    let id = extracted_service_id(context);
    model
        .service(&id)
        .ok_or_else(|| precondition(format!("ExtractService({context}) has not been applied")))
}

fn freeze(model: &SystemModel) -> Result<SystemModel> {
    let mono = model.monolith().ok_or_else(|| precondition("model has no monolith"))?;
    if mono.frozen {
        return Ok(model.clone());
    }
    let members: BTreeSet<&str> = mono.modules.iter().map(String::as_str).collect();
    let baseline = FreezeBaseline {
        service: mono.id.clone(),
        modules: mono.modules.clone(),
        edges: model
            .edges
            .iter()
            .filter(|e| e.is_business() && members.contains(e.from.as_str()) && members.contains(e.to.as_str()))
            .map(|e| (e.from.clone(), e.to.clone()))
            .collect(),
    };
    let mono_id = mono.id.clone();
    let mut next = model.clone();
    next.service_mut(&mono_id).expect("exists").frozen = true;
    next.freeze_baseline = Some(baseline);
    Ok(next)
}

fn split_frontend(model: &SystemModel) -> Result<SystemModel> {
    let mono = require_frozen(model)?;
    let ui: Vec<String> = mono
        .modules
        .iter()
        .filter(|m| model.module(m).is_some_and(|n| n.layer == Layer::UserInterface))
        .cloned()
        .collect();
    if ui.is_empty() {
        return Ok(model.clone());
    }
    let mono_id = mono.id.clone();
    let mut next = model.clone();
    next.service_mut(&mono_id)
        .expect("exists")
        .modules
        .retain(|m| !ui.contains(m));
    match next.service_mut(FRONTEND_SERVICE) {
        Some(fe) if fe.role == ServiceRole::Frontend => fe.modules.extend(ui),
        Some(_) => return Err(precondition(format!("service id {FRONTEND_SERVICE} is taken"))),
        None => next.services.push(Service {
            id: FRONTEND_SERVICE.into(),
            modules: ui,
            database: None,
            role: ServiceRole::Frontend,
            frozen: false,
        }),
    }
    next.recompute_edge_kinds();
    next.normalize();
    Ok(next)
}

fn extract_service(model: &SystemModel, context: &str) -> Result<SystemModel> {
    let mono = require_frozen(model)?;
    let svc_id = extracted_service_id(context);
    if model.service(&svc_id).is_some() {
        return Err(PlanError::AlreadyExtracted(context.to_string()));
    }
    let moving: Vec<String> = mono
        .modules
        .iter()
        .filter(|m| model.module(m).is_some_and(|n| n.context == context))
        .cloned()
        .collect();
    if moving.is_empty() {
        return Err(PlanError::UnknownContext(context.to_string()));
    }
    let mono_id = mono.id.clone();
    let mut next = model.clone();
    next.service_mut(&mono_id)
        .expect("exists")
        .modules
        .retain(|m| !moving.contains(m));
    next.services.push(Service {
        id: svc_id,
        modules: moving,
        database: None,
        role: ServiceRole::Service,
        frozen: false,
    });
    next.recompute_edge_kinds();
    next.normalize();
    Ok(next)
}

fn add_glue(model: &SystemModel, context: &str) -> Result<SystemModel> {
    let svc = require_service(model, context)?;
    if model.glue.iter().any(|g| g.context == context) {
        return Err(precondition(format!("glue for {context} is already in place")));
    }
    let mono = model.monolith().ok_or_else(|| precondition("model has no monolith"))?;
    let owned = dbsplit::owned_tables(model, context)?;
    let mut next = model.clone();
    let mut glued: BTreeSet<String> = BTreeSet::new();
    for da in &model.data_access {
        if !svc.modules.contains(&da.module) || owned.contains(&da.table) {
            continue;
        }
        let Some(anchor) = model
            .data_access
            .iter()
            .find(|o| o.table == da.table && mono.modules.contains(&o.module))
        else {
            continue;
        };
        for (from, to, kind) in [
            (&da.module, &anchor.module, AdapterKind::Glue),
            (&anchor.module, &da.module, AdapterKind::GlueReply),
        ] {
            next.edges.push(CallEdge {
                from: from.clone(),
                to: to.clone(),
                kind: CallKind::Api,
                weight: 1,
                adapter: Some(Adapter {
                    kind,
                    table: da.table.clone(),
                }),
            });
        }
        if glued.insert(da.table.clone()) {
            let table = model.table(&da.table).expect("validated");
            next.glue.push(GlueMapping {
                context: context.to_string(),
                table: table.name.clone(),
                fields: table
                    .columns
                    .iter()
                    .map(|c| (c.clone(), format!("{}_{c}", table.name)))
                    .collect(),
            });
        }
    }
    next.recompute_edge_kinds();
    next.normalize();
    Ok(next)
}

fn add_route(model: &SystemModel, path: &str, context: &str) -> Result<SystemModel> {
    let svc = require_service(model, context)?;
    let mono = model.monolith().ok_or_else(|| precondition("model has no monolith"))?;
    if !path.starts_with('/') {
        return Err(precondition(format!("route prefix {path} must start with '/'")));
    }
    let mut next = model.clone();
    match next.routes.iter_mut().find(|r| r.path_prefix == path) {
        Some(r) if r.extracted_target.is_some() => {
            return Err(precondition(format!("route {path} already has an extracted target")))
        }
        Some(r) => r.extracted_target = Some(svc.id.clone()),
        None => next.routes.push(RouteEntry {
            path_prefix: path.to_string(),
            legacy_target: mono.id.clone(),
            extracted_target: Some(svc.id.clone()),
            shift_percent: 0,
        }),
    }
    next.normalize();
    Ok(next)
}

fn mirror(model: &SystemModel, context: &str) -> Result<SystemModel> {
    require_service(model, context)?;
    let hoisted = dbsplit::hoist_constraints(model, context)?;
    Ok(dbsplit::mirror_schema(&hoisted, context)?)
}

fn shift(model: &SystemModel, path: &str, percent: u8) -> Result<SystemModel> {
    if percent > 100 {
        return Err(precondition(format!("shift {percent} is above 100")));
    }
    let mut next = model.clone();
    let route = next
        .routes
        .iter_mut()
        .find(|r| r.path_prefix == path)
        .ok_or_else(|| precondition(format!("no route {path}")))?;
    if percent > 0 && route.extracted_target.is_none() {
        return Err(precondition(format!("route {path} has no extracted target")));
    }
    route.shift_percent = percent;
    Ok(next)
}

fn remove_glue(model: &SystemModel, context: &str) -> Result<SystemModel> {
    let svc = require_service(model, context)?;
    if let Some(db) = svc.database.as_deref().and_then(|d| model.database(d)) {
        if db.sync.as_ref().is_some_and(|s| s.mode != SyncMode::Cutover) {
            return Err(precondition(format!("Cutover({context}) has not been applied")));
        }
    }
    if let Some(r) = model
        .routes
        .iter()
        .find(|r| r.extracted_target.as_deref() == Some(svc.id.as_str()) && r.shift_percent < 100)
    {
        return Err(precondition(format!(
            "route {} is at {}%, not 100%",
            r.path_prefix, r.shift_percent
        )));
    }
    let members: BTreeSet<&str> = svc.modules.iter().map(String::as_str).collect();
    let mut next = model.clone();
    next.edges.retain(|e| {
        let glue = matches!(
            e.adapter.as_ref().map(|a| a.kind),
            Some(AdapterKind::Glue | AdapterKind::GlueReply)
        );
        !(glue && (members.contains(e.from.as_str()) || members.contains(e.to.as_str())))
    });
    next.glue.retain(|g| g.context != context);
    Ok(next)
}

/// Apply one step to a model, returning the new model. The input is never
/// modified. Cutover requires the replica to have converged already; see
/// [`Migrator`] for the driver that drains the change log first.
pub fn apply_step(model: &SystemModel, step: &MigrationStep) -> Result<SystemModel> {
    let next = match &step.kind {
        StepKind::FreezeMonolith {} => freeze(model)?,
        StepKind::SplitFrontend {} => split_frontend(model)?,
        StepKind::ExtractService { context } => extract_service(model, context)?,
        StepKind::AddGlueCode { context } => add_glue(model, context)?,
        StepKind::AddGatewayRoute { path, context } => add_route(model, path, context)?,
        StepKind::MirrorTables { context } => mirror(model, context)?,
        StepKind::StartSync { context } => dbsplit::start_sync(model, context)?,
        StepKind::Cutover { context } => dbsplit::cutover(model, context)?,
        StepKind::ShiftTraffic { path, percent } => shift(model, path, *percent)?,
        StepKind::RemoveGlue { context } => remove_glue(model, context)?,
    };
    let report = validate(&next);
    if !report.is_empty() {
        return Err(PlanError::InvalidModel(report));
    }
    Ok(next)
}

/// Before-image of the top-level model sections a step changed. Absent
/// sections are recorded as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Undo {
    pub sections: BTreeMap<String, Option<Value>>,
}

fn sections(model: &SystemModel) -> Map<String, Value> {
    match serde_json::to_value(model).expect("model serializes") {
        Value::Object(map) => map,
        _ => unreachable!("model serializes to an object"),
    }
}

impl Undo {
    pub fn diff(before: &SystemModel, after: &SystemModel) -> Undo {
        let (b, a) = (sections(before), sections(after));
        let keys: BTreeSet<&String> = b.keys().chain(a.keys()).collect();
        Undo {
            sections: keys
                .into_iter()
                .filter(|k| b.get(*k) != a.get(*k))
                .map(|k| (k.clone(), b.get(k).cloned()))
                .collect(),
        }
    }

    pub fn restore(&self, model: &SystemModel) -> SystemModel {
        let mut map = sections(model);
        for (k, v) in &self.sections {
            match v {
                Some(v) => map.insert(k.clone(), v.clone()),
                None => map.remove(k),
            };
        }
        serde_json::from_value(Value::Object(map)).expect("before-image deserializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub step: MigrationStep,
    pub undo: Undo,
}

/// Applied steps in order, each with the data needed to undo it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Journal {
    pub entries: Vec<JournalEntry>,
}

impl Journal {
    pub fn applied(&self) -> Vec<MigrationStep> {
        self.entries.iter().map(|e| e.step.clone()).collect()
    }

    pub fn last(&self) -> Option<&MigrationStep> {
        self.entries.last().map(|e| &e.step)
    }

    /// Reject a step that would make the applied sequence leave the plan
    /// ordering.
    pub fn admit(&self, step: &MigrationStep) -> Result<()> {
        let mut seq = self.applied();
        seq.push(step.clone());
        match ordering_violations(&seq).into_iter().next() {
            None => Ok(()),
            Some(reason) => Err(PlanError::OutOfOrder {
                step: step.to_string(),
                reason,
            }),
        }
    }

    pub fn record(&mut self, step: MigrationStep, before: &SystemModel, after: &SystemModel) {
        self.entries.push(JournalEntry {
            step,
            undo: Undo::diff(before, after),
        });
    }

    /// Undo `step` on `model`. Only the most recently applied step may be
    /// rolled back.
    pub fn rollback(&mut self, model: &SystemModel, step: &MigrationStep) -> Result<SystemModel> {
        let last = self.entries.last().ok_or(PlanError::NothingToRollback)?;
        if last.step != *step {
            return Err(PlanError::NotLastApplied(step.to_string()));
        }
        let restored = last.undo.restore(model);
        self.entries.pop();
        Ok(restored)
    }
}

/// Fault switches for exercising the rollback path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Faults {
    /// Cut over without draining the change log, leaving the replica stale.
    pub stale_cutover: bool,
}

/// Stateful driver: a model, its journal, and the source change log that
/// feeds replicas at cutover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Migrator {
    pub model: SystemModel,
    pub journal: Journal,
    #[serde(default)]
    pub source_log: Vec<ChangeRecord>,
    #[serde(default)]
    pub faults: Faults,
}

impl Migrator {
    pub fn new(model: SystemModel, source_log: Vec<ChangeRecord>) -> Self {
        Migrator {
            model,
            journal: Journal::default(),
            source_log,
            faults: Faults::default(),
        }
    }

    pub fn with_faults(mut self, faults: Faults) -> Self {
        self.faults = faults;
        self
    }

    /// Compute the model after `step` without recording it.
    pub fn preview(&self, step: &MigrationStep) -> Result<SystemModel> {
        match &step.kind {
            StepKind::Cutover { context } => self.cutover(context),
            _ => apply_step(&self.model, step),
        }
    }

    fn cutover(&self, context: &str) -> Result<SystemModel> {
        let state = dbsplit::sync_state(&self.model, context)?;
        let next = if self.faults.stale_cutover {
            dbsplit::cutover_unguarded(&self.model, context)?
        } else {
            let synced = if state.mode == SyncMode::Syncing {
                let db = self.model.database(&state.target_db).expect("replica exists");
                let store = RowStore::with_tables(db.tables.iter().cloned());
                let (_, converged) = dbsplit::sync_until_quiescent(&self.source_log, store, state)?;
                dbsplit::record_sync(&self.model, &converged)?
            } else {
                self.model.clone()
            };
            dbsplit::cutover(&synced, context)?
        };
        let report = validate(&next);
        if !report.is_empty() {
            return Err(PlanError::InvalidModel(report));
        }
        Ok(next)
    }

    pub fn apply(&mut self, step: &MigrationStep) -> Result<&SystemModel> {
        self.journal.admit(step)?;
        let next = self.preview(step)?;
        self.journal.record(step.clone(), &self.model, &next);
        self.model = next;
        Ok(&self.model)
    }

    pub fn rollback(&mut self, step: &MigrationStep) -> Result<&SystemModel> {
        self.model = self.journal.rollback(&self.model, step)?;
        Ok(&self.model)
    }

    /// Roll back the most recent step, whatever it was.
    pub fn rollback_last(&mut self) -> Result<MigrationStep> {
        let step = self.journal.last().cloned().ok_or(PlanError::NothingToRollback)?;
        self.rollback(&step)?;
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn common_prefix_is_segment_wise() {
        assert_eq!(common_prefix(["/a/orders", "/a/items"]), "/a");
        assert_eq!(common_prefix(["/ab/x", "/a/x"]), "/");
        assert_eq!(common_prefix(["/a/orders"]), "/a/orders");
    }

    #[test]
    fn step_wire_format() {
        let s = MigrationStep {
            id: 9,
            kind: StepKind::ShiftTraffic {
                path: "/a".into(),
                percent: 50,
            },
        };
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"id": 9, "kind": "ShiftTraffic", "params": {"path": "/a", "percent": 50}})
        );
        assert_eq!(serde_json::from_value::<MigrationStep>(v).unwrap(), s);
        let f: MigrationStep =
            serde_json::from_str(r#"{"id": 1, "kind": "FreezeMonolith", "params": {}}"#).unwrap();
        assert_eq!(f.kind, StepKind::FreezeMonolith {});
        assert!(serde_json::from_str::<MigrationStep>(r#"{"id": 1, "kind": "Teleport", "params": {}}"#).is_err());
    }

    #[test]
    fn ordering_catches_reversed_pairs() {
        let steps = vec![
            MigrationStep {
                id: 1,
                kind: StepKind::Cutover { context: "A".into() },
            },
            MigrationStep {
                id: 2,
                kind: StepKind::StartSync { context: "A".into() },
            },
        ];
        assert_eq!(ordering_violations(&steps).len(), 1);
    }

    #[test]
    fn rollback_needs_history() {
        let mut j = Journal::default();
        let step = MigrationStep {
            id: 1,
            kind: StepKind::FreezeMonolith {},
        };
        assert_eq!(
            j.rollback(&SystemModel::default(), &step),
            Err(PlanError::NothingToRollback)
        );
    }
}

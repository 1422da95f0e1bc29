//! Declarative model of an application under migration.
//!
//! A [`SystemModel`] describes services, the modules they contain, the call
//! edges between modules, databases and their tables, and how requests reach
//! modules. The model is immutable once loaded; the planner and the database
//! splitter produce new models instead of editing one in place.
//!
//! Every collection is kept in a canonical sorted order (see
//! [`SystemModel::normalize`]) so two models describing the same system
//! compare equal with `==`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layer {
    UserInterface,
    BusinessLogic,
    DataAccess,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleNode {
    pub id: String,
    pub layer: Layer,
    /// Bounded-context label supplied by the modeler.
    pub context: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallKind {
    Local,
    Api,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    /// Extracted service to monolith data access, through the anti-corruption layer.
    Glue,
    /// Reply leg of a glue pair.
    GlueReply,
    /// Data request routed through the API of the service that owns the table.
    Proxy,
}

/// Marks an edge as migration infrastructure rather than a business call.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adapter {
    pub kind: AdapterKind,
    pub table: String,
}

fn default_weight() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallEdge {
    pub from: String,
    pub to: String,
    pub kind: CallKind,
    #[serde(default = "default_weight")]
    pub weight: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<Adapter>,
}

impl CallEdge {
    pub fn business(from: &str, to: &str, weight: u32) -> Self {
        CallEdge {
            from: from.to_string(),
            to: to.to_string(),
            kind: CallKind::Local,
            weight,
            adapter: None,
        }
    }

    pub fn is_business(&self) -> bool {
        self.adapter.is_none()
    }

    fn sort_key(&self) -> (&str, &str, Option<&Adapter>) {
        (&self.from, &self.to, self.adapter.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub primary_key: String,
    pub owner_db: String,
    /// Context that manages the life cycle of rows in a shared table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lifecycle_owner: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Enforcement {
    DatabaseLayer,
    BusinessLogicLayer,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub enforcement: Enforcement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessMode {
    ReadWrite,
    ReadOnlyReplica,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncMode {
    Mirrored,
    Syncing,
    Converged,
    Cutover,
}

impl SyncMode {
    /// Mode transitions only move one position forward.
    pub fn can_advance_to(self, next: SyncMode) -> bool {
        matches!(
            (self, next),
            (SyncMode::Mirrored, SyncMode::Syncing)
                | (SyncMode::Syncing, SyncMode::Converged)
                | (SyncMode::Converged, SyncMode::Cutover)
        )
    }
}

/// Replication progress of a replica database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncState {
    pub source_db: String,
    pub target_db: String,
    pub applied_seq: u64,
    pub mode: SyncMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Database {
    pub id: String,
    pub tables: Vec<String>,
    pub access: BTreeMap<String, AccessMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync: Option<SyncState>,
}

impl Database {
    /// A database is settled when it is not (or no longer) a replica in flight.
    pub fn is_settled(&self) -> bool {
        self.sync.as_ref().is_none_or(|s| s.mode == SyncMode::Cutover)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceRole {
    Monolith,
    Frontend,
    #[default]
    Service,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Service {
    pub id: String,
    pub modules: Vec<String>,
    #[serde(default)]
    pub database: Option<String>,
    #[serde(default)]
    pub role: ServiceRole,
    #[serde(default, skip_serializing_if = "is_false")]
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataAccess {
    pub module: String,
    pub table: String,
}

impl DataAccess {
    pub fn new(module: &str, table: &str) -> Self {
        DataAccess {
            module: module.to_string(),
            table: table.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub path: String,
    pub module: String,
}

/// Gateway mapping from a path prefix to the legacy and extracted targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteEntry {
    pub path_prefix: String,
    pub legacy_target: String,
    #[serde(default)]
    pub extracted_target: Option<String>,
    #[serde(default)]
    pub shift_percent: u8,
}

/// Field mapping kept by the anti-corruption layer for one table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlueMapping {
    pub context: String,
    pub table: String,
    /// Source column to service-facing name.
    pub fields: BTreeMap<String, String>,
}

/// Monolith contents at the moment it was frozen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeBaseline {
    pub service: String,
    pub modules: Vec<String>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemModel {
    pub services: Vec<Service>,
    pub databases: Vec<Database>,
    pub tables: Vec<Table>,
    pub modules: Vec<ModuleNode>,
    pub edges: Vec<CallEdge>,
    pub foreign_keys: Vec<ForeignKey>,
    pub data_access: Vec<DataAccess>,
    pub endpoints: Vec<Endpoint>,
    pub routes: Vec<RouteEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub glue: Vec<GlueMapping>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_baseline: Option<FreezeBaseline>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Read,
    Write,
}

/// One request of a workload trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRequest {
    pub seq: u64,
    pub endpoint: String,
    /// Routing key used for traffic shifting.
    pub key: String,
    pub op: Op,
    pub table: String,
    pub row_key: String,
}

/// Ordered requests replayed against a model. Serialized as a JSON array.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkloadTrace {
    pub requests: Vec<TraceRequest>,
}

/// Id of the service a context is extracted into.
pub fn extracted_service_id(context: &str) -> String {
    format!("svc-{}", context.to_lowercase())
}

/// Id of the database created for an extracted service.
pub fn replica_db_id(service: &str) -> String {
    format!("{service}-db")
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed model document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid model: {0}")]
    Validation(ValidationReport),
}

/// Parse, normalize and validate a model document.
pub fn load_model(text: &str) -> Result<SystemModel, ModelError> {
    let mut model: SystemModel = serde_json::from_str(text)?;
    model.normalize();
    let report = validate(&model);
    if report.is_empty() {
        Ok(model)
    } else {
        Err(ModelError::Validation(report))
    }
}

pub fn serialize_model(model: &SystemModel) -> String {
    serde_json::to_string_pretty(model).expect("model serialization is infallible")
}

/// Parse a trace and check it against the model it will run on.
pub fn load_trace(text: &str, model: &SystemModel) -> Result<WorkloadTrace, ModelError> {
    let trace: WorkloadTrace = serde_json::from_str(text)?;
    let report = validate_trace(model, &trace);
    if report.is_empty() {
        Ok(trace)
    } else {
        Err(ModelError::Validation(report))
    }
}

pub fn validate_trace(model: &SystemModel, trace: &WorkloadTrace) -> ValidationReport {
    let mut r = ValidationReport::default();
    for pair in trace.requests.windows(2) {
        if pair[1].seq <= pair[0].seq {
            let (a, b) = (pair[0].seq.to_string(), pair[1].seq.to_string());
            r.push(Rule::TraceOrder, &[&a, &b], "seq does not increase");
        }
    }
    for req in &trace.requests {
        if !model.endpoints.iter().any(|e| e.path == req.endpoint) {
            r.push(Rule::UnboundEndpoint, &[&req.endpoint], "no endpoint binding");
        }
        if model.table(&req.table).is_none() {
            r.push(Rule::UnknownReference, &[&req.table], "trace names an unknown table");
        }
    }
    r
}

impl SystemModel {
    /// Sort every collection into canonical order.
    pub fn normalize(&mut self) {
        for s in &mut self.services {
            s.modules.sort();
        }
        self.services.sort_by(|a, b| a.id.cmp(&b.id));
        for d in &mut self.databases {
            d.tables.sort();
        }
        self.databases.sort_by(|a, b| a.id.cmp(&b.id));
        self.tables.sort_by(|a, b| a.name.cmp(&b.name));
        self.modules.sort();
        self.edges.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        self.foreign_keys.sort();
        self.data_access.sort();
        self.endpoints.sort_by(|a, b| a.path.cmp(&b.path));
        self.routes.sort_by(|a, b| a.path_prefix.cmp(&b.path_prefix));
        self.glue
            .sort_by(|a, b| (&a.context, &a.table).cmp(&(&b.context, &b.table)));
        if let Some(b) = &mut self.freeze_baseline {
            b.modules.sort();
            b.edges.sort();
        }
    }

    pub fn service(&self, id: &str) -> Option<&Service> {
        self.services.iter().find(|s| s.id == id)
    }

    pub fn service_mut(&mut self, id: &str) -> Option<&mut Service> {
        self.services.iter_mut().find(|s| s.id == id)
    }

    pub fn database(&self, id: &str) -> Option<&Database> {
        self.databases.iter().find(|d| d.id == id)
    }

    pub fn database_mut(&mut self, id: &str) -> Option<&mut Database> {
        self.databases.iter_mut().find(|d| d.id == id)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn module(&self, id: &str) -> Option<&ModuleNode> {
        self.modules.iter().find(|m| m.id == id)
    }

    pub fn monolith(&self) -> Option<&Service> {
        self.services.iter().find(|s| s.role == ServiceRole::Monolith)
    }

    /// Service containing the module, if any.
    pub fn service_of(&self, module: &str) -> Option<&Service> {
        self.services
            .iter()
            .find(|s| s.modules.iter().any(|m| m == module))
    }

    /// Service owning the database, if any.
    pub fn owner_of_db(&self, db: &str) -> Option<&Service> {
        self.services
            .iter()
            .find(|s| s.database.as_deref() == Some(db))
    }

    /// Distinct bounded-context labels in sorted order.
    pub fn contexts(&self) -> BTreeSet<String> {
        self.modules.iter().map(|m| m.context.clone()).collect()
    }

    pub fn modules_in_context<'a>(&'a self, context: &'a str) -> impl Iterator<Item = &'a ModuleNode> {
        self.modules.iter().filter(move |m| m.context == context)
    }

    /// Modules that read or write `table`, either directly or through a proxy edge.
    pub fn accessors(&self, table: &str) -> BTreeSet<&str> {
        let direct = self
            .data_access
            .iter()
            .filter(|da| da.table == table)
            .map(|da| da.module.as_str());
        let proxied = self.edges.iter().filter_map(|e| match &e.adapter {
            Some(a) if a.kind == AdapterKind::Proxy && a.table == table => Some(e.from.as_str()),
            _ => None,
        });
        direct.chain(proxied).collect()
    }

    /// Contexts whose modules access `table`.
    pub fn accessor_contexts(&self, table: &str) -> BTreeSet<String> {
        self.accessors(table)
            .into_iter()
            .filter_map(|m| self.module(m).map(|n| n.context.clone()))
            .collect()
    }

    /// Derive every edge kind from service membership: api iff the endpoints
    /// live in different services.
    pub fn recompute_edge_kinds(&mut self) {
        let membership: BTreeMap<&str, &str> = self
            .services
            .iter()
            .flat_map(|s| s.modules.iter().map(move |m| (m.as_str(), s.id.as_str())))
            .collect();
        let kinds: Vec<CallKind> = self
            .edges
            .iter()
            .map(|e| {
                if membership.get(e.from.as_str()) == membership.get(e.to.as_str()) {
                    CallKind::Local
                } else {
                    CallKind::Api
                }
            })
            .collect();
        for (edge, kind) in self.edges.iter_mut().zip(kinds) {
            edge.kind = kind;
        }
    }
}

/// Name of an invariant a model can violate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    DuplicateId,
    UnknownReference,
    ModuleUnassigned,
    ModuleInTwoServices,
    MultipleMonoliths,
    DatabaseOwnership,
    TableOwnership,
    TableListing,
    TableColumns,
    EdgeSelfLoop,
    EdgeWeight,
    EdgeKind,
    ForeignKeyColumn,
    EndpointPath,
    RoutePercent,
    RouteTarget,
    SharedTableOwner,
    SyncState,
    FrozenMonolith,
    Isolation,
    TraceOrder,
    UnboundEndpoint,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::DuplicateId => "duplicate id",
            Rule::UnknownReference => "unknown reference",
            Rule::ModuleUnassigned => "module in no service",
            Rule::ModuleInTwoServices => "module in two services",
            Rule::MultipleMonoliths => "more than one monolith",
            Rule::DatabaseOwnership => "database must belong to exactly one service",
            Rule::TableOwnership => "table must belong to exactly one database",
            Rule::TableListing => "table listed by a database that neither owns nor replicates it",
            Rule::TableColumns => "bad table columns",
            Rule::EdgeSelfLoop => "call edge is a self loop",
            Rule::EdgeWeight => "call edge weight must be positive",
            Rule::EdgeKind => "call edge kind disagrees with service membership",
            Rule::ForeignKeyColumn => "foreign key column missing",
            Rule::EndpointPath => "bad endpoint path",
            Rule::RoutePercent => "route shift percent out of range",
            Rule::RouteTarget => "bad route target",
            Rule::SharedTableOwner => "shared table needs a lifecycle owner",
            Rule::SyncState => "inconsistent sync state",
            Rule::FrozenMonolith => "frozen monolith was modified",
            Rule::Isolation => "isolation violation",
            Rule::TraceOrder => "trace seq must strictly increase",
            Rule::UnboundEndpoint => "endpoint is not bound to a module",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub ids: Vec<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, rule: Rule, ids: &[&str], message: impl Into<String>) {
        self.violations.push(Violation {
            rule,
            ids: ids.iter().map(|s| s.to_string()).collect(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{} [{}]: {}", v.rule, v.ids.join(", "), v.message)?;
        }
        Ok(())
    }
}

fn duplicates<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            dups.insert(id);
        }
    }
    dups.into_iter().collect()
}

/// Check every model invariant. Returns an empty report for a valid model.
pub fn validate(model: &SystemModel) -> ValidationReport {
    let mut r = ValidationReport::default();

    let id_sets: [(&str, Vec<&str>); 6] = [
        ("service", model.services.iter().map(|s| s.id.as_str()).collect()),
        ("database", model.databases.iter().map(|d| d.id.as_str()).collect()),
        ("table", model.tables.iter().map(|t| t.name.as_str()).collect()),
        ("module", model.modules.iter().map(|m| m.id.as_str()).collect()),
        ("endpoint", model.endpoints.iter().map(|e| e.path.as_str()).collect()),
        ("route", model.routes.iter().map(|e| e.path_prefix.as_str()).collect()),
    ];
    for (what, ids) in &id_sets {
        for dup in duplicates(ids.iter().copied()) {
            r.push(Rule::DuplicateId, &[dup], format!("{what} id appears more than once"));
        }
    }

    let modules: BTreeSet<&str> = model.modules.iter().map(|m| m.id.as_str()).collect();
    let tables: BTreeMap<&str, &Table> = model.tables.iter().map(|t| (t.name.as_str(), t)).collect();
    let dbs: BTreeMap<&str, &Database> = model.databases.iter().map(|d| (d.id.as_str(), d)).collect();
    let services: BTreeSet<&str> = model.services.iter().map(|s| s.id.as_str()).collect();

    // Services and membership.
    let mut membership: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in &model.services {
        for m in &s.modules {
            if !modules.contains(m.as_str()) {
                r.push(Rule::UnknownReference, &[&s.id, m], "service lists an unknown module");
            }
            membership.entry(m.as_str()).or_default().push(s.id.as_str());
        }
        if let Some(db) = &s.database {
            if !dbs.contains_key(db.as_str()) {
                r.push(Rule::UnknownReference, &[&s.id, db], "service owns an unknown database");
            }
        }
    }
    for m in &model.modules {
        match membership.get(m.id.as_str()).map(Vec::len).unwrap_or(0) {
            0 => r.push(Rule::ModuleUnassigned, &[&m.id], "module belongs to no service"),
            1 => {}
            _ => {
                let mut ids = vec![m.id.as_str()];
                ids.extend(membership[m.id.as_str()].iter().copied());
                r.push(Rule::ModuleInTwoServices, &ids, "module in two services");
            }
        }
    }
    let monoliths: Vec<&str> = model
        .services
        .iter()
        .filter(|s| s.role == ServiceRole::Monolith)
        .map(|s| s.id.as_str())
        .collect();
    if monoliths.len() > 1 {
        r.push(Rule::MultipleMonoliths, &monoliths, "only one service may be the monolith");
    }
    for d in &model.databases {
        let owners: Vec<&str> = model
            .services
            .iter()
            .filter(|s| s.database.as_deref() == Some(d.id.as_str()))
            .map(|s| s.id.as_str())
            .collect();
        if owners.len() != 1 {
            let mut ids = vec![d.id.as_str()];
            ids.extend(owners);
            r.push(Rule::DatabaseOwnership, &ids, "database must belong to exactly one service");
        }
    }

    // Tables and databases.
    for t in &model.tables {
        for dup in duplicates(t.columns.iter().map(String::as_str)) {
            r.push(Rule::TableColumns, &[&t.name, dup], "duplicate column");
        }
        if !t.columns.contains(&t.primary_key) {
            r.push(Rule::TableColumns, &[&t.name, &t.primary_key], "primary key is not a column");
        }
        match dbs.get(t.owner_db.as_str()) {
            None => r.push(Rule::TableOwnership, &[&t.name, &t.owner_db], "owner database unknown"),
            Some(d) => {
                if !d.tables.contains(&t.name) {
                    r.push(Rule::TableOwnership, &[&t.name, &d.id], "owner database does not list the table");
                } else if d.access.get(&t.name) != Some(&AccessMode::ReadWrite) {
                    r.push(Rule::TableOwnership, &[&t.name, &d.id], "owned table must be read-write");
                }
            }
        }
    }
    for d in &model.databases {
        let listed: BTreeSet<&str> = d.tables.iter().map(String::as_str).collect();
        let moded: BTreeSet<&str> = d.access.keys().map(String::as_str).collect();
        if listed != moded {
            r.push(Rule::TableListing, &[&d.id], "access modes must cover exactly the listed tables");
        }
        for dup in duplicates(d.tables.iter().map(String::as_str)) {
            r.push(Rule::DuplicateId, &[&d.id, dup], "table listed twice");
        }
        for name in &d.tables {
            let Some(t) = tables.get(name.as_str()) else {
                r.push(Rule::UnknownReference, &[&d.id, name], "database lists an unknown table");
                continue;
            };
            if t.owner_db == d.id {
                continue;
            }
            let replicates = d
                .sync
                .as_ref()
                .is_some_and(|s| s.source_db == t.owner_db && s.mode != SyncMode::Cutover);
            if !replicates || d.access.get(name) != Some(&AccessMode::ReadOnlyReplica) {
                r.push(Rule::TableListing, &[&d.id, name], "table listed by a database that neither owns nor replicates it");
            }
        }
        if let Some(s) = &d.sync {
            if s.target_db != d.id || !dbs.contains_key(s.source_db.as_str()) || s.source_db == d.id {
                r.push(Rule::SyncState, &[&d.id], "sync state must target this database from another known database");
            }
        }
    }

    // Edges.
    let mut edge_keys = BTreeSet::new();
    for e in &model.edges {
        for end in [&e.from, &e.to] {
            if !modules.contains(end.as_str()) {
                r.push(Rule::UnknownReference, &[&e.from, &e.to], format!("edge endpoint {end} unknown"));
            }
        }
        if e.from == e.to {
            r.push(Rule::EdgeSelfLoop, &[&e.from], "call edge from a module to itself");
        }
        if e.weight == 0 {
            r.push(Rule::EdgeWeight, &[&e.from, &e.to], "weight must be at least 1");
        }
        if !edge_keys.insert(e.sort_key()) {
            r.push(Rule::DuplicateId, &[&e.from, &e.to], "duplicate call edge");
        }
        let sf = membership.get(e.from.as_str()).and_then(|v| v.first());
        let st = membership.get(e.to.as_str()).and_then(|v| v.first());
        if let (Some(sf), Some(st)) = (sf, st) {
            let expected = if sf == st { CallKind::Local } else { CallKind::Api };
            if e.kind != expected {
                r.push(Rule::EdgeKind, &[&e.from, &e.to], format!("expected {expected:?} call between {sf} and {st}"));
            }
        }
        if let Some(a) = &e.adapter {
            if !tables.contains_key(a.table.as_str()) {
                r.push(Rule::UnknownReference, &[&e.from, &e.to, &a.table], "adapter edge names an unknown table");
            }
        }
    }

    // Foreign keys.
    for fk in &model.foreign_keys {
        match (tables.get(fk.from_table.as_str()), tables.get(fk.to_table.as_str())) {
            (Some(from), Some(_)) => {
                if !from.columns.contains(&fk.from_column) {
                    r.push(Rule::ForeignKeyColumn, &[&fk.from_table, &fk.from_column], "referencing column does not exist");
                }
            }
            _ => r.push(Rule::UnknownReference, &[&fk.from_table, &fk.to_table], "foreign key references an unknown table"),
        }
    }

    for da in &model.data_access {
        if !modules.contains(da.module.as_str()) || !tables.contains_key(da.table.as_str()) {
            r.push(Rule::UnknownReference, &[&da.module, &da.table], "data access references an unknown module or table");
        }
    }
    let mut seen_access = BTreeSet::new();
    for da in &model.data_access {
        if !seen_access.insert(da) {
            r.push(Rule::DuplicateId, &[&da.module, &da.table], "duplicate data access pair");
        }
    }

    for ep in &model.endpoints {
        if !ep.path.starts_with('/') {
            r.push(Rule::EndpointPath, &[&ep.path], "endpoint path must start with '/'");
        }
        if !modules.contains(ep.module.as_str()) {
            r.push(Rule::UnknownReference, &[&ep.path, &ep.module], "endpoint bound to an unknown module");
        }
    }

    for route in &model.routes {
        if !route.path_prefix.starts_with('/') {
            r.push(Rule::EndpointPath, &[&route.path_prefix], "route prefix must start with '/'");
        }
        if route.shift_percent > 100 {
            r.push(Rule::RoutePercent, &[&route.path_prefix], format!("{} is above 100", route.shift_percent));
        }
        if !services.contains(route.legacy_target.as_str()) {
            r.push(Rule::RouteTarget, &[&route.path_prefix, &route.legacy_target], "legacy target is not a service");
        }
        match &route.extracted_target {
            Some(t) if !services.contains(t.as_str()) => {
                r.push(Rule::RouteTarget, &[&route.path_prefix, t], "extracted target is not a service")
            }
            None if route.shift_percent > 0 => {
                r.push(Rule::RouteTarget, &[&route.path_prefix], "positive shift requires an extracted target")
            }
            _ => {}
        }
    }

    // Shared tables need exactly one lifecycle owner among their accessors.
    for t in &model.tables {
        let contexts = model.accessor_contexts(&t.name);
        match &t.lifecycle_owner {
            None if contexts.len() > 1 => {
                r.push(Rule::SharedTableOwner, &[&t.name], "table is accessed by several contexts but declares no lifecycle owner")
            }
            Some(owner) if !contexts.is_empty() && !contexts.contains(owner) => {
                r.push(Rule::SharedTableOwner, &[&t.name, owner], "lifecycle owner does not access the table")
            }
            _ => {}
        }
    }

    for g in &model.glue {
        if !tables.contains_key(g.table.as_str()) {
            r.push(Rule::UnknownReference, &[&g.context, &g.table], "glue mapping names an unknown table");
        }
    }

    if let Some(b) = &model.freeze_baseline {
        match model.service(&b.service) {
            Some(s) if s.frozen => {
                let base_modules: BTreeSet<&str> = b.modules.iter().map(String::as_str).collect();
                let base_edges: BTreeSet<(&str, &str)> =
                    b.edges.iter().map(|(a, c)| (a.as_str(), c.as_str())).collect();
                let members: BTreeSet<&str> = s.modules.iter().map(String::as_str).collect();
                for m in &members {
                    if !base_modules.contains(m) {
                        r.push(Rule::FrozenMonolith, &[&s.id, m], "module added to a frozen monolith");
                    }
                }
                for e in model.edges.iter().filter(|e| e.is_business()) {
                    if members.contains(e.from.as_str())
                        && members.contains(e.to.as_str())
                        && !base_edges.contains(&(e.from.as_str(), e.to.as_str()))
                    {
                        r.push(Rule::FrozenMonolith, &[&s.id, &e.from, &e.to], "call edge added to a frozen monolith");
                    }
                }
            }
            _ => r.push(Rule::FrozenMonolith, &[&b.service], "freeze baseline names a service that is not frozen"),
        }
    }

    for v in isolation_breaches(model) {
        r.violations.push(v);
    }

    r
}

/// Isolation rules that hold in every migration phase: a service whose
/// database is settled may only touch tables of that database, and no
/// database-layer constraint may span two databases.
fn isolation_breaches(model: &SystemModel) -> Vec<Violation> {
    let mut out = ValidationReport::default();
    for da in &model.data_access {
        let (Some(svc), Some(table)) = (model.service_of(&da.module), model.table(&da.table)) else {
            continue;
        };
        let Some(db) = svc.database.as_deref().and_then(|d| model.database(d)) else {
            continue;
        };
        if db.is_settled() && table.owner_db != db.id {
            out.push(
                Rule::Isolation,
                &[&da.module, &da.table],
                format!("{} reads {} owned by {}", svc.id, da.table, table.owner_db),
            );
        }
    }
    for fk in &model.foreign_keys {
        if fk.enforcement != Enforcement::DatabaseLayer {
            continue;
        }
        if let (Some(a), Some(b)) = (model.table(&fk.from_table), model.table(&fk.to_table)) {
            if a.owner_db != b.owner_db {
                out.push(
                    Rule::Isolation,
                    &[&fk.from_table, &fk.from_column, &fk.to_table],
                    "database-layer foreign key spans two databases",
                );
            }
        }
    }
    out.violations
}

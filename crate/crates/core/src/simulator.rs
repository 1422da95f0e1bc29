//! Deterministic trace replay against a model.
//!
//! Each request enters at the module its endpoint is bound to and walks the
//! shortest chain of business edges (breadth first, neighbours in id order)
//! to the nearest module that serves the requested table. That module reads
//! or writes the row either directly, through glue code, or through a proxy
//! edge into the owning service. Counters:
//!
//! | event                                              | counters                         |
//! |----------------------------------------------------|----------------------------------|
//! | business edge on the path                          | `local_calls` or `api_calls`     |
//! | direct table access                                | `db_calls`                       |
//! | access over a glue edge                            | `glue_calls`, `db_calls`         |
//! | hop over a proxy edge                              | `api_calls`, `cross_boundary_api_calls` |
//! | write to a table under live replication            | `db_calls`                       |
//! | write checked by a business-layer foreign key      | `db_calls` (+ `api_calls`, `cross_boundary_api_calls` when the keys live in different databases) |
//!
//! The response digest covers only the business path and the row digests,
//! so it is independent of how the data was reached.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dbsplit::{verify_isolation, ChangeOp, ChangeRecord, IsolationViolation, RowStore};
use crate::gateway::{decide, RouteTable};
use crate::hash::DigestBuilder;
use crate::model::{AdapterKind, CallKind, Enforcement, Op, SyncMode, SystemModel, TraceRequest, WorkloadTrace};
use crate::planner::{Faults, MigrationPlan, Migrator, PlanError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Metrics {
    pub local_calls: u64,
    pub api_calls: u64,
    pub db_calls: u64,
    pub cross_boundary_api_calls: u64,
    pub glue_calls: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub local_calls: i64,
    pub api_calls: i64,
    pub db_calls: i64,
    pub cross_boundary_api_calls: i64,
    pub glue_calls: i64,
}

impl Metrics {
    pub fn delta_from(&self, base: &Metrics) -> MetricsDelta {
        let d = |a: u64, b: u64| a as i64 - b as i64;
        MetricsDelta {
            local_calls: d(self.local_calls, base.local_calls),
            api_calls: d(self.api_calls, base.api_calls),
            db_calls: d(self.db_calls, base.db_calls),
            cross_boundary_api_calls: d(self.cross_boundary_api_calls, base.cross_boundary_api_calls),
            glue_calls: d(self.glue_calls, base.glue_calls),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub seq: u64,
    pub module: String,
    pub digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub responses: Vec<ResponseRecord>,
    pub metrics: Metrics,
    /// Requests per gateway target; `unrouted` when no route matched.
    pub routing: BTreeMap<String, u64>,
    /// Requests per replica when running behind a load balancer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replica_load: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("endpoint {0} is not bound to a module")]
    UnboundEndpoint(String),
    #[error("{module} reached table {table} directly across a database boundary")]
    IsolationBreach { module: String, table: String },
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("reports cover different traces ({left} vs {right} responses)")]
    TraceMismatch { left: usize, right: usize },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Rows seeded per table before the trace runs.
    pub rows_per_table: u32,
    /// Identical deployments behind a round-robin load balancer.
    pub replicas: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rows_per_table: 6,
            replicas: 1,
        }
    }
}

fn row_digest(parts: &[&str]) -> String {
    let mut d = DigestBuilder::new();
    for p in parts {
        d.push(p);
    }
    d.finish_hex()
}

/// Synthetic change log of the source database: inserts of `r0..rN` for
/// every table, then a seeded mix of updates and deletes across tables.
pub fn seed_log(model: &SystemModel, seed: u64, rows_per_table: u32) -> Vec<ChangeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seed_s = seed.to_string();
    let mut log = Vec::new();
    let mut seq = 0;
    let mut push = |log: &mut Vec<ChangeRecord>, table: &str, key: String, op: ChangeOp| {
        seq += 1;
        let digest = match op {
            ChangeOp::Delete => String::new(),
            _ => row_digest(&[&seed_s, table, &key, &seq.to_string()]),
        };
        log.push(ChangeRecord {
            seq,
            table: table.to_string(),
            row_key: key,
            op,
            row_digest: digest,
        });
    };
    for t in &model.tables {
        for i in 0..rows_per_table {
            push(&mut log, &t.name, format!("r{i}"), ChangeOp::Insert);
        }
    }
    if !model.tables.is_empty() && rows_per_table > 0 {
        let mutations = model.tables.len() as u32 * rows_per_table / 2;
        for _ in 0..mutations {
            let t = &model.tables[rng.random_range(0..model.tables.len())].name;
            let key = format!("r{}", rng.random_range(0..rows_per_table));
            let op = if rng.random_bool(0.25) { ChangeOp::Delete } else { ChangeOp::Update };
            push(&mut log, t, key, op);
        }
    }
    log
}

/// Rows visible to the model: every table's change log, cut at the
/// replica's applied position when the owning database is a replica.
pub fn initial_store(model: &SystemModel, log: &[ChangeRecord]) -> RowStore {
    let mut store = RowStore::with_tables(model.tables.iter().map(|t| t.name.clone()));
    let limits: BTreeMap<&str, u64> = model
        .tables
        .iter()
        .map(|t| {
            let limit = model
                .database(&t.owner_db)
                .and_then(|d| d.sync.as_ref())
                .map_or(u64::MAX, |s| s.applied_seq);
            (t.name.as_str(), limit)
        })
        .collect();
    let mut ordered: Vec<&ChangeRecord> = log.iter().collect();
    ordered.sort_by_key(|c| c.seq);
    for c in ordered {
        let Some(&limit) = limits.get(c.table.as_str()) else {
            continue;
        };
        if c.seq > limit {
            continue;
        }
        match c.op {
            ChangeOp::Insert | ChangeOp::Update => store.put(&c.table, &c.row_key, Some(&c.row_digest)),
            ChangeOp::Delete => store.put(&c.table, &c.row_key, None),
        }
    }
    store
}

/// Lookup tables derived once per model.
struct Topology<'a> {
    model: &'a SystemModel,
    business: BTreeMap<&'a str, Vec<(&'a str, CallKind)>>,
    direct: BTreeSet<(&'a str, &'a str)>,
    proxies: BTreeMap<(&'a str, &'a str), &'a str>,
    glue: BTreeSet<(&'a str, &'a str)>,
    endpoints: BTreeMap<&'a str, &'a str>,
    routes: RouteTable,
}

impl<'a> Topology<'a> {
    fn new(model: &'a SystemModel) -> Self {
        let mut business: BTreeMap<&str, Vec<(&str, CallKind)>> = BTreeMap::new();
        let mut proxies = BTreeMap::new();
        let mut glue = BTreeSet::new();
        for e in &model.edges {
            match &e.adapter {
                None => business.entry(&e.from).or_default().push((&e.to, e.kind)),
                Some(a) if a.kind == AdapterKind::Proxy => {
                    proxies.insert((e.from.as_str(), a.table.as_str()), e.to.as_str());
                }
                Some(a) if a.kind == AdapterKind::Glue => {
                    glue.insert((e.from.as_str(), a.table.as_str()));
                }
                Some(_) => {}
            }
        }
        for v in business.values_mut() {
            v.sort();
        }
        Topology {
            model,
            business,
            direct: model
                .data_access
                .iter()
                .map(|d| (d.module.as_str(), d.table.as_str()))
                .collect(),
            proxies,
            glue,
            endpoints: model
                .endpoints
                .iter()
                .map(|e| (e.path.as_str(), e.module.as_str()))
                .collect(),
            routes: RouteTable::new(model.routes.clone()).unwrap_or_default(),
        }
    }

    fn serves(&self, module: &str, table: &str) -> bool {
        self.direct.contains(&(module, table)) || self.proxies.contains_key(&(module, table))
    }

    /// Business path from `entry` to the nearest module serving `table`,
    /// with the kind of each edge taken.
    fn path(&self, entry: &'a str, table: &str) -> Option<(Vec<&'a str>, Vec<CallKind>)> {
        let mut parent: BTreeMap<&str, (&str, CallKind)> = BTreeMap::new();
        let mut seen = BTreeSet::from([entry]);
        let mut queue = VecDeque::from([entry]);
        while let Some(m) = queue.pop_front() {
            if self.serves(m, table) {
                let mut nodes = vec![m];
                let mut kinds = Vec::new();
                let mut cur = m;
                while let Some(&(p, k)) = parent.get(cur) {
                    nodes.push(p);
                    kinds.push(k);
                    cur = p;
                }
                nodes.reverse();
                kinds.reverse();
                return Some((nodes, kinds));
            }
            for &(next, kind) in self.business.get(m).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(next) {
                    parent.insert(next, (m, kind));
                    queue.push_back(next);
                }
            }
        }
        None
    }

    /// Reach the row store from a serving module, following proxy edges.
    fn resolve(&self, mut module: &'a str, table: &str, m: &mut Metrics) -> Result<(), SimError> {
        let t = self
            .model
            .table(table)
            .ok_or_else(|| SimError::UnknownTable(table.to_string()))?;
        for _ in 0..=self.model.modules.len() {
            if self.direct.contains(&(module, table)) {
                let own_db = self
                    .model
                    .service_of(module)
                    .and_then(|s| s.database.as_deref())
                    .and_then(|d| self.model.database(d));
                if own_db.is_some_and(|db| db.is_settled() && db.id != t.owner_db) {
                    return Err(SimError::IsolationBreach {
                        module: module.to_string(),
                        table: table.to_string(),
                    });
                }
                if self.glue.contains(&(module, table)) {
                    m.glue_calls += 1;
                }
                m.db_calls += 1;
                return Ok(());
            }
            match self.proxies.get(&(module, table)) {
                Some(next) => {
                    m.api_calls += 1;
                    m.cross_boundary_api_calls += 1;
                    module = next;
                }
                None => break,
            }
        }
        Err(SimError::IsolationBreach {
            module: module.to_string(),
            table: table.to_string(),
        })
    }

    fn write_overhead(&self, table: &str, m: &mut Metrics) {
        let owner = self.model.table(table).map(|t| t.owner_db.as_str());
        let replicating = self.model.databases.iter().any(|d| {
            d.tables.iter().any(|t| t == table)
                && d.sync.as_ref().is_some_and(|s| {
                    matches!(s.mode, SyncMode::Syncing | SyncMode::Converged) && Some(s.source_db.as_str()) == owner
                })
        });
        if replicating {
            m.db_calls += 1;
        }
        for fk in &self.model.foreign_keys {
            if fk.from_table != table || fk.enforcement != Enforcement::BusinessLogicLayer {
                continue;
            }
            let to_owner = self.model.table(&fk.to_table).map(|t| t.owner_db.as_str());
            if to_owner != owner {
                m.api_calls += 1;
                m.cross_boundary_api_calls += 1;
            }
            m.db_calls += 1;
        }
    }
}

fn run_request(
    topo: &Topology<'_>,
    store: &mut RowStore,
    req: &TraceRequest,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<ResponseRecord, SimError> {
    let entry = *topo
        .endpoints
        .get(req.endpoint.as_str())
        .ok_or_else(|| SimError::UnboundEndpoint(req.endpoint.clone()))?;
    if topo.model.table(&req.table).is_none() {
        return Err(SimError::UnknownTable(req.table.clone()));
    }
    let mut digest = DigestBuilder::new();
    let Some((path, kinds)) = topo.path(entry, &req.table) else {
        digest.push(entry);
        digest.push("unserved");
        return Ok(ResponseRecord {
            seq: req.seq,
            module: entry.to_string(),
            digest: digest.finish_hex(),
        });
    };
    for k in kinds {
        match k {
            CallKind::Local => metrics.local_calls += 1,
            CallKind::Api => metrics.api_calls += 1,
        }
    }
    let server = *path.last().expect("path is non-empty");
    topo.resolve(server, &req.table, metrics)?;
    for m in &path {
        digest.push(m);
    }
    digest.push(&req.table);
    let current = store.get(&req.table, &req.row_key).unwrap_or("absent").to_string();
    digest.push(&current);
    if req.op == Op::Write {
        topo.write_overhead(&req.table, metrics);
        let written = row_digest(&["write", &seed.to_string(), &req.seq.to_string(), &req.table, &req.row_key]);
        store.put(&req.table, &req.row_key, Some(&written));
        digest.push(&written);
    }
    Ok(ResponseRecord {
        seq: req.seq,
        module: server.to_string(),
        digest: digest.finish_hex(),
    })
}

pub fn execute_trace(model: &SystemModel, trace: &WorkloadTrace, seed: u64) -> Result<ExecutionReport, SimError> {
    execute_trace_with(model, trace, seed, &SimConfig::default())
}

pub fn execute_trace_with(
    model: &SystemModel,
    trace: &WorkloadTrace,
    seed: u64,
    config: &SimConfig,
) -> Result<ExecutionReport, SimError> {
    let log = seed_log(model, seed, config.rows_per_table);
    execute_on(model, trace, seed, config, &log)
}

fn execute_on(
    model: &SystemModel,
    trace: &WorkloadTrace,
    seed: u64,
    config: &SimConfig,
    log: &[ChangeRecord],
) -> Result<ExecutionReport, SimError> {
    let topo = Topology::new(model);
    let mut store = initial_store(model, log);
    let mut report = ExecutionReport::default();
    let replicas = config.replicas.max(1);
    if replicas > 1 {
        report.replica_load = vec![0; replicas];
    }
    for (i, req) in trace.requests.iter().enumerate() {
        let target = match topo.routes.lookup(&req.endpoint) {
            Some(entry) => decide(entry, &req.key).target,
            None => "unrouted".to_string(),
        };
        *report.routing.entry(target).or_default() += 1;
        if replicas > 1 {
            report.replica_load[i % replicas] += 1;
        }
        let resp = run_request(&topo, &mut store, req, seed, &mut report.metrics)?;
        report.responses.push(resp);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    Equal,
    Diverged { seq: u64, expected: String, actual: String },
}

impl Verdict {
    pub fn is_equal(&self) -> bool {
        matches!(self, Verdict::Equal)
    }
}

/// Compare two reports of the same trace by response digest.
pub fn equivalence_check(a: &ExecutionReport, b: &ExecutionReport) -> Result<Verdict, SimError> {
    if a.responses.len() != b.responses.len() {
        return Err(SimError::TraceMismatch {
            left: a.responses.len(),
            right: b.responses.len(),
        });
    }
    for (x, y) in a.responses.iter().zip(&b.responses) {
        if x.seq != y.seq {
            return Err(SimError::TraceMismatch {
                left: a.responses.len(),
                right: b.responses.len(),
            });
        }
        if x.digest != y.digest {
            return Ok(Verdict::Diverged {
                seq: x.seq,
                expected: x.digest.clone(),
                actual: y.digest.clone(),
            });
        }
    }
    Ok(Verdict::Equal)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_id: u32,
    pub step: String,
    pub verdict: Verdict,
    pub metrics: Metrics,
    pub delta: MetricsDelta,
    pub rolled_back: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub baseline: Metrics,
    pub steps: Vec<StepReport>,
    /// True when every step applied without divergence.
    pub completed: bool,
    pub isolation: Vec<IsolationViolation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MigrationRun {
    pub report: MigrationReport,
    pub model: SystemModel,
}

pub fn run_migration(
    model: &SystemModel,
    plan: &MigrationPlan,
    trace: &WorkloadTrace,
    seed: u64,
) -> Result<MigrationRun, SimError> {
    run_migration_with(model, plan, trace, seed, &SimConfig::default(), Faults::default())
}

/// Apply the plan step by step, replaying the trace after each step. The
/// first divergent step is rolled back and the run stops there.
pub fn run_migration_with(
    model: &SystemModel,
    plan: &MigrationPlan,
    trace: &WorkloadTrace,
    seed: u64,
    config: &SimConfig,
    faults: Faults,
) -> Result<MigrationRun, SimError> {
    let log = seed_log(model, seed, config.rows_per_table);
    let baseline = execute_on(model, trace, seed, config, &log)?;
    let mut migrator = Migrator::new(model.clone(), log.clone()).with_faults(faults);
    let mut steps = Vec::new();
    let mut completed = true;
    for step in &plan.steps {
        migrator.apply(step)?;
        let report = execute_on(&migrator.model, trace, seed, config, &log)?;
        let verdict = equivalence_check(&baseline, &report)?;
        let diverged = !verdict.is_equal();
        if diverged {
            migrator.rollback(step)?;
        }
        steps.push(StepReport {
            step_id: step.id,
            step: step.kind.to_string(),
            verdict,
            delta: report.metrics.delta_from(&baseline.metrics),
            metrics: report.metrics,
            rolled_back: diverged,
        });
        if diverged {
            completed = false;
            break;
        }
    }
    Ok(MigrationRun {
        report: MigrationReport {
            baseline: baseline.metrics,
            steps,
            completed,
            isolation: verify_isolation(&migrator.model),
        },
        model: migrator.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_trace_has_zero_counters() {
        let r = execute_trace(&SystemModel::default(), &WorkloadTrace::default(), 0).unwrap();
        assert_eq!(r.metrics, Metrics::default());
        assert!(r.responses.is_empty());
    }

    #[test]
    fn self_comparison_is_equal() {
        let mut a = ExecutionReport::default();
        for seq in 1..=10 {
            a.responses.push(ResponseRecord {
                seq,
                module: "m".into(),
                digest: format!("{seq}"),
            });
        }
        assert_eq!(equivalence_check(&a, &a).unwrap(), Verdict::Equal);
        let mut b = a.clone();
        b.responses[6].digest = "x".into();
        assert!(matches!(
            equivalence_check(&a, &b).unwrap(),
            Verdict::Diverged { seq: 7, .. }
        ));
        b.responses.pop();
        assert!(matches!(equivalence_check(&a, &b), Err(SimError::TraceMismatch { .. })));
    }

    #[test]
    fn seed_log_is_deterministic_and_ordered() {
        let mut m = SystemModel::default();
        m.tables.push(crate::model::Table {
            name: "t".into(),
            columns: vec!["id".into()],
            primary_key: "id".into(),
            owner_db: "db".into(),
            lifecycle_owner: None,
        });
        let a = seed_log(&m, 3, 4);
        assert_eq!(a, seed_log(&m, 3, 4));
        assert!(a.windows(2).all(|w| w[0].seq < w[1].seq));
        assert_eq!(a.len(), 4 + 2);
    }
}

//! Seeded generators for random monolith models and workload traces.
//!
//! Every generated model is a valid, un-migrated monolith: one service, one
//! database, each context with a user-interface, business-logic and
//! data-access module chained together, random business calls between
//! contexts, some shared tables with a declared lifecycle owner, and a few
//! database-layer foreign keys.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    AccessMode, CallEdge, DataAccess, Database, Endpoint, Enforcement, ForeignKey, Layer, ModuleNode, Op, RouteEntry,
    Service, ServiceRole, SystemModel, Table, TraceRequest, WorkloadTrace,
};

pub const MONOLITH: &str = "monolith";
pub const MONOLITH_DB: &str = "monolith-db";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub min_contexts: usize,
    pub max_contexts: usize,
    pub max_tables_per_context: usize,
    pub max_cross_edges: usize,
    pub shared_probability: f64,
    pub max_foreign_keys: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            min_contexts: 2,
            max_contexts: 5,
            max_tables_per_context: 2,
            max_cross_edges: 8,
            shared_probability: 0.4,
            max_foreign_keys: 4,
        }
    }
}

pub fn random_model(seed: u64) -> SystemModel {
    random_model_with(&mut ChaCha8Rng::seed_from_u64(seed), &SynthParams::default())
}

pub fn random_model_with(rng: &mut impl Rng, p: &SynthParams) -> SystemModel {
    let n = rng.random_range(p.min_contexts..=p.max_contexts);
    let contexts: Vec<String> = (0..n).map(|i| format!("C{i}")).collect();
    let mut m = SystemModel::default();

    for c in &contexts {
        let lc = c.to_lowercase();
        let mut chain = vec![(format!("{c}-ui"), Layer::UserInterface), (format!("{c}-bl"), Layer::BusinessLogic)];
        if rng.random_bool(0.5) {
            chain.push((format!("{c}-bl2"), Layer::BusinessLogic));
        }
        chain.push((format!("{c}-da"), Layer::DataAccess));
        for (id, layer) in &chain {
            m.modules.push(ModuleNode {
                id: id.clone(),
                layer: *layer,
                context: c.clone(),
            });
        }
        for w in chain.windows(2) {
            m.edges.push(CallEdge::business(&w[0].0, &w[1].0, rng.random_range(1..=3)));
        }
        m.endpoints.push(Endpoint {
            path: format!("/{lc}/items"),
            module: format!("{c}-ui"),
        });
        match rng.random_range(0..3) {
            0 => m.endpoints.push(Endpoint {
                path: format!("/{lc}/admin"),
                module: format!("{c}-ui"),
            }),
            1 => m.endpoints.push(Endpoint {
                path: format!("/api/{lc}"),
                module: format!("{c}-bl"),
            }),
            _ => {}
        }
        for j in 0..rng.random_range(0..=p.max_tables_per_context) {
            let name = format!("{lc}_t{j}");
            m.tables.push(Table {
                name: name.clone(),
                columns: vec!["id".into(), "payload".into()],
                primary_key: "id".into(),
                owner_db: MONOLITH_DB.into(),
                lifecycle_owner: None,
            });
            m.data_access.push(DataAccess::new(&format!("{c}-da"), &name));
        }
    }

    if n > 1 {
        let mut seen = BTreeSet::new();
        for _ in 0..rng.random_range(0..=p.max_cross_edges) {
            let a = rng.random_range(0..n);
            let b = (a + rng.random_range(1..n)) % n;
            if seen.insert((a, b)) {
                m.edges.push(CallEdge::business(
                    &format!("{}-bl", contexts[a]),
                    &format!("{}-bl", contexts[b]),
                    rng.random_range(1..=3),
                ));
            }
        }
        let home: Vec<(String, usize)> = m
            .tables
            .iter()
            .map(|t| {
                let ctx = t.name.split('_').next().unwrap().to_uppercase();
                (t.name.clone(), contexts.iter().position(|c| *c == ctx).unwrap())
            })
            .collect();
        for (name, owner) in home {
            if !rng.random_bool(p.shared_probability) {
                continue;
            }
            let other = (owner + rng.random_range(1..n)) % n;
            m.data_access.push(DataAccess::new(&format!("{}-da", contexts[other]), &name));
            let lifecycle = if rng.random_bool(0.5) { owner } else { other };
            m.tables
                .iter_mut()
                .find(|t| t.name == name)
                .unwrap()
                .lifecycle_owner = Some(contexts[lifecycle].clone());
        }
    }

    if m.tables.len() > 1 {
        let names: Vec<String> = m.tables.iter().map(|t| t.name.clone()).collect();
        let mut seen = BTreeSet::new();
        for _ in 0..rng.random_range(0..=p.max_foreign_keys) {
            let from = names.choose(rng).unwrap().clone();
            let to = names.choose(rng).unwrap().clone();
            if from == to || !seen.insert((from.clone(), to.clone())) {
                continue;
            }
            let column = format!("{to}_id");
            m.tables.iter_mut().find(|t| t.name == from).unwrap().columns.push(column.clone());
            m.foreign_keys.push(ForeignKey {
                from_table: from,
                from_column: column,
                to_table: to,
                enforcement: Enforcement::DatabaseLayer,
            });
        }
    }

    if rng.random_bool(0.5) {
        m.routes.push(RouteEntry {
            path_prefix: "/".into(),
            legacy_target: MONOLITH.into(),
            extracted_target: None,
            shift_percent: 0,
        });
    }
    m.services.push(Service {
        id: MONOLITH.into(),
        modules: m.modules.iter().map(|x| x.id.clone()).collect(),
        database: Some(MONOLITH_DB.into()),
        role: ServiceRole::Monolith,
        frozen: false,
    });
    m.databases.push(Database {
        id: MONOLITH_DB.into(),
        tables: m.tables.iter().map(|t| t.name.clone()).collect(),
        access: m
            .tables
            .iter()
            .map(|t| (t.name.clone(), AccessMode::ReadWrite))
            .collect(),
        sync: None,
    });
    m.normalize();
    m
}

/// Tables reachable from `entry` over business edges.
pub fn reachable_tables(model: &SystemModel, entry: &str) -> BTreeSet<String> {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in model.edges.iter().filter(|e| e.is_business()) {
        adj.entry(&e.from).or_default().push(&e.to);
    }
    let mut seen = BTreeSet::from([entry]);
    let mut queue = VecDeque::from([entry]);
    let mut out = BTreeSet::new();
    while let Some(m) = queue.pop_front() {
        for da in model.data_access.iter().filter(|d| d.module == m) {
            out.insert(da.table.clone());
        }
        for &n in adj.get(m).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    out
}

/// Requests against the model's endpoints, mostly reading or writing tables
/// the endpoint can reach. Row keys range slightly past the seeded rows so
/// some lookups miss.
pub fn random_trace(model: &SystemModel, rng: &mut impl Rng, len: usize, rows_per_table: u32) -> WorkloadTrace {
    let reach: Vec<(String, Vec<String>)> = model
        .endpoints
        .iter()
        .map(|e| (e.path.clone(), reachable_tables(model, &e.module).into_iter().collect()))
        .collect();
    let all: Vec<String> = model.tables.iter().map(|t| t.name.clone()).collect();
    let mut requests = Vec::with_capacity(len);
    if reach.is_empty() || all.is_empty() {
        return WorkloadTrace { requests };
    }
    for i in 0..len {
        let (endpoint, tables) = reach.choose(rng).unwrap();
        let pool = if tables.is_empty() { &all } else { tables };
        requests.push(TraceRequest {
            seq: i as u64 + 1,
            endpoint: endpoint.clone(),
            key: format!("user-{}", rng.random_range(0..1000)),
            op: if rng.random_bool(0.3) { Op::Write } else { Op::Read },
            table: pool.choose(rng).unwrap().clone(),
            row_key: format!("r{}", rng.random_range(0..rows_per_table + 2)),
        });
    }
    WorkloadTrace { requests }
}

//! Database decomposition for an extracted context.
//!
//! The lifecycle for one context is:
//!
//! ```text
//! related_tables -> hoist_constraints -> mirror_schema      (mode: mirrored)
//!   -> start_sync                                           (mode: syncing)
//!   -> sync_until_quiescent / apply_change                  (mode: converged)
//!   -> cutover                                              (mode: cutover)
//! ```
//!
//! Rows are tracked as content digests keyed by primary-key value. The
//! replica only accepts writes from the change log until cutover.
//!
//! Shared tables go to exactly one side: the extracted service takes a table
//! when only its context touches it, or when the table names the context as
//! its lifecycle owner. Everything else stays with the monolith and is reached
//! through the owner's API after cutover.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    extracted_service_id, replica_db_id, AccessMode, Adapter, AdapterKind, CallEdge, CallKind, Database,
    Enforcement, SyncMode, SyncState, SystemModel,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DbSplitError {
    #[error("unknown context {0}")]
    UnknownContext(String),
    #[error("precondition failed: {0}")]
    PreconditionFailed(String),
    #[error("context {0} is already mirrored")]
    AlreadyMirrored(String),
    #[error("replica is in mode {actual:?}, expected {expected:?}")]
    WrongMode { expected: SyncMode, actual: SyncMode },
    #[error("table {0} is not part of the replica")]
    UnknownTable(String),
    #[error("replica for {0} has not converged")]
    NotConverged(String),
    #[error("replica table {0} is read-only until cutover")]
    ReadOnlyReplica(String),
}

pub type Result<T> = std::result::Result<T, DbSplitError>;

fn ensure_context(model: &SystemModel, context: &str) -> Result<()> {
    if model.modules.iter().any(|m| m.context == context) {
        Ok(())
    } else {
        Err(DbSplitError::UnknownContext(context.to_string()))
    }
}

/// Tables touched by any module of the context.
pub fn related_tables(model: &SystemModel, context: &str) -> Result<BTreeSet<String>> {
    ensure_context(model, context)?;
    Ok(model
        .tables
        .iter()
        .filter(|t| {
            model
                .accessors(&t.name)
                .iter()
                .any(|m| model.module(m).is_some_and(|n| n.context == context))
        })
        .map(|t| t.name.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedTable {
    pub table: String,
    pub contexts: BTreeSet<String>,
    pub lifecycle_owner: Option<String>,
}

/// Related tables that other contexts also touch.
pub fn shared_tables(model: &SystemModel, context: &str) -> Result<Vec<SharedTable>> {
    let related = related_tables(model, context)?;
    Ok(related
        .into_iter()
        .filter_map(|name| {
            let contexts = model.accessor_contexts(&name);
            (contexts.len() > 1).then(|| SharedTable {
                lifecycle_owner: model.table(&name).and_then(|t| t.lifecycle_owner.clone()),
                table: name,
                contexts,
            })
        })
        .collect())
}

/// Related tables whose ownership moves to the extracted service.
pub fn owned_tables(model: &SystemModel, context: &str) -> Result<BTreeSet<String>> {
    let related = related_tables(model, context)?;
    Ok(related
        .into_iter()
        .filter(|name| {
            let contexts = model.accessor_contexts(name);
            let lifecycle = model.table(name).and_then(|t| t.lifecycle_owner.as_deref());
            (contexts.len() == 1) || lifecycle == Some(context)
        })
        .collect())
}

/// Foreign keys with exactly one end inside the owned-table boundary.
pub fn boundary_keys(model: &SystemModel, context: &str) -> Result<Vec<usize>> {
    let owned = owned_tables(model, context)?;
    Ok(model
        .foreign_keys
        .iter()
        .enumerate()
        .filter(|(_, fk)| owned.contains(&fk.from_table) != owned.contains(&fk.to_table))
        .map(|(i, _)| i)
        .collect())
}

/// Move every boundary-crossing constraint into the business-logic layer.
/// Idempotent.
pub fn hoist_constraints(model: &SystemModel, context: &str) -> Result<SystemModel> {
    let crossing = boundary_keys(model, context)?;
    let mut next = model.clone();
    for i in crossing {
        next.foreign_keys[i].enforcement = Enforcement::BusinessLogicLayer;
    }
    next.normalize();
    Ok(next)
}

/// Create the extracted service's database with the owned tables' structure.
/// The new database starts empty in mode `mirrored`.
pub fn mirror_schema(model: &SystemModel, context: &str) -> Result<SystemModel> {
    let owned = owned_tables(model, context)?;
    let svc_id = extracted_service_id(context);
    let svc = model
        .service(&svc_id)
        .ok_or_else(|| DbSplitError::PreconditionFailed(format!("service {svc_id} does not exist")))?;
    if svc.database.is_some() {
        return Err(DbSplitError::AlreadyMirrored(context.to_string()));
    }
    let crossing = boundary_keys(model, context)?;
    if crossing
        .iter()
        .any(|&i| model.foreign_keys[i].enforcement == Enforcement::DatabaseLayer)
    {
        return Err(DbSplitError::PreconditionFailed(
            "constraints crossing the table boundary are not hoisted".into(),
        ));
    }
    let source_db = model
        .monolith()
        .and_then(|m| m.database.clone())
        .ok_or_else(|| DbSplitError::PreconditionFailed("monolith owns no database".into()))?;
    if let Some(stray) = owned
        .iter()
        .find(|t| model.table(t).is_some_and(|t| t.owner_db != source_db))
    {
        return Err(DbSplitError::PreconditionFailed(format!(
            "table {stray} is not owned by {source_db}"
        )));
    }

    let db_id = replica_db_id(&svc_id);
    if model.database(&db_id).is_some() {
        return Err(DbSplitError::AlreadyMirrored(context.to_string()));
    }
    let mut next = model.clone();
    next.databases.push(Database {
        id: db_id.clone(),
        tables: owned.iter().cloned().collect(),
        access: owned.iter().map(|t| (t.clone(), AccessMode::ReadOnlyReplica)).collect(),
        sync: Some(SyncState {
            source_db,
            target_db: db_id.clone(),
            applied_seq: 0,
            mode: SyncMode::Mirrored,
        }),
    });
    next.service_mut(&svc_id).expect("checked above").database = Some(db_id);
    next.normalize();
    Ok(next)
}

fn replica_of<'a>(model: &'a SystemModel, context: &str) -> Result<&'a Database> {
    ensure_context(model, context)?;
    let svc_id = extracted_service_id(context);
    model
        .service(&svc_id)
        .and_then(|s| s.database.as_deref())
        .and_then(|d| model.database(d))
        .filter(|d| d.sync.is_some())
        .ok_or_else(|| DbSplitError::PreconditionFailed(format!("{context} has no replica database")))
}

/// Current sync state of the context's replica.
pub fn sync_state(model: &SystemModel, context: &str) -> Result<SyncState> {
    Ok(replica_of(model, context)?.sync.clone().expect("filtered above"))
}

/// Begin change capture: `mirrored -> syncing`.
pub fn start_sync(model: &SystemModel, context: &str) -> Result<SystemModel> {
    let state = sync_state(model, context)?;
    if state.mode != SyncMode::Mirrored {
        return Err(DbSplitError::WrongMode {
            expected: SyncMode::Mirrored,
            actual: state.mode,
        });
    }
    record_sync(
        model,
        &SyncState {
            mode: SyncMode::Syncing,
            ..state
        },
    )
}

/// Publish a new sync state for a replica. The mode may stay or advance one
/// step and `applied_seq` may not go backwards.
pub fn record_sync(model: &SystemModel, state: &SyncState) -> Result<SystemModel> {
    let db = model
        .database(&state.target_db)
        .ok_or_else(|| DbSplitError::PreconditionFailed(format!("unknown database {}", state.target_db)))?;
    let current = db
        .sync
        .as_ref()
        .ok_or_else(|| DbSplitError::PreconditionFailed(format!("{} is not a replica", db.id)))?;
    if current.mode != state.mode && !current.mode.can_advance_to(state.mode) {
        return Err(DbSplitError::WrongMode {
            expected: current.mode,
            actual: state.mode,
        });
    }
    if state.applied_seq < current.applied_seq {
        return Err(DbSplitError::PreconditionFailed("applied_seq went backwards".into()));
    }
    let mut next = model.clone();
    next.database_mut(&state.target_db).expect("checked above").sync = Some(state.clone());
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeOp {
    Insert,
    Update,
    Delete,
}

/// One entry of a source database's ordered change log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub seq: u64,
    pub table: String,
    pub row_key: String,
    pub op: ChangeOp,
    pub row_digest: String,
}

/// Row contents by table, then primary key, as content digests.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowStore {
    pub tables: BTreeMap<String, BTreeMap<String, String>>,
}

impl RowStore {
    pub fn with_tables<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RowStore {
            tables: names.into_iter().map(|n| (n.into(), BTreeMap::new())).collect(),
        }
    }

    pub fn get(&self, table: &str, key: &str) -> Option<&str> {
        self.tables.get(table)?.get(key).map(String::as_str)
    }

    pub fn has_table(&self, table: &str) -> bool {
        self.tables.contains_key(table)
    }

    /// Unchecked upsert/delete; `None` removes the row.
    pub fn put(&mut self, table: &str, key: &str, digest: Option<&str>) {
        let rows = self.tables.entry(table.to_string()).or_default();
        match digest {
            Some(d) => {
                rows.insert(key.to_string(), d.to_string());
            }
            None => {
                rows.remove(key);
            }
        }
    }

    /// Copy of the named tables only.
    pub fn projection<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> RowStore {
        RowStore {
            tables: names
                .into_iter()
                .map(|n| (n.to_string(), self.tables.get(n).cloned().unwrap_or_default()))
                .collect(),
        }
    }
}

/// Apply one change record to a syncing replica. Records at or below
/// `applied_seq` are ignored, so replays are harmless. Deleting a missing key
/// is a no-op.
pub fn apply_change(
    mut replica: RowStore,
    mut state: SyncState,
    change: &ChangeRecord,
) -> Result<(RowStore, SyncState)> {
    if state.mode != SyncMode::Syncing {
        return Err(DbSplitError::WrongMode {
            expected: SyncMode::Syncing,
            actual: state.mode,
        });
    }
    if !replica.has_table(&change.table) {
        return Err(DbSplitError::UnknownTable(change.table.clone()));
    }
    if change.seq <= state.applied_seq {
        return Ok((replica, state));
    }
    match change.op {
        ChangeOp::Insert | ChangeOp::Update => {
            replica.put(&change.table, &change.row_key, Some(&change.row_digest))
        }
        ChangeOp::Delete => replica.put(&change.table, &change.row_key, None),
    }
    state.applied_seq = change.seq;
    Ok((replica, state))
}

/// Drain the log into the replica in seq order and mark it converged.
/// Entries for tables outside the replica are skipped.
pub fn sync_until_quiescent(
    source_log: &[ChangeRecord],
    mut replica: RowStore,
    mut state: SyncState,
) -> Result<(RowStore, SyncState)> {
    if state.mode != SyncMode::Syncing {
        return Err(DbSplitError::WrongMode {
            expected: SyncMode::Syncing,
            actual: state.mode,
        });
    }
    let mut ordered: Vec<&ChangeRecord> = source_log
        .iter()
        .filter(|c| replica.has_table(&c.table))
        .collect();
    ordered.sort_by_key(|c| c.seq);
    for change in ordered {
        (replica, state) = apply_change(replica, state, change)?;
    }
    state.mode = SyncMode::Converged;
    Ok((replica, state))
}

/// A replica together with its progress. Direct writes are rejected until
/// cutover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replica {
    pub store: RowStore,
    pub state: SyncState,
}

impl Replica {
    pub fn write(&mut self, table: &str, key: &str, digest: Option<&str>) -> Result<()> {
        if self.state.mode != SyncMode::Cutover {
            return Err(DbSplitError::ReadOnlyReplica(table.to_string()));
        }
        if !self.store.has_table(table) {
            return Err(DbSplitError::UnknownTable(table.to_string()));
        }
        self.store.put(table, key, digest);
        Ok(())
    }
}

/// Point the extracted service at its converged replica and rewrite every
/// access that now crosses a database boundary into an API call through the
/// owning service.
pub fn cutover(model: &SystemModel, context: &str) -> Result<SystemModel> {
    cutover_inner(model, context, true)
}

/// Same as [`cutover`] but without the convergence guard. Only for fault
/// injection.
pub fn cutover_unguarded(model: &SystemModel, context: &str) -> Result<SystemModel> {
    cutover_inner(model, context, false)
}

fn cutover_inner(model: &SystemModel, context: &str, guarded: bool) -> Result<SystemModel> {
    let replica = replica_of(model, context)?;
    let state = replica.sync.clone().expect("replica has sync state");
    if state.mode == SyncMode::Cutover {
        return Err(DbSplitError::PreconditionFailed(format!("{context} is already cut over")));
    }
    if guarded && state.mode != SyncMode::Converged {
        return Err(DbSplitError::NotConverged(context.to_string()));
    }
    let svc_id = extracted_service_id(context);
    let replica_id = replica.id.clone();
    let source_id = state.source_db.clone();
    let moved: BTreeSet<String> = replica
        .tables
        .iter()
        .filter(|t| model.table(t).is_some_and(|t| t.owner_db == source_id))
        .cloned()
        .collect();

    let mut next = model.clone();
    for t in next.tables.iter_mut().filter(|t| moved.contains(&t.name)) {
        t.owner_db = replica_id.clone();
    }
    {
        let source = next.database_mut(&source_id).expect("source database exists");
        source.tables.retain(|t| !moved.contains(t));
        source.access.retain(|t, _| !moved.contains(t));
    }
    {
        let db = next.database_mut(&replica_id).expect("replica exists");
        for mode in db.access.values_mut() {
            *mode = AccessMode::ReadWrite;
        }
        db.sync = Some(SyncState {
            mode: SyncMode::Cutover,
            ..state
        });
    }

    // Rewrite crossing data access into proxy edges towards a module of the
    // owning service that still reads the table directly.
    let mut kept = Vec::with_capacity(next.data_access.len());
    let mut rewritten = Vec::new();
    for da in &next.data_access {
        let accessor = next.service_of(&da.module).map(|s| s.id.clone());
        let owner_db = next.table(&da.table).map(|t| t.owner_db.clone());
        let involved = match (&accessor, &owner_db) {
            (Some(a), Some(db)) => {
                (moved.contains(&da.table) && *a != svc_id) || (*a == svc_id && *db != replica_id)
            }
            _ => false,
        };
        if involved {
            rewritten.push(da.clone());
        } else {
            kept.push(da.clone());
        }
    }
    let mut proxies = Vec::new();
    for da in &rewritten {
        let owner_db = &next.table(&da.table).expect("checked").owner_db;
        let owner_svc = next
            .owner_of_db(owner_db)
            .ok_or_else(|| DbSplitError::PreconditionFailed(format!("no service owns {owner_db}")))?;
        let target = kept
            .iter()
            .find(|k| k.table == da.table && owner_svc.modules.contains(&k.module))
            .ok_or_else(|| {
                DbSplitError::PreconditionFailed(format!(
                    "no module of {} reads {} directly",
                    owner_svc.id, da.table
                ))
            })?;
        proxies.push(CallEdge {
            from: da.module.clone(),
            to: target.module.clone(),
            kind: CallKind::Api,
            weight: 1,
            adapter: Some(Adapter {
                kind: AdapterKind::Proxy,
                table: da.table.clone(),
            }),
        });
    }
    next.data_access = kept;
    next.edges.extend(proxies);
    next.recompute_edge_kinds();
    next.normalize();
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IsolationViolation {
    DataAccess {
        module: String,
        table: String,
        module_service: String,
        table_db: String,
    },
    ForeignKey {
        from_table: String,
        from_column: String,
        to_table: String,
    },
}

/// Every data access that leaves the accessor's own database and every
/// database-layer constraint spanning two databases.
pub fn verify_isolation(model: &SystemModel) -> Vec<IsolationViolation> {
    let mut out = Vec::new();
    for da in &model.data_access {
        let (Some(svc), Some(table)) = (model.service_of(&da.module), model.table(&da.table)) else {
            continue;
        };
        if svc.database.as_deref() != Some(table.owner_db.as_str()) {
            out.push(IsolationViolation::DataAccess {
                module: da.module.clone(),
                table: da.table.clone(),
                module_service: svc.id.clone(),
                table_db: table.owner_db.clone(),
            });
        }
    }
    for fk in model
        .foreign_keys
        .iter()
        .filter(|fk| fk.enforcement == Enforcement::DatabaseLayer)
    {
        if let (Some(a), Some(b)) = (model.table(&fk.from_table), model.table(&fk.to_table)) {
            if a.owner_db != b.owner_db {
                out.push(IsolationViolation::ForeignKey {
                    from_table: fk.from_table.clone(),
                    from_column: fk.from_column.clone(),
                    to_table: fk.to_table.clone(),
                });
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syncing(tables: &[&str]) -> (RowStore, SyncState) {
        (
            RowStore::with_tables(tables.iter().copied()),
            SyncState {
                source_db: "src".into(),
                target_db: "dst".into(),
                applied_seq: 0,
                mode: SyncMode::Syncing,
            },
        )
    }

    fn rec(seq: u64, table: &str, key: &str, op: ChangeOp, digest: &str) -> ChangeRecord {
        ChangeRecord {
            seq,
            table: table.into(),
            row_key: key.into(),
            op,
            row_digest: digest.into(),
        }
    }

    #[test]
    fn replayed_insert_is_idempotent() {
        let (store, state) = syncing(&["t"]);
        let c = rec(1, "t", "k", ChangeOp::Insert, "d");
        let (s1, st1) = apply_change(store, state, &c).unwrap();
        let (s2, st2) = apply_change(s1.clone(), st1.clone(), &c).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(st1, st2);
    }

    #[test]
    fn insert_then_delete() {
        let (store, state) = syncing(&["t"]);
        let (store, state) = apply_change(store, state, &rec(1, "t", "k", ChangeOp::Insert, "d")).unwrap();
        let (store, state) = apply_change(store, state, &rec(2, "t", "k", ChangeOp::Delete, "")).unwrap();
        assert_eq!(store.get("t", "k"), None);
        assert_eq!(state.applied_seq, 2);
    }

    #[test]
    fn delete_of_missing_key_is_tolerated() {
        let (store, state) = syncing(&["t"]);
        let (store, state) = apply_change(store, state, &rec(5, "t", "ghost", ChangeOp::Delete, "")).unwrap();
        assert!(store.tables["t"].is_empty());
        assert_eq!(state.applied_seq, 5);
    }

    #[test]
    fn wrong_mode_and_unknown_table() {
        let (store, mut state) = syncing(&["t"]);
        assert!(matches!(
            apply_change(store.clone(), state.clone(), &rec(1, "u", "k", ChangeOp::Insert, "d")),
            Err(DbSplitError::UnknownTable(_))
        ));
        state.mode = SyncMode::Converged;
        assert!(matches!(
            apply_change(store, state, &rec(1, "t", "k", ChangeOp::Insert, "d")),
            Err(DbSplitError::WrongMode { .. })
        ));
    }

    #[test]
    fn empty_log_converges_empty() {
        let (store, state) = syncing(&["t"]);
        let (store, state) = sync_until_quiescent(&[], store, state).unwrap();
        assert_eq!(state.mode, SyncMode::Converged);
        assert!(store.tables["t"].is_empty());
    }

    #[test]
    fn sync_follows_seq_order_not_slice_order() {
        let (store, state) = syncing(&["t2"]);
        let log = vec![
            rec(3, "t2", "k", ChangeOp::Update, "monolith-late"),
            rec(1, "t2", "k", ChangeOp::Insert, "first"),
            rec(2, "t2", "k", ChangeOp::Update, "service-write"),
        ];
        let (store, _) = sync_until_quiescent(&log, store, state).unwrap();
        assert_eq!(store.get("t2", "k"), Some("monolith-late"));
    }

    #[test]
    fn replica_rejects_direct_writes_before_cutover() {
        let (store, mut state) = syncing(&["t"]);
        for mode in [SyncMode::Mirrored, SyncMode::Syncing, SyncMode::Converged] {
            state.mode = mode;
            let mut r = Replica {
                store: store.clone(),
                state: state.clone(),
            };
            assert!(matches!(r.write("t", "k", Some("d")), Err(DbSplitError::ReadOnlyReplica(_))));
        }
        state.mode = SyncMode::Cutover;
        let mut r = Replica { store, state };
        r.write("t", "k", Some("d")).unwrap();
        assert_eq!(r.store.get("t", "k"), Some("d"));
    }
}

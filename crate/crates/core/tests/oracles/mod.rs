//! Reference implementations used as test oracles. Each one recomputes a
//! result from raw inputs without calling the code under test.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use stranglerkit_core::dbsplit::{ChangeOp, ChangeRecord, IsolationViolation};
use stranglerkit_core::model::{AdapterKind, Enforcement, Op, SyncMode, SystemModel, WorkloadTrace};
use stranglerkit_core::planner::{MigrationStep, StepKind};
use stranglerkit_core::resilience::{CircuitState, Outcome};
use stranglerkit_core::simulator::Metrics;

pub fn fixture(name: &str) -> String {
    let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

/// FNV-1a 64, written out by hand.
pub fn fnv1a64_ref(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn bucket_ref(key: &str) -> u64 {
    fnv1a64_ref(key.as_bytes()) % 100
}

/// (in, out) weight per node from a raw edge list; self loops ignored.
pub fn degree_recount(nodes: &[String], edges: &[(usize, usize, u64)]) -> Vec<(u64, u64)> {
    let mut deg = vec![(0u64, 0u64); nodes.len()];
    for &(a, b, w) in edges {
        if a != b {
            deg[a].1 += w;
            deg[b].0 += w;
        }
    }
    deg
}

/// Labels sorted by total degree, then label.
pub fn brute_rank(nodes: &[String], edges: &[(usize, usize, u64)]) -> Vec<String> {
    let deg = degree_recount(nodes, edges);
    let mut idx: Vec<usize> = (0..nodes.len()).collect();
    // Selection sort keeps this independent of the library's comparator.
    for i in 0..idx.len() {
        let mut best = i;
        for j in i + 1..idx.len() {
            let (a, b) = (idx[j], idx[best]);
            let (ta, tb) = (deg[a].0 + deg[a].1, deg[b].0 + deg[b].1);
            if ta < tb || (ta == tb && nodes[a] < nodes[b]) {
                best = j;
            }
        }
        idx.swap(i, best);
    }
    idx.into_iter().map(|i| nodes[i].clone()).collect()
}

fn order_class(kind: &StepKind) -> usize {
    match kind {
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

/// Every pair (i, j), i < j, checked against the ordering constraints.
pub fn pairwise_order_violations(steps: &[MigrationStep]) -> Vec<(usize, usize)> {
    let mut bad = Vec::new();
    for i in 0..steps.len() {
        for j in i + 1..steps.len() {
            let (a, b) = (&steps[i].kind, &steps[j].kind);
            let mut ok = order_class(a) <= order_class(b);
            if let (
                StepKind::ShiftTraffic { path: p1, percent: x },
                StepKind::ShiftTraffic { path: p2, percent: y },
            ) = (a, b)
            {
                ok &= p1 != p2 || x <= y;
            }
            if matches!((a, b), (StepKind::Cutover { .. }, StepKind::Cutover { .. })) {
                ok = false;
            }
            if !ok {
                bad.push((i, j));
            }
        }
    }
    bad
}

/// Foreign keys with exactly one side in `tables`.
pub fn boundary_scan(model: &SystemModel, tables: &BTreeSet<String>) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    for fk in &model.foreign_keys {
        let inside = [&fk.from_table, &fk.to_table]
            .iter()
            .filter(|t| tables.contains(t.as_str()))
            .count();
        if inside == 1 {
            out.push((fk.from_table.clone(), fk.from_column.clone(), fk.to_table.clone()));
        }
    }
    out
}

/// Final key -> digest map per table after replaying `log` in seq order,
/// keeping only `tables`. Duplicate seqs are applied once.
pub fn projection(log: &[ChangeRecord], tables: &[&str]) -> BTreeMap<String, BTreeMap<String, String>> {
    let mut by_seq: BTreeMap<u64, &ChangeRecord> = BTreeMap::new();
    for c in log {
        by_seq.entry(c.seq).or_insert(c);
    }
    let mut state: HashMap<(&str, &str), &str> = HashMap::new();
    for c in by_seq.values() {
        match c.op {
            ChangeOp::Delete => {
                state.remove(&(c.table.as_str(), c.row_key.as_str()));
            }
            _ => {
                state.insert((c.table.as_str(), c.row_key.as_str()), c.row_digest.as_str());
            }
        }
    }
    let mut out: BTreeMap<String, BTreeMap<String, String>> =
        tables.iter().map(|t| (t.to_string(), BTreeMap::new())).collect();
    for ((t, k), d) in state {
        if let Some(rows) = out.get_mut(t) {
            rows.insert(k.to_string(), d.to_string());
        }
    }
    out
}

/// Breaker automaton, state as a plain tuple: (tag, counter, time).
/// tag 0 = closed(counter failures), 1 = open(since time), 2 = half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BreakerOracle {
    pub threshold: u32,
    pub cooldown: u64,
    pub tag: u8,
    pub failures: u32,
    pub since: u64,
}

impl BreakerOracle {
    pub fn new(threshold: u32, cooldown: u64) -> Self {
        BreakerOracle {
            threshold,
            cooldown,
            tag: 0,
            failures: 0,
            since: 0,
        }
    }

    /// One call attempt at `now` whose upstream would answer `ok`.
    /// Returns whether the upstream was invoked.
    pub fn call(&mut self, now: u64, ok: bool) -> bool {
        if self.tag == 1 {
            if now - self.since < self.cooldown {
                return false;
            }
            self.tag = 2;
        }
        if ok {
            self.tag = 0;
            self.failures = 0;
        } else if self.tag == 2 {
            self.tag = 1;
            self.since = now;
        } else {
            self.failures += 1;
            if self.failures == self.threshold {
                self.tag = 1;
                self.since = now;
                self.failures = 0;
            }
        }
        true
    }

    pub fn as_state(&self) -> CircuitState {
        match self.tag {
            0 => CircuitState::Closed { failures: self.failures },
            1 => CircuitState::Open { opened_at: self.since },
            _ => CircuitState::HalfOpen,
        }
    }
}

pub fn outcome(ok: bool) -> Outcome {
    if ok {
        Outcome::Success
    } else {
        Outcome::Failure
    }
}

/// Expected round-robin picks: walk a ring of ids, skipping unhealthy ones.
pub fn round_robin_oracle(ids: &[&str], healthy: &[bool], calls: usize, start: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut pos = start;
    for _ in 0..calls {
        let mut tries = 0;
        while !healthy[pos % ids.len()] {
            pos += 1;
            tries += 1;
            assert!(tries <= ids.len(), "no healthy instance");
        }
        out.push(ids[pos % ids.len()].to_string());
        pos += 1;
    }
    out
}

/// Status after each event of a heartbeat schedule: `Some(t)` is a heartbeat
/// at t, `None` a sweep at the running clock.
pub fn heartbeat_timeline(events: &[(u64, bool)], timeout: u64) -> Vec<bool> {
    let mut last = 0u64;
    let mut healthy = true;
    let mut out = Vec::new();
    for &(t, beat) in events {
        if beat {
            last = last.max(t);
        } else {
            healthy = t.saturating_sub(last) <= timeout;
        }
        out.push(healthy);
    }
    out
}

fn service_index(model: &SystemModel) -> HashMap<&str, &str> {
    let mut idx = HashMap::new();
    for s in &model.services {
        for m in &s.modules {
            idx.insert(m.as_str(), s.id.as_str());
        }
    }
    idx
}

/// Counter totals for a trace, by enumerating every simple business path
/// and picking the shortest one with the smallest module-id sequence.
pub fn path_count_metrics(model: &SystemModel, trace: &WorkloadTrace) -> Metrics {
    let svc = service_index(model);
    let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in model.edges.iter().filter(|e| e.adapter.is_none()) {
        out.entry(e.from.as_str()).or_default().push(e.to.as_str());
    }
    let adapter = |from: &str, table: &str, kind: AdapterKind| {
        model.edges.iter().find(|e| {
            e.from == from && e.adapter.as_ref().is_some_and(|a| a.kind == kind && a.table == table)
        })
    };
    let direct = |m: &str, t: &str| model.data_access.iter().any(|d| d.module == m && d.table == t);
    let serves = |m: &str, t: &str| direct(m, t) || adapter(m, t, AdapterKind::Proxy).is_some();
    let owner = |t: &str| model.tables.iter().find(|x| x.name == t).map(|x| x.owner_db.clone());

    let mut metrics = Metrics::default();
    for req in &trace.requests {
        let entry = model
            .endpoints
            .iter()
            .find(|e| e.path == req.endpoint)
            .map(|e| e.module.as_str())
            .expect("bound endpoint");
        let mut best: Option<Vec<&str>> = None;
        let mut stack: Vec<Vec<&str>> = vec![vec![entry]];
        while let Some(path) = stack.pop() {
            let last = *path.last().unwrap();
            if serves(last, &req.table) {
                let better = match &best {
                    None => true,
                    Some(b) => (path.len(), &path) < (b.len(), b),
                };
                if better {
                    best = Some(path.clone());
                }
                continue;
            }
            if best.as_ref().is_some_and(|b| path.len() >= b.len()) {
                continue;
            }
            for &n in out.get(last).map(Vec::as_slice).unwrap_or(&[]) {
                if !path.contains(&n) {
                    let mut p = path.clone();
                    p.push(n);
                    stack.push(p);
                }
            }
        }
        let Some(path) = best else { continue };
        for w in path.windows(2) {
            if svc.get(w[0]) == svc.get(w[1]) {
                metrics.local_calls += 1;
            } else {
                metrics.api_calls += 1;
            }
        }
        let mut at = *path.last().unwrap();
        loop {
            if direct(at, &req.table) {
                if adapter(at, &req.table, AdapterKind::Glue).is_some() {
                    metrics.glue_calls += 1;
                }
                metrics.db_calls += 1;
                break;
            }
            let hop = adapter(at, &req.table, AdapterKind::Proxy).expect("served");
            metrics.api_calls += 1;
            metrics.cross_boundary_api_calls += 1;
            at = hop.to.as_str();
        }
        if req.op == Op::Write {
            let t_owner = owner(&req.table);
            for db in &model.databases {
                if let Some(s) = &db.sync {
                    let live = s.mode == SyncMode::Syncing || s.mode == SyncMode::Converged;
                    if live && db.tables.contains(&req.table) && Some(&s.source_db) == t_owner.as_ref() {
                        metrics.db_calls += 1;
                    }
                }
            }
            for fk in &model.foreign_keys {
                if fk.from_table == req.table && fk.enforcement == Enforcement::BusinessLogicLayer {
                    metrics.db_calls += 1;
                    if owner(&fk.to_table) != t_owner {
                        metrics.api_calls += 1;
                        metrics.cross_boundary_api_calls += 1;
                    }
                }
            }
        }
    }
    metrics
}

/// Model after running the whole plan for `context`.
pub fn migrated(model: &SystemModel, context: &str, seed: u64) -> SystemModel {
    use stranglerkit_core::{generate_plan, Migrator, PlanOptions};
    let plan = generate_plan(model, context, &PlanOptions::default()).expect("plan");
    let mut mig = Migrator::new(model.clone(), stranglerkit_core::simulator::seed_log(model, seed, 4));
    for s in &plan.steps {
        mig.apply(s).expect("step applies");
    }
    mig.model
}

/// Add random boundary-crossing accesses and database-layer keys to an
/// isolated model. Returns the edited model and the violations injected.
pub fn inject_violations(
    model: &SystemModel,
    rng: &mut impl rand::Rng,
    count: usize,
) -> (SystemModel, BTreeSet<IsolationViolation>) {
    use stranglerkit_core::model::{DataAccess, Enforcement, ForeignKey};
    let mut m = model.clone();
    let mut injected = BTreeSet::new();
    let db_of_module = |m: &SystemModel, id: &str| {
        let svc = m.services.iter().find(|s| s.modules.iter().any(|x| x == id)).unwrap();
        (svc.id.clone(), svc.database.clone())
    };
    for i in 0..count * 4 {
        if injected.len() == count {
            break;
        }
        if rng.random_bool(0.5) {
            let module = m.modules[rng.random_range(0..m.modules.len())].id.clone();
            let table = m.tables[rng.random_range(0..m.tables.len())].clone();
            let (svc, db) = db_of_module(&m, &module);
            if db.as_deref() == Some(table.owner_db.as_str())
                || m.data_access.iter().any(|d| d.module == module && d.table == table.name)
            {
                continue;
            }
            m.data_access.push(DataAccess::new(&module, &table.name));
            injected.insert(IsolationViolation::DataAccess {
                module,
                table: table.name,
                module_service: svc,
                table_db: table.owner_db,
            });
        } else {
            let a = rng.random_range(0..m.tables.len());
            let b = rng.random_range(0..m.tables.len());
            if m.tables[a].owner_db == m.tables[b].owner_db {
                continue;
            }
            let column = format!("inj{i}_{}", m.tables[b].name);
            m.tables[a].columns.push(column.clone());
            let fk = ForeignKey {
                from_table: m.tables[a].name.clone(),
                from_column: column,
                to_table: m.tables[b].name.clone(),
                enforcement: Enforcement::DatabaseLayer,
            };
            injected.insert(IsolationViolation::ForeignKey {
                from_table: fk.from_table.clone(),
                from_column: fk.from_column.clone(),
                to_table: fk.to_table.clone(),
            });
            m.foreign_keys.push(fk);
        }
    }
    m.normalize();
    (m, injected)
}

pub fn change(seq: u64, table: &str, key: &str, op: ChangeOp, digest: &str) -> ChangeRecord {
    ChangeRecord {
        seq,
        table: table.into(),
        row_key: key.into(),
        op,
        row_digest: digest.into(),
    }
}

/// Calls `f` with every change log of length `0..=max_len` over tables
/// t0/t1, keys k0/k1 and all three ops. Entry i has seq i + 1.
pub fn for_each_small_log(max_len: usize, mut f: impl FnMut(&[ChangeRecord])) -> usize {
    let ops = [ChangeOp::Insert, ChangeOp::Update, ChangeOp::Delete];
    let choices: Vec<Vec<ChangeRecord>> = (0..max_len)
        .map(|i| {
            let mut v = Vec::new();
            for t in ["t0", "t1"] {
                for k in ["k0", "k1"] {
                    for op in ops {
                        v.push(change(i as u64 + 1, t, k, op, &format!("d{}", i + 1)));
                    }
                }
            }
            v
        })
        .collect();
    let mut count = 0;
    let mut log: Vec<ChangeRecord> = Vec::with_capacity(max_len);
    for len in 0..=max_len {
        let mut idx = vec![0usize; len];
        loop {
            log.clear();
            log.extend(idx.iter().enumerate().map(|(i, &c)| choices[i][c].clone()));
            f(&log);
            count += 1;
            let mut pos = 0;
            while pos < len {
                idx[pos] += 1;
                if idx[pos] < 12 {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
            if pos == len {
                break;
            }
        }
    }
    count
}

/// Drive a fresh breaker with one call every `dt` time units, call i
/// answering `outcomes[i]`, and compare every step with [`BreakerOracle`]:
/// state, whether the upstream ran, and what was served.
pub fn check_breaker_run(cfg: stranglerkit_core::BreakerConfig, dt: u64, outcomes: &[bool]) -> Result<(), String> {
    use std::sync::Arc;
    use stranglerkit_core::resilience::{record_outcome, CallFailure, Provenance};
    use stranglerkit_core::{Breaker, ManualClock};

    let clock = Arc::new(ManualClock::new(0));
    let breaker: Breaker<String> = Breaker::new(cfg, clock.clone());
    let mut oracle = BreakerOracle::new(cfg.failure_threshold, cfg.cooldown);
    let mut pure = CircuitState::default();
    let mut last_live: Option<String> = None;
    for (i, &ok) in outcomes.iter().enumerate() {
        let now = i as u64 * dt;
        clock.set(now);
        let mut invoked = false;
        let served = breaker.call_with_breaker("svc", 7, |_| {
            invoked = true;
            if ok {
                Ok(format!("r{i}"))
            } else {
                Err(CallFailure::Error("down".into()))
            }
        });
        let want_invoked = oracle.call(now, ok);
        if invoked != want_invoked {
            return Err(format!("call {i}: invoked {invoked}, oracle {want_invoked}"));
        }
        let (gate, admitted) = stranglerkit_core::resilience::admit(pure, now, &cfg);
        pure = match gate {
            stranglerkit_core::resilience::Gate::Pass { .. } => record_outcome(admitted, outcome(ok), now, &cfg),
            stranglerkit_core::resilience::Gate::Block => admitted,
        };
        let want_state = oracle.as_state();
        if breaker.state("svc") != want_state || pure != want_state {
            return Err(format!(
                "call {i}: breaker {:?}, pure {:?}, oracle {:?}",
                breaker.state("svc"),
                pure,
                want_state
            ));
        }
        let want = if invoked && ok {
            Some((format!("r{i}"), Provenance::Live))
        } else {
            last_live.clone().map(|r| (r, Provenance::Cached))
        };
        let got = served.ok().map(|s| (s.response, s.provenance));
        if got != want {
            return Err(format!("call {i}: served {got:?}, expected {want:?}"));
        }
        if invoked && ok {
            last_live = Some(format!("r{i}"));
        }
    }
    Ok(())
}

/// Every outcome string of length `0..=max_len`.
pub fn all_outcome_strings(max_len: usize) -> impl Iterator<Item = Vec<bool>> {
    (0..=max_len).flat_map(|len| (0u32..1 << len).map(move |bits| (0..len).map(|i| bits >> i & 1 == 1).collect()))
}

/// Models after each step of a plan, in order. Stops at the first step that
/// fails to apply.
pub fn models_along(
    model: &SystemModel,
    plan: &stranglerkit_core::MigrationPlan,
    seed: u64,
    rows: u32,
) -> Vec<SystemModel> {
    let log = stranglerkit_core::simulator::seed_log(model, seed, rows);
    let mut mig = stranglerkit_core::Migrator::new(model.clone(), log);
    let mut out = Vec::new();
    for s in &plan.steps {
        if mig.apply(s).is_err() {
            break;
        }
        out.push(mig.model.clone());
    }
    out
}

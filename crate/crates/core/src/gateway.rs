//! Routing gateway: prefix match, key-hash traffic shifting and a fixed
//! filter chain.
//!
//! A request whose key falls in bucket `b` (see [`crate::hash::bucket`]) goes
//! to the extracted target iff `b < shift_percent`. Raising the shift only
//! ever moves keys from legacy to extracted.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::{DiscoveryError, InstanceRecord, Registry};
use crate::hash::{bucket, DigestBuilder};
use crate::model::RouteEntry;
use crate::resilience::{Breaker, CallFailure, ResilienceError, Served};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub path: String,
    pub key: String,
    #[serde(default)]
    pub token: Option<String>,
}

impl Request {
    pub fn new(path: &str, key: &str) -> Self {
        Request {
            path: path.into(),
            key: key.into(),
            token: None,
        }
    }

    pub fn with_token(mut self, token: &str) -> Self {
        self.token = Some(token.into());
        self
    }

    /// Cache key for the result cache.
    pub fn digest(&self) -> u64 {
        DigestBuilder::new().field(&self.path).field(&self.key).finish_u64()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("no route matches {0}")]
    NoRouteMatched(String),
    #[error("unknown route {0}")]
    UnknownRoute(String),
    #[error("invalid shift percent {percent} for {prefix}")]
    InvalidPercent { prefix: String, percent: u32 },
    #[error("invalid route table: {0}")]
    InvalidTable(String),
    #[error("request rejected by filter {0}")]
    Unauthenticated(String),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Upstream(#[from] ResilienceError),
}

/// True when `prefix` covers `path` on segment boundaries.
pub fn prefix_matches(prefix: &str, path: &str) -> bool {
    if prefix == "/" {
        return path.starts_with('/');
    }
    let prefix = prefix.trim_end_matches('/');
    path == prefix || path.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('/'))
}

/// Immutable route table; updates produce a new table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouteTable {
    entries: Vec<RouteEntry>,
}

impl RouteTable {
    pub fn new(mut entries: Vec<RouteEntry>) -> Result<Self, GatewayError> {
        entries.sort_by(|a, b| a.path_prefix.cmp(&b.path_prefix));
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path_prefix.as_str()) {
                return Err(GatewayError::InvalidTable(format!("duplicate prefix {}", e.path_prefix)));
            }
            if !e.path_prefix.starts_with('/') {
                return Err(GatewayError::InvalidTable(format!("prefix {} must start with '/'", e.path_prefix)));
            }
            check_percent(e, u32::from(e.shift_percent))?;
        }
        Ok(RouteTable { entries })
    }

    pub fn entries(&self) -> &[RouteEntry] {
        &self.entries
    }

    /// Longest matching prefix.
    pub fn lookup(&self, path: &str) -> Option<&RouteEntry> {
        self.entries
            .iter()
            .filter(|e| prefix_matches(&e.path_prefix, path))
            .max_by_key(|e| e.path_prefix.trim_end_matches('/').len())
    }
}

fn check_percent(entry: &RouteEntry, percent: u32) -> Result<(), GatewayError> {
    if percent > 100 || (percent > 0 && entry.extracted_target.is_none()) {
        return Err(GatewayError::InvalidPercent {
            prefix: entry.path_prefix.clone(),
            percent,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub target: String,
    pub prefix: String,
    pub extracted: bool,
}

/// Target for `key` under one entry.
pub fn decide(entry: &RouteEntry, key: &str) -> RouteDecision {
    let extracted = entry.extracted_target.is_some() && bucket(key) < entry.shift_percent;
    RouteDecision {
        target: if extracted {
            entry.extracted_target.clone().expect("checked")
        } else {
            entry.legacy_target.clone()
        },
        prefix: entry.path_prefix.clone(),
        extracted,
    }
}

pub fn route(table: &RouteTable, request: &Request) -> Result<RouteDecision, GatewayError> {
    table
        .lookup(&request.path)
        .map(|e| decide(e, &request.key))
        .ok_or_else(|| GatewayError::NoRouteMatched(request.path.clone()))
}

/// Copy of `table` with one entry's shift changed.
pub fn set_shift(table: &RouteTable, prefix: &str, percent: u32) -> Result<RouteTable, GatewayError> {
    let mut next = table.clone();
    let entry = next
        .entries
        .iter_mut()
        .find(|e| e.path_prefix == prefix)
        .ok_or_else(|| GatewayError::UnknownRoute(prefix.into()))?;
    check_percent(entry, percent)?;
    entry.shift_percent = percent as u8;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "kebab-case")]
pub enum FilterBehavior {
    RequestLogging,
    MetricsCount,
    /// Stub bearer check: the request token must equal `token`.
    RejectUnauthenticated { token: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filter {
    pub name: String,
    pub phase: Phase,
    #[serde(flatten)]
    pub behavior: FilterBehavior,
}

impl Filter {
    pub fn new(name: &str, phase: Phase, behavior: FilterBehavior) -> Self {
        Filter {
            name: name.into(),
            phase,
            behavior,
        }
    }
}

#[derive(Debug, Default)]
pub struct GatewayMetrics {
    pub routed_legacy: AtomicU64,
    pub routed_extracted: AtomicU64,
    pub unrouted: AtomicU64,
    pub rejected: AtomicU64,
    pub requests_seen: AtomicU64,
    pub responses_seen: AtomicU64,
    pub upstream_errors: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub routed_legacy: u64,
    pub routed_extracted: u64,
    pub unrouted: u64,
    pub rejected: u64,
    pub requests_seen: u64,
    pub responses_seen: u64,
    pub upstream_errors: u64,
}

impl MetricsSnapshot {
    pub fn handled(&self) -> u64 {
        self.routed_legacy + self.routed_extracted + self.unrouted + self.rejected
    }
}

impl GatewayMetrics {
    pub fn snapshot(&self) -> MetricsSnapshot {
        let g = |c: &AtomicU64| c.load(Ordering::SeqCst);
        MetricsSnapshot {
            routed_legacy: g(&self.routed_legacy),
            routed_extracted: g(&self.routed_extracted),
            unrouted: g(&self.unrouted),
            rejected: g(&self.rejected),
            requests_seen: g(&self.requests_seen),
            responses_seen: g(&self.responses_seen),
            upstream_errors: g(&self.upstream_errors),
        }
    }
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::SeqCst);
}

pub type FilterObserver = Arc<dyn Fn(&Filter, &Request) + Send + Sync>;

/// A routed request with its chosen upstream instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dispatch {
    pub decision: RouteDecision,
    pub instance: InstanceRecord,
    pub digest: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handled<R> {
    pub decision: RouteDecision,
    pub instance_id: String,
    pub served: Served<R>,
}

pub struct Gateway<R> {
    table: RwLock<Arc<RouteTable>>,
    filters: Vec<Filter>,
    metrics: GatewayMetrics,
    registry: Arc<Registry>,
    breaker: Arc<Breaker<R>>,
    observer: Option<FilterObserver>,
}

impl<R: Clone> Gateway<R> {
    pub fn new(table: RouteTable, filters: Vec<Filter>, registry: Arc<Registry>, breaker: Arc<Breaker<R>>) -> Self {
        Gateway {
            table: RwLock::new(Arc::new(table)),
            filters,
            metrics: GatewayMetrics::default(),
            registry,
            breaker,
            observer: None,
        }
    }

    /// Called for every filter as it runs, in order.
    pub fn with_observer(mut self, observer: FilterObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn table(&self) -> Arc<RouteTable> {
        self.table.read().unwrap().clone()
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn breaker(&self) -> &Arc<Breaker<R>> {
        &self.breaker
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    /// Swap in a table with one shift changed. Concurrent requests see either
    /// the old or the new table.
    pub fn set_shift(&self, prefix: &str, percent: u32) -> Result<RouteEntry, GatewayError> {
        let mut guard = self.table.write().unwrap();
        let next = set_shift(&guard, prefix, percent)?;
        let entry = next
            .entries()
            .iter()
            .find(|e| e.path_prefix == prefix)
            .cloned()
            .expect("just updated");
        *guard = Arc::new(next);
        Ok(entry)
    }

    fn run_filters(&self, phase: Phase, request: &Request, outcome: &str) -> Result<(), GatewayError> {
        for f in self.filters.iter().filter(|f| f.phase == phase) {
            if let Some(obs) = &self.observer {
                obs(f, request);
            }
            match (&f.behavior, phase) {
                (FilterBehavior::RequestLogging, Phase::Pre) => log::info!("{} {} key={}", f.name, request.path, request.key),
                (FilterBehavior::RequestLogging, Phase::Post) => log::info!("{} {} -> {outcome}", f.name, request.path),
                (FilterBehavior::MetricsCount, Phase::Pre) => bump(&self.metrics.requests_seen),
                (FilterBehavior::MetricsCount, Phase::Post) => bump(&self.metrics.responses_seen),
                (FilterBehavior::RejectUnauthenticated { token }, Phase::Pre) => {
                    if request.token.as_deref() != Some(token.as_str()) {
                        return Err(GatewayError::Unauthenticated(f.name.clone()));
                    }
                }
                (FilterBehavior::RejectUnauthenticated { .. }, Phase::Post) => {}
            }
        }
        Ok(())
    }

    /// Pre filters, routing and instance selection. Counts the request in
    /// exactly one of the four routing counters.
    pub fn prepare(&self, request: &Request) -> Result<Dispatch, GatewayError> {
        if let Err(e) = self.run_filters(Phase::Pre, request, "") {
            bump(&self.metrics.rejected);
            return Err(e);
        }
        let decision = match route(&self.table(), request) {
            Ok(d) => d,
            Err(e) => {
                bump(&self.metrics.unrouted);
                return Err(e);
            }
        };
        bump(if decision.extracted {
            &self.metrics.routed_extracted
        } else {
            &self.metrics.routed_legacy
        });
        let instance = self.registry.next_instance(&decision.target)?;
        Ok(Dispatch {
            decision,
            instance,
            digest: request.digest(),
        })
    }

    /// Post filters.
    pub fn finish<T>(&self, request: &Request, result: &Result<T, GatewayError>) {
        let outcome = match result {
            Ok(_) => "ok".to_string(),
            Err(e) => {
                if matches!(e, GatewayError::Upstream(_) | GatewayError::Discovery(_)) {
                    bump(&self.metrics.upstream_errors);
                }
                e.to_string()
            }
        };
        let _ = self.run_filters(Phase::Post, request, &outcome);
    }

    /// Full synchronous request path.
    pub fn handle<F>(&self, request: &Request, upstream: F) -> Result<Handled<R>, GatewayError>
    where
        F: FnOnce(&InstanceRecord, &Request, u64) -> Result<R, CallFailure>,
    {
        let result = self.prepare(request).and_then(|d| {
            let served = self
                .breaker
                .call_with_breaker(&d.decision.target, d.digest, |timeout| upstream(&d.instance, request, timeout))?;
            Ok(Handled {
                decision: d.decision,
                instance_id: d.instance.instance_id,
                served,
            })
        });
        if !matches!(result, Err(GatewayError::Unauthenticated(_))) {
            self.finish(request, &result);
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(prefix: &str, shift: u8, extracted: bool) -> RouteEntry {
        RouteEntry {
            path_prefix: prefix.into(),
            legacy_target: "mono".into(),
            extracted_target: extracted.then(|| "svc".to_string()),
            shift_percent: shift,
        }
    }

    #[test]
    fn segment_prefixes() {
        assert!(prefix_matches("/a", "/a/orders"));
        assert!(prefix_matches("/a", "/a"));
        assert!(!prefix_matches("/a", "/ab"));
        assert!(prefix_matches("/", "/anything"));
    }

    #[test]
    fn longest_prefix_wins() {
        let t = RouteTable::new(vec![entry("/", 0, false), entry("/a", 100, true)]).unwrap();
        assert_eq!(route(&t, &Request::new("/a/x", "k")).unwrap().target, "svc");
        assert_eq!(route(&t, &Request::new("/b", "k")).unwrap().target, "mono");
    }

    #[test]
    fn no_match() {
        let t = RouteTable::new(vec![entry("/a", 0, false)]).unwrap();
        assert!(matches!(route(&t, &Request::new("/b", "k")), Err(GatewayError::NoRouteMatched(_))));
    }

    #[test]
    fn shift_guards() {
        let t = RouteTable::new(vec![entry("/a", 0, false), entry("/b", 0, true)]).unwrap();
        assert!(matches!(set_shift(&t, "/a", 50), Err(GatewayError::InvalidPercent { .. })));
        assert!(matches!(set_shift(&t, "/b", 101), Err(GatewayError::InvalidPercent { .. })));
        assert!(matches!(set_shift(&t, "/c", 1), Err(GatewayError::UnknownRoute(_))));
        assert_eq!(set_shift(&t, "/b", 0).unwrap(), t);
    }

    #[test]
    fn key_bucket_examples() {
        // bucket("a") = 96, bucket("") = 37.
        let e = entry("/", 50, true);
        assert!(!decide(&e, "a").extracted);
        assert!(decide(&e, "").extracted);
    }
}

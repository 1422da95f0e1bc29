//! Per-service circuit breaker with a last-good-result cache.
//!
//! ```text
//!            failure (< threshold)
//!            +-----+
//!            v     |
//!   Closed(n) -----+--- failure (n+1 == threshold) ---> Open(t)
//!      ^                                                 |
//!      | success                        cooldown elapsed |
//!      +------------------- HalfOpen <-------------------+
//!                              |
//!                              +--- failure ---> Open(now)
//! ```
//!
//! The transition rules live in [`record_outcome`] and [`admit`]; the
//! [`Breaker`] only adds locking, the result cache and counters.

use std::collections::BTreeMap;
use std::hash::Hash;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum CircuitState {
    Closed { failures: u32 },
    Open { opened_at: u64 },
    HalfOpen,
}

impl Default for CircuitState {
    fn default() -> Self {
        CircuitState::Closed { failures: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakerConfig {
    pub failure_threshold: u32,
    pub cooldown: u64,
    pub call_timeout: u64,
    pub cache_capacity: usize,
}

impl Default for BreakerConfig {
    fn default() -> Self {
        BreakerConfig {
            failure_threshold: 5,
            cooldown: 30,
            call_timeout: 2,
            cache_capacity: 1024,
        }
    }
}

/// Whether a call may go upstream now, and the state after deciding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    /// Invoke the upstream; `probe` is set for the single HalfOpen trial.
    Pass { probe: bool },
    /// Short-circuit without touching the upstream.
    Block,
}

/// Admission decision. An Open circuit whose cooldown has elapsed becomes
/// HalfOpen and lets exactly this call through as the probe; while the probe
/// is outstanding the circuit is HalfOpen and every other call is blocked.
pub fn admit(state: CircuitState, now: u64, config: &BreakerConfig) -> (Gate, CircuitState) {
    match state {
        CircuitState::Closed { .. } => (Gate::Pass { probe: false }, state),
        CircuitState::Open { opened_at } if now.saturating_sub(opened_at) >= config.cooldown => {
            (Gate::Pass { probe: true }, CircuitState::HalfOpen)
        }
        CircuitState::Open { .. } | CircuitState::HalfOpen => (Gate::Block, state),
    }
}

/// State after an admitted call finished with `outcome` at time `now`.
pub fn record_outcome(state: CircuitState, outcome: Outcome, now: u64, config: &BreakerConfig) -> CircuitState {
    match (state, outcome) {
        (CircuitState::Closed { .. } | CircuitState::HalfOpen, Outcome::Success) => CircuitState::Closed { failures: 0 },
        (CircuitState::Closed { failures }, Outcome::Failure) => {
            if failures + 1 >= config.failure_threshold {
                CircuitState::Open { opened_at: now }
            } else {
                CircuitState::Closed { failures: failures + 1 }
            }
        }
        (CircuitState::HalfOpen, Outcome::Failure) => CircuitState::Open { opened_at: now },
        // Late result of a call admitted before the circuit opened.
        (CircuitState::Open { .. }, _) => state,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Live,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Served<R> {
    pub response: R,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallFailure {
    #[error("upstream call timed out")]
    Timeout,
    #[error("upstream error: {0}")]
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResilienceError {
    #[error("upstream {service} failed and no cached response exists: {reason}")]
    UpstreamFailure { service: String, reason: String },
}

/// Ticket for an admitted call. Hand it back to [`Breaker::complete`].
#[derive(Debug)]
#[must_use]
pub struct Permit {
    pub service: String,
    pub probe: bool,
    pub started_at: u64,
}

#[derive(Debug)]
pub enum Admission {
    Call(Permit),
    Blocked,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakerStats {
    pub live_calls: u64,
    pub failures: u64,
    pub short_circuits: u64,
    pub cache_hits: u64,
    pub opened: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSnapshot {
    pub circuit: CircuitState,
    #[serde(flatten)]
    pub stats: BreakerStats,
}

#[derive(Debug, Default)]
struct Slot {
    state: CircuitState,
    stats: BreakerStats,
}

/// Thread-safe breaker set keyed by service id, with an LRU cache of the
/// last successful response per (service, request digest).
pub struct Breaker<R> {
    config: BreakerConfig,
    clock: Arc<dyn Clock>,
    slots: Mutex<BTreeMap<String, Slot>>,
    cache: Mutex<LruCache<(String, u64), R>>,
}

impl<R: Clone> Breaker<R> {
    pub fn new(config: BreakerConfig, clock: Arc<dyn Clock>) -> Self {
        let cap = NonZeroUsize::new(config.cache_capacity.max(1)).expect("positive");
        Breaker {
            config,
            clock,
            slots: Mutex::new(BTreeMap::new()),
            cache: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn config(&self) -> &BreakerConfig {
        &self.config
    }

    pub fn state(&self, service: &str) -> CircuitState {
        self.slots
            .lock()
            .unwrap()
            .get(service)
            .map(|s| s.state)
            .unwrap_or_default()
    }

    pub fn snapshot(&self) -> BTreeMap<String, ServiceSnapshot> {
        self.slots
            .lock()
            .unwrap()
            .iter()
            .map(|(k, s)| {
                (
                    k.clone(),
                    ServiceSnapshot {
                        circuit: s.state,
                        stats: s.stats.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn admit(&self, service: &str) -> Admission {
        let now = self.clock.now();
        let mut slots = self.slots.lock().unwrap();
        let slot = slots.entry(service.to_string()).or_default();
        let (gate, next) = admit(slot.state, now, &self.config);
        slot.state = next;
        match gate {
            Gate::Pass { probe } => {
                slot.stats.live_calls += 1;
                Admission::Call(Permit {
                    service: service.to_string(),
                    probe,
                    started_at: now,
                })
            }
            Gate::Block => {
                slot.stats.short_circuits += 1;
                Admission::Blocked
            }
        }
    }

    /// Record the result of an admitted call. Successes slower than
    /// `call_timeout` count as failures. Failures fall back to the cache.
    pub fn complete(
        &self,
        permit: Permit,
        digest: u64,
        result: Result<R, CallFailure>,
    ) -> Result<Served<R>, ResilienceError> {
        let now = self.clock.now();
        let result = match result {
            Ok(_) if now.saturating_sub(permit.started_at) > self.config.call_timeout => Err(CallFailure::Timeout),
            other => other,
        };
        let outcome = if result.is_ok() { Outcome::Success } else { Outcome::Failure };
        {
            let mut slots = self.slots.lock().unwrap();
            let slot = slots.entry(permit.service.clone()).or_default();
            // A probe result always lands on HalfOpen; other late results
            // apply to whatever the state is now.
            let base = if permit.probe { CircuitState::HalfOpen } else { slot.state };
            let next = record_outcome(base, outcome, now, &self.config);
            if outcome == Outcome::Failure {
                slot.stats.failures += 1;
                if matches!(next, CircuitState::Open { .. }) && !matches!(slot.state, CircuitState::Open { .. }) {
                    slot.stats.opened += 1;
                }
            }
            slot.state = next;
        }
        match result {
            Ok(response) => {
                self.cache
                    .lock()
                    .unwrap()
                    .put((permit.service, digest), response.clone());
                Ok(Served {
                    response,
                    provenance: Provenance::Live,
                })
            }
            Err(e) => self.fallback(&permit.service, digest, &e.to_string()),
        }
    }

    /// Serve the cached response for a blocked or failed call.
    pub fn fallback(&self, service: &str, digest: u64, reason: &str) -> Result<Served<R>, ResilienceError> {
        let cached = self.cache.lock().unwrap().get(&(service.to_string(), digest)).cloned();
        match cached {
            Some(response) => {
                if let Some(slot) = self.slots.lock().unwrap().get_mut(service) {
                    slot.stats.cache_hits += 1;
                }
                Ok(Served {
                    response,
                    provenance: Provenance::Cached,
                })
            }
            None => Err(ResilienceError::UpstreamFailure {
                service: service.to_string(),
                reason: reason.to_string(),
            }),
        }
    }

    /// Call `upstream` through the breaker. The closure receives the call
    /// timeout in time units and is never invoked while the circuit blocks.
    pub fn call_with_breaker<F>(&self, service: &str, digest: u64, upstream: F) -> Result<Served<R>, ResilienceError>
    where
        F: FnOnce(u64) -> Result<R, CallFailure>,
    {
        match self.admit(service) {
            Admission::Call(permit) => {
                let result = upstream(self.config.call_timeout);
                self.complete(permit, digest, result)
            }
            Admission::Blocked => self.fallback(service, digest, "circuit open"),
        }
    }
}

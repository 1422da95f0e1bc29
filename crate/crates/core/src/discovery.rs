//! In-process service registry with heartbeat health checks and round-robin
//! selection.
//!
//! Every operation takes one lock, so the registry is linearizable. The
//! round-robin cursor remembers the registration position of the last
//! instance handed out; the next call picks the first healthy instance
//! registered after it, wrapping around. Removing instances therefore never
//! resets the rotation.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Healthy,
    Unhealthy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub service_id: String,
    pub instance_id: String,
    pub address: String,
    pub last_heartbeat: u64,
    pub status: Health,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusChange {
    pub service_id: String,
    pub instance_id: String,
    pub status: Health,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiscoveryError {
    #[error("instance {instance} is already registered for {service}")]
    DuplicateInstance { service: String, instance: String },
    #[error("no instance {instance} registered for {service}")]
    UnknownInstance { service: String, instance: String },
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("no healthy instance of {0}")]
    NoHealthyInstance(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryConfig {
    pub heartbeat_interval: u64,
    pub missed_beats: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            heartbeat_interval: 10,
            missed_beats: 3,
        }
    }
}

impl RegistryConfig {
    pub fn timeout(&self) -> u64 {
        self.heartbeat_interval * self.missed_beats
    }
}

#[derive(Debug, Clone)]
struct Slot {
    order: u64,
    record: InstanceRecord,
}

#[derive(Debug, Default)]
struct ServiceEntry {
    instances: Vec<Slot>,
    cursor: Option<u64>,
    next_order: u64,
}

pub struct Registry {
    clock: Arc<dyn Clock>,
    config: RegistryConfig,
    services: Mutex<BTreeMap<String, ServiceEntry>>,
}

impl Registry {
    pub fn new(clock: Arc<dyn Clock>, config: RegistryConfig) -> Self {
        Registry {
            clock,
            config,
            services: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> RegistryConfig {
        self.config
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn register(&self, service: &str, instance: &str, address: &str) -> Result<InstanceRecord, DiscoveryError> {
        let now = self.clock.now();
        let mut services = self.services.lock().unwrap();
        let entry = services.entry(service.to_string()).or_default();
        if entry.instances.iter().any(|s| s.record.instance_id == instance) {
            return Err(DiscoveryError::DuplicateInstance {
                service: service.into(),
                instance: instance.into(),
            });
        }
        let record = InstanceRecord {
            service_id: service.into(),
            instance_id: instance.into(),
            address: address.into(),
            last_heartbeat: now,
            status: Health::Healthy,
        };
        entry.instances.push(Slot {
            order: entry.next_order,
            record: record.clone(),
        });
        entry.next_order += 1;
        Ok(record)
    }

    pub fn deregister(&self, service: &str, instance: &str) -> Result<(), DiscoveryError> {
        let mut services = self.services.lock().unwrap();
        let entry = services.get_mut(service).ok_or_else(|| unknown(service, instance))?;
        let before = entry.instances.len();
        entry.instances.retain(|s| s.record.instance_id != instance);
        if entry.instances.len() == before {
            return Err(unknown(service, instance));
        }
        Ok(())
    }

    /// Record a heartbeat at `at`. Status is only re-evaluated by [`sweep`](Self::sweep).
    pub fn heartbeat(&self, service: &str, instance: &str, at: u64) -> Result<(), DiscoveryError> {
        let mut services = self.services.lock().unwrap();
        let slot = services
            .get_mut(service)
            .and_then(|e| e.instances.iter_mut().find(|s| s.record.instance_id == instance))
            .ok_or_else(|| unknown(service, instance))?;
        slot.record.last_heartbeat = slot.record.last_heartbeat.max(at);
        Ok(())
    }

    pub fn heartbeat_now(&self, service: &str, instance: &str) -> Result<(), DiscoveryError> {
        self.heartbeat(service, instance, self.clock.now())
    }

    /// Mark instances silent for longer than the timeout unhealthy and the
    /// others healthy. Returns only the records whose status changed.
    pub fn sweep(&self, now: u64) -> Vec<StatusChange> {
        let timeout = self.config.timeout();
        let mut changes = Vec::new();
        let mut services = self.services.lock().unwrap();
        for entry in services.values_mut() {
            for slot in &mut entry.instances {
                let r = &mut slot.record;
                let status = if now.saturating_sub(r.last_heartbeat) > timeout {
                    Health::Unhealthy
                } else {
                    Health::Healthy
                };
                if status != r.status {
                    r.status = status;
                    changes.push(StatusChange {
                        service_id: r.service_id.clone(),
                        instance_id: r.instance_id.clone(),
                        status,
                    });
                }
            }
        }
        changes
    }

    pub fn sweep_now(&self) -> Vec<StatusChange> {
        self.sweep(self.clock.now())
    }

    /// Instances of a service in registration order.
    pub fn instances(&self, service: &str) -> Result<Vec<InstanceRecord>, DiscoveryError> {
        let services = self.services.lock().unwrap();
        let entry = services
            .get(service)
            .ok_or_else(|| DiscoveryError::UnknownService(service.into()))?;
        Ok(entry.instances.iter().map(|s| s.record.clone()).collect())
    }

    pub fn services(&self) -> Vec<String> {
        self.services.lock().unwrap().keys().cloned().collect()
    }

    /// Next healthy instance in round-robin order.
    pub fn next_instance(&self, service: &str) -> Result<InstanceRecord, DiscoveryError> {
        let mut services = self.services.lock().unwrap();
        let entry = services
            .get_mut(service)
            .ok_or_else(|| DiscoveryError::UnknownService(service.into()))?;
        let healthy = || entry.instances.iter().filter(|s| s.record.status == Health::Healthy);
        let chosen = match entry.cursor {
            Some(c) => healthy().find(|s| s.order > c).or_else(|| healthy().next()),
            None => healthy().next(),
        }
        .ok_or_else(|| DiscoveryError::NoHealthyInstance(service.into()))?;
        let (order, record) = (chosen.order, chosen.record.clone());
        entry.cursor = Some(order);
        Ok(record)
    }
}

fn unknown(service: &str, instance: &str) -> DiscoveryError {
    DiscoveryError::UnknownInstance {
        service: service.into(),
        instance: instance.into(),
    }
}

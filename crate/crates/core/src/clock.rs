//! Injected time source. All timestamps are integer "time units".

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

/// Clock moved only by the caller. Used by tests and the simulator.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start: u64) -> Self {
        ManualClock {
            now: AtomicU64::new(start),
        }
    }

    pub fn set(&self, t: u64) {
        self.now.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, dt: u64) -> u64 {
        self.now.fetch_add(dt, Ordering::SeqCst) + dt
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

/// Monotonic wall clock counting whole units of `unit` since creation.
#[derive(Debug)]
pub struct MonotonicClock {
    start: Instant,
    unit: Duration,
}

impl MonotonicClock {
    pub fn new(unit: Duration) -> Self {
        assert!(!unit.is_zero(), "time unit must be positive");
        MonotonicClock {
            start: Instant::now(),
            unit,
        }
    }

    pub fn unit(&self) -> Duration {
        self.unit
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> u64 {
        (self.start.elapsed().as_nanos() / self.unit.as_nanos()) as u64
    }
}

//! Toolkit for migrating a modelled monolith to services with the strangler
//! fig pattern: coupling analysis, migration plans, database decomposition,
//! a trace simulator, and the runtime pieces of the migrated system (routing
//! gateway, service registry, circuit breaker).

pub mod analysis;
pub mod clock;
pub mod dbsplit;
pub mod discovery;
pub mod gateway;
pub mod hash;
pub mod model;
pub mod planner;
pub mod resilience;
pub mod simulator;
pub mod synth;

pub use analysis::{
    build_context_graph, build_context_graph_with, coupling_scores, infer_contexts, rank_candidates, ContextGraph,
    CouplingScore, InferOptions, Weighting,
};
pub use clock::{Clock, ManualClock, MonotonicClock};
pub use dbsplit::{ChangeOp, ChangeRecord, DbSplitError, IsolationViolation, RowStore};
pub use discovery::{DiscoveryError, Health, InstanceRecord, Registry, RegistryConfig};
pub use gateway::{Filter, FilterBehavior, Gateway, GatewayError, Phase, Request, RouteDecision, RouteTable};
pub use hash::{bucket, fnv1a64};
pub use model::{
    load_model, load_trace, serialize_model, validate, ModelError, Op, RouteEntry, Rule, SyncMode, SyncState,
    SystemModel, TraceRequest, ValidationReport, WorkloadTrace,
};
pub use planner::{
    apply_step, generate_plan, Faults, Journal, MigrationPlan, MigrationStep, Migrator, PlanError, PlanOptions,
    StepKind,
};
pub use resilience::{Breaker, BreakerConfig, CallFailure, CircuitState, Outcome, Provenance, ResilienceError};
pub use simulator::{
    equivalence_check, execute_trace, run_migration, ExecutionReport, Metrics, MigrationReport, SimError, Verdict,
};

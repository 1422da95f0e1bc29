mod oracles;

use proptest::prelude::*;
use stranglerkit_core::dbsplit::verify_isolation;
use stranglerkit_core::model::{AdapterKind, CallKind, ServiceRole};
use stranglerkit_core::planner::{apply_step, check_plan, FRONTEND_SERVICE};
use stranglerkit_core::simulator::seed_log;
use stranglerkit_core::{
    generate_plan, load_model, synth, validate, MigrationStep, Migrator, PlanError, PlanOptions, StepKind,
    SystemModel,
};

use oracles::{fixture, pairwise_order_violations};

fn fig3() -> SystemModel {
    load_model(&fixture("fig3.model")).unwrap()
}

fn step(id: u32, kind: StepKind) -> MigrationStep {
    MigrationStep { id, kind }
}

fn non_frontend_services(m: &SystemModel) -> usize {
    m.services.iter().filter(|s| s.role != ServiceRole::Frontend).count()
}

#[test]
fn fixture_plan_shape() {
    let plan = generate_plan(&fig3(), "A", &PlanOptions::default()).unwrap();
    let names: Vec<String> = plan.steps.iter().map(|s| s.kind.to_string()).collect();
    assert_eq!(
        names,
        [
            "FreezeMonolith",
            "SplitFrontend",
            "ExtractService(A)",
            "AddGlueCode(A)",
            "AddGatewayRoute(/a, A)",
            "MirrorTables(A)",
            "StartSync(A)",
            "Cutover(A)",
            "ShiftTraffic(/a, 10)",
            "ShiftTraffic(/a, 50)",
            "ShiftTraffic(/a, 100)",
            "RemoveGlue(A)",
        ]
    );
    assert!(check_plan(&plan).is_empty());
    assert!(plan.steps.iter().enumerate().all(|(i, s)| s.id == i as u32 + 1));
}

#[test]
fn plans_pass_the_pairwise_checker() {
    let mut checked = 0;
    for seed in 0..100 {
        let m = synth::random_model(seed);
        for ctx in m.contexts() {
            let plan = generate_plan(&m, &ctx, &PlanOptions::default()).unwrap();
            assert_eq!(pairwise_order_violations(&plan.steps), vec![], "seed {seed} {ctx}");
            let cutovers = plan.steps.iter().filter(|s| matches!(s.kind, StepKind::Cutover { .. })).count();
            assert!(cutovers <= 1);
            checked += 1;
        }
    }
    assert!(checked >= 100);
}

#[test]
fn extract_after_freeze_turns_crossing_edges_into_api_calls() {
    let m = fig3();
    let frozen = apply_step(&m, &step(1, StepKind::FreezeMonolith {})).unwrap();
    let out = apply_step(&frozen, &step(2, StepKind::ExtractService { context: "A".into() })).unwrap();
    assert_eq!(out.services.len(), 2);
    let ctx = |id: &str| m.module(id).unwrap().context.clone();
    let mut crossing = 0;
    for e in &out.edges {
        let across = (ctx(&e.from) == "A") != (ctx(&e.to) == "A");
        if across {
            crossing += 1;
            assert_eq!(e.kind, CallKind::Api, "{} -> {}", e.from, e.to);
        } else {
            assert_eq!(e.kind, CallKind::Local, "{} -> {}", e.from, e.to);
        }
    }
    assert_eq!(crossing, 1);
}

#[test]
fn extract_requires_freeze() {
    let err = apply_step(&fig3(), &step(1, StepKind::ExtractService { context: "A".into() })).unwrap_err();
    assert!(matches!(err, PlanError::PreconditionFailed(_)), "{err}");
}

#[test]
fn freeze_twice_is_a_no_op() {
    let once = apply_step(&fig3(), &step(1, StepKind::FreezeMonolith {})).unwrap();
    let twice = apply_step(&once, &step(1, StepKind::FreezeMonolith {})).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn context_without_tables_skips_database_steps() {
    let mut m = fig3();
    m.data_access.retain(|d| !d.module.starts_with("A-"));
    m.tables.iter_mut().for_each(|t| {
        if t.lifecycle_owner.as_deref() == Some("A") {
            t.lifecycle_owner = None;
        }
    });
    m.normalize();
    let plan = generate_plan(&m, "A", &PlanOptions::default()).unwrap();
    assert!(plan.steps.iter().all(|s| !matches!(
        s.kind,
        StepKind::MirrorTables { .. } | StepKind::StartSync { .. } | StepKind::Cutover { .. }
    )));
    assert_eq!(plan.steps.len(), 9);
}

#[test]
fn plan_errors() {
    let m = fig3();
    assert_eq!(
        generate_plan(&m, "Z", &PlanOptions::default()),
        Err(PlanError::UnknownContext("Z".into()))
    );
    let plan = generate_plan(&m, "A", &PlanOptions::default()).unwrap();
    let mut mig = Migrator::new(m.clone(), seed_log(&m, 0, 4));
    for s in &plan.steps[..3] {
        mig.apply(s).unwrap();
    }
    assert_eq!(
        generate_plan(&mig.model, "A", &PlanOptions::default()),
        Err(PlanError::AlreadyExtracted("A".into()))
    );
    assert!(matches!(
        mig.rollback(&plan.steps[0]),
        Err(PlanError::NotLastApplied(_))
    ));
    assert!(matches!(mig.apply(&plan.steps[1]), Err(PlanError::OutOfOrder { .. })));
}

#[test]
fn full_fixture_plan_ends_isolated() {
    let m = fig3();
    let plan = generate_plan(&m, "A", &PlanOptions::default()).unwrap();
    let mut mig = Migrator::new(m.clone(), seed_log(&m, 1, 6));
    for s in &plan.steps {
        mig.apply(s).unwrap();
    }
    assert!(validate(&mig.model).is_empty());
    assert!(verify_isolation(&mig.model).is_empty());
    assert!(mig.model.glue.is_empty());
    assert_eq!(non_frontend_services(&mig.model), non_frontend_services(&m) + 1);
    assert!(mig.model.service(FRONTEND_SERVICE).is_some());
}

#[test]
fn rollback_of_every_prefix_restores_the_original() {
    for seed in 0..50 {
        let m = synth::random_model(seed);
        let ctx = m.contexts().into_iter().last().unwrap();
        let plan = generate_plan(&m, &ctx, &PlanOptions::default()).unwrap();
        for k in 1..=plan.steps.len() {
            let mut mig = Migrator::new(m.clone(), seed_log(&m, seed, 4));
            for s in &plan.steps[..k] {
                mig.apply(s).unwrap();
            }
            for s in plan.steps[..k].iter().rev() {
                mig.rollback(s).unwrap();
            }
            assert_eq!(mig.model, m, "seed {seed} prefix {k}");
            assert_eq!(mig.rollback_last(), Err(PlanError::NothingToRollback));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn apply_never_mutates_its_input(seed in 0u64..1000, k in 0usize..20) {
        let m = synth::random_model(seed);
        let ctx = m.contexts().into_iter().next().unwrap();
        let plan = generate_plan(&m, &ctx, &PlanOptions::default()).unwrap();
        let mut mig = Migrator::new(m.clone(), seed_log(&m, seed, 4));
        for s in plan.steps.iter().take(k.min(plan.steps.len() - 1)) {
            mig.apply(s).unwrap();
        }
        let before = mig.model.clone();
        let next = &plan.steps[mig.journal.entries.len()];
        if !matches!(next.kind, StepKind::Cutover { .. }) {
            let _ = apply_step(&before, next);
            prop_assert_eq!(&before, &mig.model);
        }
        let _ = mig.preview(next);
        prop_assert_eq!(&before, &mig.model);
    }

    #[test]
    fn journal_stays_a_valid_prefix(seed in 0u64..1000, picks in prop::collection::vec(0usize..20, 1..30)) {
        let m = synth::random_model(seed);
        let ctx = m.contexts().into_iter().next().unwrap();
        let plan = generate_plan(&m, &ctx, &PlanOptions::default()).unwrap();
        let mut mig = Migrator::new(m.clone(), seed_log(&m, seed, 4));
        for p in picks {
            // Random step from the plan, applied or rejected.
            let s = &plan.steps[p % plan.steps.len()];
            let _ = mig.apply(s);
            prop_assert!(pairwise_order_violations(&mig.journal.applied()).is_empty());
        }
    }

    #[test]
    fn completed_plan_adds_one_service_and_drops_glue(seed in 0u64..1000) {
        let m = synth::random_model(seed);
        for ctx in m.contexts() {
            let plan = generate_plan(&m, &ctx, &PlanOptions::default()).unwrap();
            let mut mig = Migrator::new(m.clone(), seed_log(&m, seed, 4));
            for s in &plan.steps {
                mig.apply(s).unwrap();
            }
            prop_assert_eq!(non_frontend_services(&mig.model), non_frontend_services(&m) + 1);
            let svc = mig.model.service(&format!("svc-{}", ctx.to_lowercase())).unwrap();
            let glue_left = mig.model.edges.iter().any(|e| {
                matches!(e.adapter.as_ref().map(|a| a.kind), Some(AdapterKind::Glue | AdapterKind::GlueReply))
                    && (svc.modules.contains(&e.from) || svc.modules.contains(&e.to))
            });
            prop_assert!(!glue_left);
            prop_assert!(mig.model.glue.iter().all(|g| g.context != ctx));
            prop_assert!(verify_isolation(&mig.model).is_empty());
        }
    }
}

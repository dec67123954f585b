use super::*;
use crate::data::SyntheticSpec;

fn toy(domains: usize, classes: usize) -> Dataset {
    SyntheticSpec::toy(domains, classes, 8, 40, 1.0, 5).generate().unwrap()
}

fn disease_plan(groups: &[&[u32]], epochs: usize) -> IncrementPlan {
    let increments = groups
        .iter()
        .map(|g| {
            let mut inc = IncrementSpec::new(
                IncrementKind::Disease,
                g.iter().map(|&c| ClassId(c)).collect(),
                DomainId(0),
            );
            inc.epochs = epochs;
            inc.new_fraction = 1.0;
            inc
        })
        .collect();
    IncrementPlan {
        increments,
        hidden: vec![16, 8],
        seed: 3,
        ..IncrementPlan::default()
    }
}

#[test]
fn two_increments_grow_head_to_four() {
    let data = toy(1, 4);
    let out = run_plan(&disease_plan(&[&[0, 1], &[2, 3]], 3), &data, Arm::WithMd).unwrap();
    assert_eq!(out.logs.len(), 2);
    assert_eq!((out.logs[0].head_before, out.logs[0].head_after), (0, 2));
    assert_eq!((out.logs[1].head_before, out.logs[1].head_after), (2, 4));
    assert_eq!(out.state.head.len(), 4);
    let ev = &out.logs[1].evaluation;
    assert_eq!(ev.per_class.len(), 4);
    assert!(ev.old_class_accuracy.is_some());
    assert!(out.logs[0].evaluation.old_class_accuracy.is_none());
    assert_eq!(out.logs[1].expansion_preserved, Some(true));
    assert!(out.final_forgetting.is_some());
}

#[test]
fn default_schedule_logs_twenty_epochs() {
    let data = toy(1, 2);
    let mut plan = disease_plan(&[&[0, 1]], 20);
    plan.increments[0].epochs = IncrementSpec::new(IncrementKind::Disease, vec![], DomainId(0)).epochs;
    let out = run_plan(&plan, &data, Arm::WithMd).unwrap();
    let epochs: Vec<usize> = out.logs[0].epochs.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, (1..=20).collect::<Vec<_>>());
}

#[test]
fn logged_total_matches_weighted_parts() {
    let data = toy(1, 4);
    for arm in Arm::ALL {
        let out = run_plan(&disease_plan(&[&[0, 1], &[2, 3]], 4), &data, arm).unwrap();
        for log in &out.logs {
            assert!(log.bookkeeping_error() <= 1e-9, "{arm}: {}", log.bookkeeping_error());
        }
    }
}

#[test]
fn first_increment_has_no_distillation() {
    let data = toy(1, 4);
    let out = run_plan(&disease_plan(&[&[0, 1], &[2, 3]], 3), &data, Arm::WithMd).unwrap();
    assert!(out.logs[0].epochs.iter().all(|e| e.l_d == 0.0));
    assert!(out.logs[1].epochs.iter().any(|e| e.l_d > 0.0));
    assert!(out.logs[1].train_old > 0);
}

#[test]
fn runs_are_deterministic() {
    let data = toy(1, 4);
    let plan = disease_plan(&[&[0, 1], &[2, 3]], 3);
    let a = run_plan(&plan, &data, Arm::WithMd).unwrap();
    let b = run_plan(&plan, &data, Arm::WithMd).unwrap();
    assert_eq!(
        serde_json::to_string(&a.logs).unwrap(),
        serde_json::to_string(&b.logs).unwrap()
    );
    let c = run_plan(&plan.with_seed(4), &data, Arm::WithMd).unwrap();
    assert_ne!(
        serde_json::to_string(&a.logs).unwrap(),
        serde_json::to_string(&c.logs).unwrap()
    );
}

#[test]
fn zero_beta_logs_zero_mutual_term() {
    let data = toy(1, 4);
    let mut plan = disease_plan(&[&[0, 1], &[2, 3]], 3);
    plan.increments.iter_mut().for_each(|i| {
        i.alpha = 0.75;
        i.beta = 0.0;
    });
    let out = run_plan(&plan, &data, Arm::WithMd).unwrap();
    assert!(out.logs.iter().flat_map(|l| &l.epochs).all(|e| e.l_md == 0.0));
    let without = run_plan(&disease_plan(&[&[0, 1], &[2, 3]], 3), &data, Arm::WithoutMd).unwrap();
    assert!(without.logs.iter().flat_map(|l| &l.epochs).all(|e| e.l_md == 0.0));
    assert_eq!(without.logs[0].weights.beta, 0.0);
}

#[test]
fn cross_entropy_arms_log_unit_classification_weight() {
    let data = toy(1, 4);
    for arm in [Arm::ExemplarFreeCe, Arm::JointFineTune] {
        let out = run_plan(&disease_plan(&[&[0, 1], &[2, 3]], 2), &data, arm).unwrap();
        let w = out.logs[1].weights;
        assert_eq!((w.alpha, w.beta, w.gamma), (1.0, 0.0, 0.0));
    }
    let free = run_plan(&disease_plan(&[&[0, 1], &[2, 3]], 2), &data, Arm::ExemplarFreeCe).unwrap();
    assert_eq!(free.logs[1].train_old, 0);
    let joint = run_plan(&disease_plan(&[&[0, 1], &[2, 3]], 2), &data, Arm::JointFineTune).unwrap();
    assert_eq!(joint.logs[1].train_old, joint.logs[0].train_new);
}

#[test]
fn empty_plan_yields_no_logs() {
    let data = toy(1, 2);
    let out = run_plan(&IncrementPlan::default(), &data, Arm::WithMd).unwrap();
    assert!(out.logs.is_empty());
    assert!(out.final_forgetting.is_none());
    assert!(out.state.head.is_empty());
}

#[test]
fn head_never_shrinks() {
    let data = toy(1, 6);
    let out = run_plan(&disease_plan(&[&[0], &[1, 2], &[3, 4, 5]], 2), &data, Arm::WithMd).unwrap();
    let sizes: Vec<usize> = out.logs.iter().map(|l| l.head_after).collect();
    assert_eq!(sizes, vec![1, 3, 6]);
    for w in out.logs.windows(2) {
        assert_eq!(w[0].head_after, w[1].head_before);
    }
}

#[test]
fn dataset_increment_reports_both_domains() {
    let data = toy(2, 2);
    let mut plan = disease_plan(&[&[0, 1]], 3);
    let mut second = IncrementSpec::new(IncrementKind::Dataset, vec![ClassId(2), ClassId(3)], DomainId(1));
    second.epochs = 3;
    second.new_fraction = 1.0;
    plan.increments.push(second);
    let out = run_plan(&plan, &data, Arm::WithMd).unwrap();
    let ev = &out.logs[1].evaluation;
    assert!(ev.domain(DomainId(0)).is_some());
    assert!(ev.domain(DomainId(1)).is_some());
    assert_eq!(out.logs[1].kind, IncrementKind::Dataset);
    let rows = out.logs[1].metric_rows();
    assert!(rows.iter().any(|r| r.domain == "1" && r.class == "all"));
}

#[test]
fn dataset_runner_rejects_disease_increment() {
    let data = toy(1, 2);
    let plan = disease_plan(&[&[0, 1]], 1);
    let ctx = RunContext {
        plan: &plan,
        data: &data,
        arm: Arm::WithMd,
    };
    assert!(matches!(
        run_dataset_increment(LearnerState::default(), 0, ctx),
        Err(Error::Config(_))
    ));
}

#[test]
fn invalid_plans_are_config_errors() {
    let data = toy(1, 4);
    let dup = disease_plan(&[&[0, 1], &[1, 2]], 1);
    assert!(matches!(run_plan(&dup, &data, Arm::WithMd), Err(Error::Config(_))));
    let missing = disease_plan(&[&[0, 9]], 1);
    assert!(matches!(run_plan(&missing, &data, Arm::WithMd), Err(Error::Config(_))));
    let mut bad_tau = disease_plan(&[&[0, 1]], 1);
    for tau in [0.0, 0.1, f64::INFINITY] {
        bad_tau.increments[0].tau = tau;
        assert!(matches!(bad_tau.validate(), Err(Error::Config(_))), "{tau}");
    }
    let mut bad_weights = disease_plan(&[&[0, 1]], 1);
    bad_weights.increments[0].alpha = -1.0;
    assert!(matches!(bad_weights.validate(), Err(Error::Config(_))));
    let mut bad_fraction = disease_plan(&[&[0, 1]], 1);
    bad_fraction.increments[0].exemplar_fraction = 0.0;
    assert!(matches!(bad_fraction.validate(), Err(Error::Config(_))));
    let mut bad_batch = disease_plan(&[&[0, 1]], 1);
    bad_batch.increments[0].batch_size = 1;
    assert!(matches!(bad_batch.validate(), Err(Error::Config(_))));
}

#[test]
fn shared_labels_only_for_dataset_increments() {
    let mut plan = disease_plan(&[&[0, 1]], 1);
    plan.increments.push(IncrementSpec::new(
        IncrementKind::Dataset,
        vec![ClassId(0), ClassId(1)],
        DomainId(1),
    ));
    assert!(plan.validate().is_err());
    plan.shared_labels = true;
    plan.validate().unwrap();
    plan.increments.push(IncrementSpec::new(
        IncrementKind::Dataset,
        vec![ClassId(0)],
        DomainId(1),
    ));
    assert!(plan.validate().is_err());
}

#[test]
fn shared_label_run_keeps_head_size() {
    let mut spec = SyntheticSpec::toy(2, 2, 8, 40, 1.0, 5);
    for c in &mut spec.domains[1].classes {
        c.class = ClassId(c.class.0 - 2);
    }
    let data = spec.generate().unwrap();
    let mut plan = disease_plan(&[&[0, 1]], 2);
    let mut second = IncrementSpec::new(IncrementKind::Dataset, vec![ClassId(0), ClassId(1)], DomainId(1));
    second.epochs = 2;
    second.new_fraction = 1.0;
    plan.increments.push(second);
    plan.shared_labels = true;
    let out = run_plan(&plan, &data, Arm::WithMd).unwrap();
    assert_eq!(out.logs[1].head_after, 2);
    assert!(out.logs[1].evaluation.domain(DomainId(1)).is_some());
}

#[test]
fn alternative_modes_run() {
    let data = toy(1, 4);
    let mut plan = disease_plan(&[&[0, 1], &[2, 3]], 2);
    plan.refresh = RefreshCadence::Batch;
    let out = run_plan(&plan, &data, Arm::WithMd).unwrap();
    assert!(out.logs[1].bookkeeping_error() <= 1e-9);
    plan.refresh = RefreshCadence::Epoch;
    plan.stats_gradient = StatsGradient::Live;
    let out = run_plan(&plan, &data, Arm::WithMd).unwrap();
    assert!(out.logs[1].epochs.iter().all(|e| e.l_il.is_finite()));
}

#[test]
fn plan_parses_from_toml_with_defaults() {
    let text = r#"
        seed = 7
        [[increments]]
        kind = "disease"
        classes = [0, 1]
        domain = 0
        tau = 2.5
    "#;
    let plan: IncrementPlan = toml::from_str(text).unwrap();
    assert_eq!(plan.seed, 7);
    assert_eq!(plan.increments[0].tau, 2.5);
    assert_eq!(plan.increments[0].epochs, 20);
    assert_eq!(plan.hidden, vec![64, 32]);
    let bad = "[[increments]]\nkind = \"disease\"\nclasses = [0]\ndomain = 0\nlr = 1\n";
    assert!(toml::from_str::<IncrementPlan>(bad).is_err());
}

#[test]
fn derived_seeds_separate_streams() {
    assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
    assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
}

#[test]
fn with_tau_rewrites_every_increment() {
    let plan = disease_plan(&[&[0], &[1]], 1).with_tau(3.5);
    assert!(plan.increments.iter().all(|i| i.tau == 3.5));
}

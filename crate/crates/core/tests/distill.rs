use lprnet::experiments::{distill, DistillConfig, DistillProblem, DistillVariant, FactorInit};

#[test]
fn identity_target_is_matched_by_residual_alone() {
    let cfg = DistillConfig {
        target_rank: Some(0),
        factor_init: FactorInit::Zero,
        ..Default::default()
    };
    let problem = DistillProblem::new(&cfg).unwrap();
    let mse = problem.fit(DistillVariant::LprFull, &cfg).unwrap();
    assert!(mse < 1e-6, "{mse}");
}

#[test]
fn full_rank_linear_branch_has_enough_capacity() {
    let cfg = DistillConfig {
        channels: 16,
        rank: 16,
        target_rank: Some(16),
        ..Default::default()
    };
    let problem = DistillProblem::new(&cfg).unwrap();
    let mse = problem.fit(DistillVariant::LprNoL2Norm, &cfg).unwrap();
    assert!(mse < 1e-4, "{mse}");
}

#[test]
fn small_report_is_ordered_and_non_negative() {
    let cfg = DistillConfig {
        channels: 16,
        rank: 2,
        steps: 400,
        seed: 4,
        ..Default::default()
    };
    let r = distill(&cfg).unwrap();
    assert!(r.lpr_full < r.lpr_no_residual, "{r:?}");
    assert!(r.ratio() > 1.0);
    for v in DistillVariant::ALL {
        assert!(r.get(v) >= 0.0);
    }
    assert_eq!(distill(&cfg).unwrap(), r);
}

#[test]
fn zero_steps_reports_the_initial_fit() {
    let cfg = DistillConfig {
        channels: 8,
        rank: 2,
        steps: 0,
        ..Default::default()
    };
    let r = distill(&cfg).unwrap();
    assert!(r.lpr_full.is_finite() && r.lpr_full > 0.0);
}

use proptest::prelude::*;
use twostage::diagnostics::independence_across_biomarkers;
use twostage::simulate::{fixtures, mc_se, preset, run_study, Scale, ScenarioConfig, StudyOptions};
use twostage::simulate::generate;
use twostage::two_stage::single_step;
use twostage::{Procedure, RidgeConfig};

#[test]
fn study_is_reproducible() {
    let grid = preset("fig1d", Scale::Desk).unwrap().points[..2].to_vec();
    let options = StudyOptions::default();
    let a = run_study(&grid, &Procedure::ALL, 3, 40, &options).unwrap();
    let b = run_study(&grid, &Procedure::ALL, 3, 40, &options).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(a.rows.len(), 8);
}

#[test]
fn single_replicate_estimates_are_binary() {
    let grid = preset("fig1b", Scale::Desk).unwrap().points[..1].to_vec();
    let table = run_study(&grid, &Procedure::ALL, 1, 0, &StudyOptions::default()).unwrap();
    for row in &table.rows {
        assert!(row.fwer == 0.0 || row.fwer == 1.0);
        assert_eq!(row.fwer_se, 0.0);
        let p = row.power.unwrap();
        assert!(p == 0.0 || p == 1.0);
        assert_eq!(row.power_se, Some(0.0));
    }
}

#[test]
fn estimates_and_standard_errors_are_consistent() {
    let grid = preset("global_null", Scale::Desk).unwrap().points;
    let table = run_study(&grid, &Procedure::ALL, 20, 7, &StudyOptions::default()).unwrap();
    for row in &table.rows {
        assert!((0.0..=1.0).contains(&row.fwer));
        assert_eq!(row.power, None);
        let se = (row.fwer * (1.0 - row.fwer) / row.replicates as f64).sqrt();
        assert!((row.fwer_se - se).abs() <= 1e-12);
    }
}

/// Reduced-scale ordering at a mid-range sample size.
#[test]
fn correlated_sweep_method_ordering() {
    let grid: Vec<_> = preset("fig1a", Scale::Desk)
        .unwrap()
        .points
        .into_iter()
        .filter(|p| p.label == "n=1500")
        .collect();
    let table = run_study(&grid, &Procedure::ALL, 200, 500, &StudyOptions::default()).unwrap();
    let power = |m| table.get("n=1500", m).unwrap().power.unwrap();
    let (single, thr, rank, ridge) = (
        power(Procedure::SingleStep),
        power(Procedure::UniThreshold),
        power(Procedure::UniRank),
        power(Procedure::RidgeRank),
    );
    eprintln!("single {single} threshold {thr} rank {rank} ridge {ridge}");
    assert!(ridge > rank, "ridge {ridge} rank {rank}");
    assert!(rank >= thr, "rank {rank} threshold {thr}");
    assert!(thr > single, "threshold {thr} single {single}");
}

#[test]
fn null_fixture_stage_correlation_covers_zero() {
    let ridge = RidgeConfig::default();
    let covered = (0..100u64)
        .filter(|&s| {
            independence_across_biomarkers(&fixtures::start_like(s), &ridge)
                .unwrap()
                .ci_contains_zero()
        })
        .count();
    assert!(covered >= 90, "{covered} of 100");
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(256) })]

    #[test]
    fn mc_se_formula(hits in 0usize..=500, reps in 500usize..2000) {
        let p = hits as f64 / reps as f64;
        prop_assert!((mc_se(p, reps) - (p * (1.0 - p) / reps as f64).sqrt()).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(16) })]

    #[test]
    fn single_step_rejections_survive_larger_thresholds(seed in 0u64..10_000, factor in 1.0f64..50.0) {
        let data = generate(&ScenarioConfig::desk(300, 0.6).with_seed(seed)).unwrap();
        let report = single_step(&data, 0.05).unwrap();
        for row in &report.rows {
            if row.rejected {
                prop_assert!(row.p_value.unwrap() < row.threshold.unwrap() * factor);
            }
        }
    }
}

use super::*;
use nalgebra::DMatrix;

fn small_plan() -> ExperimentPlan {
    let lin = LearnerSpec::linear();
    ExperimentPlan {
        n_units: 300,
        seeds: vec![0, 1],
        folds: 2,
        ladder: vec![Rung::naive(), Rung::ols_structured(), Rung::plr(FeatureSet::TextAugmented, lin.clone())],
        tournament: vec![lin.clone()],
        architectures: vec![vec![4, 2]],
        sweep_reference: Some(lin.clone()),
        sector_rungs: vec![Rung::plr(FeatureSet::StructuredOnly, lin.clone())],
        min_sector_units: 30,
        candidates: vec![lin],
        ..ExperimentPlan::default()
    }
}

#[test]
fn default_plan_is_valid_and_round_trips() {
    let plan = ExperimentPlan::default();
    plan.validate().unwrap();
    let text = serde_json::to_string(&plan).unwrap();
    assert_eq!(ExperimentPlan::from_json(&text).unwrap(), plan);
    assert_eq!(plan.seeds, (0..10).collect::<Vec<u64>>());
    assert_eq!(plan.ladder.len(), 5);
}

#[test]
fn partial_plan_json_fills_defaults() {
    let plan = ExperimentPlan::from_json(r#"{"n_units": 500, "seeds": [3, 4]}"#).unwrap();
    assert_eq!(plan.n_units, 500);
    assert_eq!(plan.seeds, vec![3, 4]);
    assert_eq!(plan.folds, DEFAULT_FOLDS);
}

#[test]
fn invalid_plans_are_config_errors() {
    let bad = [
        ExperimentPlan { seeds: vec![], ..small_plan() },
        ExperimentPlan { seeds: vec![1, 1], ..small_plan() },
        ExperimentPlan { folds: 1, ..small_plan() },
        ExperimentPlan { n_units: 5, ..small_plan() },
        ExperimentPlan { architectures: vec![vec![]], ..small_plan() },
        ExperimentPlan { ladder: vec![Rung::plr_selected(FeatureSet::TextAugmented)], ..small_plan() },
    ];
    for plan in bad {
        assert!(matches!(plan.validate(), Err(Error::Config(_))), "{plan:?}");
    }
}

#[test]
fn rung_labels_match_estimate_labels() {
    let rung = Rung::plr(FeatureSet::TextAugmented, LearnerSpec::mlp(&[50, 25, 12]));
    assert_eq!(rung.label(), "plr[mlp(50,25,12):text]");
    assert_eq!(Rung::naive().label(), "naive");
    assert_eq!(Rung::plr_selected(FeatureSet::StructuredOnly).label(), "plr[selected:structured]");
}

#[test]
fn ladder_has_one_aggregate_per_rung() {
    let report = run_ladder(&small_plan()).unwrap();
    assert_eq!(report.suite, Suite::Ladder);
    assert_eq!(report.aggregates.len(), 3);
    assert_eq!(report.runs.len(), 6);
    for a in &report.aggregates {
        assert_eq!(a.n_runs, 2, "{}", a.label);
        assert!(a.mean_bias_pct.unwrap().is_finite());
    }
}

#[test]
fn tournament_needs_ten_seeds() {
    assert!(matches!(run_tournament(&small_plan()), Err(Error::Config(_))));
}

#[test]
fn tournament_with_one_learner_has_one_row() {
    let plan = ExperimentPlan { seeds: (0..10).collect(), n_units: 200, ..small_plan() };
    let report = run_tournament(&plan).unwrap();
    assert_eq!(report.aggregates.len(), 1);
    assert_eq!(report.aggregates[0].n_runs, 10);
}

#[test]
fn identical_architectures_give_identical_rows() {
    let plan = ExperimentPlan { architectures: vec![vec![4, 2], vec![4, 2]], sweep_reference: None, ..small_plan() };
    let report = run_arch_sweep(&plan).unwrap();
    assert_eq!(report.aggregates.len(), 2);
    let (a, b) = (&report.aggregates[0], &report.aggregates[1]);
    assert_eq!(a.mean_estimate, b.mean_estimate);
    assert_eq!(report.best_architecture.as_deref(), Some(a.label.as_str()));
}

#[test]
fn single_sector_report_and_stored_truths() {
    let plan = ExperimentPlan { sectors: vec![Sector::ALL[2]], ..small_plan() };
    let report = run_sector_split(&plan).unwrap();
    assert!(report.sectors.iter().all(|s| s.sector == Sector::ALL[2]));
    assert!(report.runs.iter().all(|r| r.sector == Some(Sector::ALL[2])));
    let truths: Vec<f64> = Sector::ALL.iter().map(|&s| plan.config.tau(s).unwrap()).collect();
    assert_eq!(truths, vec![746.0, 649.0, 395.0, 436.0, 559.0]);
}

#[test]
fn small_sectors_are_skipped_with_a_flag() {
    let plan = ExperimentPlan { min_sector_units: 10_000, ..small_plan() };
    let report = run_sector_split(&plan).unwrap();
    assert!(report.sectors.iter().all(|s| s.skipped));
    assert!(report.flags.iter().any(|f| f == "sector_skipped_too_small"));
    assert!(report.runs.iter().all(|r| r.error.is_some()));
}

#[test]
fn diagnostics_flag_a_destroyed_proxy() {
    let mut plan = ExperimentPlan { seeds: vec![0], n_units: 400, ..small_plan() };
    plan.config.embedding.signal_noise_sd = 1e3;
    let report = run_diagnostics(&plan).unwrap();
    assert!(report.diagnostics[0].r2_text < 0.1);
    assert!(report.flags.iter().any(|f| f == "text_proxy_destroyed"));
}

#[test]
fn diagnostics_are_in_range() {
    let plan = ExperimentPlan { seeds: vec![0], n_units: 600, ..small_plan() };
    let row = &run_diagnostics(&plan).unwrap().diagnostics[0];
    assert!(row.ability_gap > 0.0);
    assert!((0.0..=1.0).contains(&row.share_in_support));
    assert!(row.pc1_corr_abs <= 1.0);
    assert!(row.propensity_treated_median > row.propensity_control_median);
}

#[test]
fn bench_cache_is_consistent_with_fresh_runs() {
    let plan = small_plan();
    let bench = Bench::new(plan.clone()).unwrap();
    let first = bench.ladder().unwrap();
    let again = bench.ladder().unwrap();
    let fresh = run_ladder(&plan).unwrap();
    assert_eq!(first, again);
    assert_eq!(first, fresh);
}

#[test]
fn parallel_and_sequential_reports_agree() {
    let plan = small_plan();
    let p = Bench::with_execution(plan.clone(), Execution::Parallel).unwrap().ladder().unwrap();
    let s = Bench::with_execution(plan, Execution::Sequential).unwrap().ladder().unwrap();
    assert_eq!(p, s);
}

#[test]
fn selection_prefers_true_form_over_constant() {
    let n = 200;
    let x = DMatrix::from_fn(n, 2, |i, j| ((i * (j + 3)) % 17) as f64 / 17.0 - 0.5);
    let y: Vec<f64> = (0..n).map(|i| 3.0 * x[(i, 0)] - 2.0 * x[(i, 1)]).collect();
    let constant = LearnerSpec::tree(0);
    let candidates = [constant, LearnerSpec::linear()];
    let (spec, mses) = select_nuisance_spec_on(&candidates, &x, &y, 5, 0, Execution::Sequential).unwrap();
    assert_eq!(spec, LearnerSpec::linear());
    assert!(mses[1] < mses[0]);
}

#[test]
fn selection_ties_go_to_the_simpler_candidate() {
    let n = 100;
    let x = DMatrix::from_fn(n, 3, |i, j| (i + j) as f64);
    let y = vec![2.5; n];
    let candidates = [LearnerSpec::tree(3), LearnerSpec::tree(0)];
    let (spec, _) = select_nuisance_spec_on(&candidates, &x, &y, 4, 0, Execution::Sequential).unwrap();
    assert_eq!(spec, LearnerSpec::tree(0));
}

#[test]
fn single_candidate_is_returned() {
    let ds = generate_with(&StructuralConfig::default(), 100, 0, Execution::Sequential).unwrap();
    let spec = select_nuisance_spec(&[LearnerSpec::linear()], &ds).unwrap();
    assert_eq!(spec, LearnerSpec::linear());
    assert!(select_nuisance_spec(&[], &ds).is_err());
}

#[test]
fn selection_does_not_read_the_oracle() {
    let ds = generate_with(&StructuralConfig::default(), 200, 1, Execution::Sequential).unwrap();
    let before = ds.oracle_reads();
    select_nuisance_spec(&[LearnerSpec::linear(), LearnerSpec::tree(2)], &ds).unwrap();
    assert_eq!(ds.oracle_reads(), before);
}

#[test]
fn selected_rungs_run_through_the_bench() {
    let plan = ExperimentPlan {
        selection: NuisanceSelection::MinOutOfSampleMse,
        candidates: vec![LearnerSpec::linear(), LearnerSpec::tree(2)],
        ladder: vec![Rung::plr_selected(FeatureSet::StructuredOnly)],
        ..small_plan()
    };
    let report = run_ladder(&plan).unwrap();
    let spec = report.runs[0].estimate.as_ref().unwrap().learner_spec.clone().unwrap();
    assert!(plan.candidates.contains(&spec));
}

#[test]
fn aggregate_statistics() {
    let mk = |seed: u64, theta: f64| {
        let ds = generate_with(&StructuralConfig::default(), 60, seed, Execution::Sequential).unwrap();
        let mut est = dml::naive_ate(&ds).unwrap();
        est.theta_hat = theta;
        RunRecord::new("x".into(), seed, None, Ok(est.with_truth(100.0)))
    };
    let runs = [mk(0, 90.0), mk(1, 110.0), mk(2, 130.0), RunRecord::new("x".into(), 3, None, Err("boom".into()))];
    let refs: Vec<&RunRecord> = runs.iter().collect();
    let a = aggregate("x", &refs);
    assert_eq!((a.n_runs, a.n_failed), (3, 1));
    assert!((a.mean_estimate.unwrap() - 110.0).abs() < 1e-12);
    assert!((a.mean_bias_pct.unwrap() - 10.0).abs() < 1e-12);
    assert!((a.mean_abs_bias_pct.unwrap() - 50.0 / 3.0).abs() < 1e-12);
    let b = a.estimates.unwrap();
    assert_eq!((b.min, b.median, b.max), (90.0, 110.0, 130.0));
    assert_eq!(a.iqr_covers_truth, Some(true));
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_ladder(&small_plan()).unwrap();
    write_report(&report, dir.path()).unwrap();
    let back: BenchmarkReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(back.aggregates.len(), report.aggregates.len());
    let csv = std::fs::read_to_string(dir.path().join("ladder.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + report.runs.len());
    assert!(csv.starts_with("label,seed,theta_hat"));
}

#[test]
fn seed_views_share_the_cache() {
    let bench = Bench::new(small_plan()).unwrap();
    let full = bench.ladder().unwrap();
    let one = bench.with_seeds(vec![1]).unwrap().ladder().unwrap();
    let from_full: Vec<&RunRecord> = full.runs.iter().filter(|r| r.seed == 1).collect();
    assert_eq!(one.runs.iter().collect::<Vec<_>>(), from_full);
    let est = bench.run(1, &Rung::naive()).unwrap();
    assert_eq!(Some(&est), from_full[0].estimate.as_ref());
}

//! End-to-end checks: simulate → raw CSVs → ingest round trip, and
//! recovery of known truth through the full fit/bootstrap path.

use fui_core::infer::{self, BootstrapOptions, TestSpec};
use fui_core::ingest::{ingest_files, IngestConfig};
use fui_core::io;
use fui_core::lmm::{fit_all_timepoints, SolverOptions};
use fui_core::simulate::{
    simulate_dataset, CoefficientShape, CovariateDistribution, EffectSpec, GeneratorConfig,
    PeriodsPerSubject,
};
use fui_core::TimeGrid;

#[test]
fn raw_csv_round_trip_is_bit_exact() {
    let mut cfg = GeneratorConfig::small_test(12, 6, TimeGrid::default_sleep(), 404);
    // Glucose-like scale keeps every reading positive.
    cfg.intercept = CoefficientShape::Constant { value: 120.0 };
    cfg.kernel_subject.variance = 100.0;
    cfg.kernel_noise.variance = 64.0;
    let (dataset, _) = simulate_dataset(&cfg).unwrap();
    assert!(dataset.responses().iter().all(|&v| v > 0.0));

    let dir = tempfile::tempdir().unwrap();
    io::export_raw_csvs(&dataset, dir.path()).unwrap();

    let (back, report) = ingest_files(
        &dir.path().join(io::CGM_FILE),
        &dir.path().join(io::SLEEP_FILE),
        &dir.path().join(io::COVARIATES_FILE),
        &IngestConfig::default(),
    )
    .unwrap();

    assert_eq!(report.subjects_kept, 12);
    assert_eq!(report.periods_kept, 72);
    assert_eq!(report.invalid_rows_skipped, 0);
    assert_eq!(back.responses(), dataset.responses());
    assert_eq!(back.covariates(), dataset.covariates());
    assert_eq!(back.covariate_names(), dataset.covariate_names());
    assert_eq!(back.subject_of_row(), dataset.subject_of_row());
}

#[test]
fn pointwise_fits_recover_constant_truth() {
    let grid = TimeGrid::uniform(5.0, 5.0, 12).unwrap();
    let cfg = GeneratorConfig {
        subjects: 60,
        periods: PeriodsPerSubject::Fixed { count: 4 },
        intercept: CoefficientShape::Constant { value: 3.0 },
        effects: vec![EffectSpec {
            name: "dose".into(),
            distribution: CovariateDistribution::Bernoulli { p: 0.5 },
            shape: CoefficientShape::Constant { value: 1.5 },
        }],
        ..GeneratorConfig::small_test(60, 4, grid.clone(), 88)
    };
    let (data, _) = simulate_dataset(&cfg).unwrap();
    let series = fit_all_timepoints(&data, &SolverOptions::default()).unwrap();
    for fit in &series.fits {
        assert!(fit.converged);
        assert!((fit.beta[0] - 3.0).abs() < 0.8, "intercept {}", fit.beta[0]);
        assert!((fit.beta[1] - 1.5).abs() < 0.8, "effect {}", fit.beta[1]);
        assert!(fit.sigma2_b >= 0.0);
        assert!(fit.sigma2_eps > 0.0);
    }
}

#[test]
fn strong_effect_yields_small_pvalue_and_null_band_covers_zero() {
    let grid = TimeGrid::uniform(5.0, 5.0, 16).unwrap();
    let cfg = GeneratorConfig {
        subjects: 40,
        periods: PeriodsPerSubject::Fixed { count: 4 },
        intercept: CoefficientShape::Constant { value: 0.0 },
        effects: vec![EffectSpec {
            name: "strong".into(),
            distribution: CovariateDistribution::Bernoulli { p: 0.5 },
            shape: CoefficientShape::Constant { value: 5.0 },
        }],
        ..GeneratorConfig::small_test(40, 4, grid.clone(), 99)
    };
    let (data, _) = simulate_dataset(&cfg).unwrap();
    let ensembles = infer::cluster_bootstrap(&data, 40, 7, &BootstrapOptions::new()).unwrap();
    let band = infer::joint_band(&ensembles[1], 0.05, 2000, 7).unwrap();
    let result = infer::global_pvalue(&ensembles[1], &band, &TestSpec::default()).unwrap();
    assert!(result.p_value < 0.01, "p = {}", result.p_value);
    // The band around a strong positive effect stays above zero.
    assert!(band.lower.iter().all(|&l| l > 0.0));
}

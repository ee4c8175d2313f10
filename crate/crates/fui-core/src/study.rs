//! Monte-Carlo verification suites for the pipeline.
//!
//! Each suite runs a fixed-seed experiment against an independent reference
//! (dense grid-search REML, closed-form Gaussian quantiles, the band /
//! p-value duality, known generative truth) and reports rates plus a
//! pass/fail gate. The `coverage-study` CLI subcommand and the acceptance
//! test suite both call these.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::time::Instant;

use crate::dataset::PointwiseDesign;
use crate::error::Result;
use crate::grid::TimeGrid;
use crate::infer::{self, BootstrapOptions, TestSpec};
use crate::lmm::{self, SolverOptions};
use crate::oracle;
use crate::rng::{self, domain};
use crate::simulate::{
    CoefficientShape, CovariateDistribution, EffectSpec, GeneratorConfig, KernelConfig,
    KernelFamily, PeriodsPerSubject,
};
use crate::stats;

/// Solver-vs-oracle comparison on random small instances.
#[derive(Debug, Clone)]
pub struct RemlOracleReport {
    pub instances: usize,
    pub max_beta_err: f64,
    pub max_var_rel_err: f64,
    pub elapsed_s: f64,
    pub pass: bool,
}

/// One random instance with strong between-subject variance
/// (σ_b² = 4, σ_ε² = 1) and a handful of subjects.
fn random_small_design(seed: u64, index: u64) -> PointwiseDesign {
    let mut r = rng::stream(seed, domain::STUDY, index);
    let n_subjects = r.random_range(6..=12usize);
    let n_periods = r.random_range(2..=4usize);
    let n_cov = r.random_range(0..=2usize);
    let m = n_subjects * n_periods;

    let beta: Vec<f64> = (0..=n_cov).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let mut x = DMatrix::zeros(m, n_cov + 1);
    let mut y = DVector::zeros(m);
    let mut groups = Vec::with_capacity(m);
    let mut row = 0;
    for s in 0..n_subjects {
        let covs: Vec<f64> = (0..n_cov)
            .map(|c| {
                if c == 0 {
                    // one binary covariate when present
                    if r.random::<f64>() < 0.5 { 1.0 } else { 0.0 }
                } else {
                    r.sample(StandardNormal)
                }
            })
            .collect();
        let b_i = 2.0 * r.sample::<f64, _>(StandardNormal);
        for _ in 0..n_periods {
            x[(row, 0)] = 1.0;
            let mut mean = beta[0] + b_i;
            for (c, &v) in covs.iter().enumerate() {
                x[(row, c + 1)] = v;
                mean += beta[c + 1] * v;
            }
            y[row] = mean + r.sample::<f64, _>(StandardNormal);
            groups.push(s);
            row += 1;
        }
    }
    let column_names = (0..=n_cov)
        .map(|j| if j == 0 { "(Intercept)".into() } else { format!("x{j}") })
        .collect();
    PointwiseDesign { y, x, groups, column_names }
}

pub fn reml_oracle_suite(instances: usize, seed: u64) -> Result<RemlOracleReport> {
    let start = Instant::now();
    let errs: Vec<(f64, f64)> = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let design = random_small_design(seed, i);
            let fit = lmm::fit_pointwise(&design, &SolverOptions::default())?;
            let reference = oracle::two_stage_grid_search(&design, 2000, 2000, -6.0, 6.0);
            let beta_err = (0..fit.beta.len())
                .map(|j| (fit.beta[j] - reference.beta[j]).abs())
                .fold(0.0, f64::max);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-8);
            let var_err = rel(fit.sigma2_eps, reference.sigma2_eps)
                .max(rel(fit.sigma2_b, reference.sigma2_b));
            Ok((beta_err, var_err))
        })
        .collect::<Result<_>>()?;
    let max_beta_err = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let max_var_rel_err = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(RemlOracleReport {
        instances,
        max_beta_err,
        max_var_rel_err,
        elapsed_s: start.elapsed().as_secs_f64(),
        pass: max_beta_err < 1e-4 && max_var_rel_err < 1e-3,
    })
}

/// Critical values checked against closed forms.
#[derive(Debug, Clone)]
pub struct CriticalValueReport {
    pub q_k1: f64,
    pub q_k1_expected: f64,
    pub q_k2_independent: f64,
    pub q_k2_expected: f64,
    pub q_k84_correlated: f64,
    pub pass: bool,
}

pub fn critical_value_suite(n_draws: usize, seed: u64) -> Result<CriticalValueReport> {
    let alpha = 0.05;
    let e1 = infer::BootstrapEnsemble::from_moments(
        "k1".into(),
        DVector::zeros(1),
        DMatrix::from_element(1, 1, 1.0),
    );
    let q_k1 = infer::joint_critical_value(&e1, alpha, n_draws, rng::derive_seed(seed, 0, 1))?.q;

    let e2 = infer::BootstrapEnsemble::from_moments(
        "k2".into(),
        DVector::zeros(2),
        DMatrix::identity(2, 2),
    );
    let q_k2 = infer::joint_critical_value(&e2, alpha, n_draws, rng::derive_seed(seed, 0, 2))?.q;

    let e84 = infer::BootstrapEnsemble::from_moments(
        "k84".into(),
        DVector::zeros(84),
        DMatrix::from_element(84, 84, 1.0),
    );
    let q_k84 = infer::joint_critical_value(&e84, alpha, n_draws, rng::derive_seed(seed, 0, 3))?.q;

    let q_k1_expected = stats::normal_quantile(1.0 - alpha / 2.0);
    // Two independent coordinates: solve (2Φ(q) − 1)² = 1 − α.
    let q_k2_expected = stats::normal_quantile((1.0 + (1.0 - alpha).sqrt()) / 2.0);

    let pass = (q_k1 - q_k1_expected).abs() < 0.05
        && (q_k2 - q_k2_expected).abs() < 0.05
        && (q_k84 - q_k1).abs() < 0.05;
    Ok(CriticalValueReport {
        q_k1,
        q_k1_expected,
        q_k2_independent: q_k2,
        q_k2_expected,
        q_k84_correlated: q_k84,
        pass,
    })
}

/// Band/p-value duality over random ensembles.
#[derive(Debug, Clone)]
pub struct DualityReport {
    pub ensembles: usize,
    pub checks: usize,
    pub violations: usize,
    pub pass: bool,
}

pub fn duality_suite(n_ensembles: usize, seed: u64) -> Result<DualityReport> {
    let alphas = [0.2, 0.1, 0.05, 0.01];
    let k = 40;
    let n_draws = 2000;
    let mut checks = 0;
    let mut violations = 0;
    for i in 0..n_ensembles as u64 {
        let mut r = rng::stream(seed, domain::STUDY, 1_000_000 + i);
        // Random PSD covariance with a dense factor plus a diagonal floor.
        let a = DMatrix::from_fn(k, k.min(4), |_, _| r.sample::<f64, _>(StandardNormal));
        let mut cov = &a * a.transpose() / k as f64;
        for j in 0..k {
            cov[(j, j)] += 0.1 + 0.5 * r.random::<f64>();
        }
        // Mean scaled so the max deviation straddles the tested levels.
        let scale: f64 = 0.2 + 2.0 * r.random::<f64>();
        let mean = DVector::from_fn(k, |j, _| {
            scale * cov[(j, j)].sqrt() * r.sample::<f64, _>(StandardNormal)
        });
        let ensemble = infer::BootstrapEnsemble::from_moments("dual".into(), mean, cov);
        let base = infer::joint_band(&ensemble, 0.05, n_draws, rng::derive_seed(seed, 9, i))?;
        let pvalue = infer::global_pvalue(&ensemble, &base, &TestSpec::default())?.p_value;
        for &alpha in &alphas {
            let band = base.at_level(&ensemble, alpha)?;
            let band_rejects = (0..k)
                .filter(|j| !band.excluded.contains(j))
                .any(|j| band.lower[j] > 0.0 || band.upper[j] < 0.0);
            checks += 1;
            if (pvalue <= alpha) != band_rejects {
                violations += 1;
            }
        }
    }
    Ok(DualityReport {
        ensembles: n_ensembles,
        checks,
        violations,
        pass: violations == 0,
    })
}

/// Controls for the joint coverage / type-I study.
#[derive(Debug, Clone)]
pub struct CoverageConfig {
    pub runs: usize,
    pub subjects: usize,
    pub periods: usize,
    pub grid_len: usize,
    pub bootstrap: usize,
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            runs: 200,
            subjects: 50,
            periods: 5,
            grid_len: 40,
            bootstrap: 100,
            draws: 2000,
            alpha: 0.05,
            seed: 20_260_810,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub runs: usize,
    pub covered: usize,
    pub coverage_rate: f64,
    pub null_rejections: usize,
    pub type1_rate: f64,
    pub elapsed_s: f64,
    pub pass_coverage: bool,
    pub pass_type1: bool,
}

/// Effect shape used for the covered covariate: a smooth half-sine across
/// the sleep window.
fn study_effect_shape(grid: &TimeGrid) -> CoefficientShape {
    CoefficientShape::Sine {
        amplitude: 1.0,
        period_min: 2.0 * (grid.end() + grid.spacing()),
        phase_min: 0.0,
    }
}

fn study_generator(cfg: &CoverageConfig, run_seed: u64) -> GeneratorConfig {
    let grid = TimeGrid::uniform(5.0, 5.0, cfg.grid_len).expect("valid study grid");
    GeneratorConfig {
        subjects: cfg.subjects,
        periods: PeriodsPerSubject::Fixed { count: cfg.periods },
        intercept: CoefficientShape::Constant { value: 10.0 },
        effects: vec![
            EffectSpec {
                name: "effect".into(),
                distribution: CovariateDistribution::Bernoulli { p: 0.5 },
                shape: study_effect_shape(&grid),
            },
            EffectSpec {
                name: "null".into(),
                distribution: CovariateDistribution::Bernoulli { p: 0.5 },
                shape: CoefficientShape::Constant { value: 0.0 },
            },
        ],
        kernel_subject: KernelConfig {
            family: KernelFamily::SquaredExponential,
            variance: 4.0,
            length_scale_min: 150.0,
        },
        kernel_noise: KernelConfig {
            family: KernelFamily::SquaredExponential,
            variance: 2.0,
            length_scale_min: 100.0,
        },
        heavy_tail_noise: false,
        grid,
        seed: run_seed,
    }
}

/// Simulate, bootstrap, and band `runs` independent datasets; track whole
/// function coverage of the truth for the non-null covariate and the
/// rejection rate for the null covariate.
pub fn coverage_study(cfg: &CoverageConfig) -> Result<CoverageReport> {
    let start = Instant::now();
    let outcomes: Vec<(bool, bool)> = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|run| {
            let run_seed = rng::derive_seed(cfg.seed, domain::STUDY, run);
            let gen = study_generator(cfg, run_seed);
            let (data, truth) = crate::simulate::simulate_dataset(&gen)?;
            let ensembles =
                infer::cluster_bootstrap(&data, cfg.bootstrap, run_seed, &BootstrapOptions::new())?;

            // Whole-function coverage of the true effect curve.
            let band_eff = infer::joint_band(&ensembles[1], cfg.alpha, cfg.draws, run_seed)?;
            let covered = truth.beta_on_grid[1]
                .iter()
                .enumerate()
                .all(|(k, &b)| band_eff.lower[k] <= b && b <= band_eff.upper[k]);

            // Global test of the identically-zero covariate.
            let band_null = infer::joint_band(&ensembles[2], cfg.alpha, cfg.draws, run_seed)?;
            let p = infer::global_pvalue(&ensembles[2], &band_null, &TestSpec::default())?.p_value;
            Ok((covered, p <= cfg.alpha))
        })
        .collect::<Result<_>>()?;

    let covered = outcomes.iter().filter(|o| o.0).count();
    let null_rejections = outcomes.iter().filter(|o| o.1).count();
    let coverage_rate = covered as f64 / cfg.runs as f64;
    let type1_rate = null_rejections as f64 / cfg.runs as f64;
    Ok(CoverageReport {
        runs: cfg.runs,
        covered,
        coverage_rate,
        null_rejections,
        type1_rate,
        elapsed_s: start.elapsed().as_secs_f64(),
        pass_coverage: (0.91..=0.99).contains(&coverage_rate),
        pass_type1: (0.02..=0.09).contains(&type1_rate),
    })
}

/// Power smoke check: with a strong effect (effect/se around 10) the global
/// p-value should be small in every run.
pub fn power_suite(runs: usize, seed: u64) -> Result<(usize, usize)> {
    let hits: Vec<bool> = (0..runs as u64)
        .into_par_iter()
        .map(|run| {
            let run_seed = rng::derive_seed(seed, domain::STUDY, 77_000 + run);
            let grid = TimeGrid::uniform(5.0, 5.0, 20).expect("grid");
            let gen = GeneratorConfig {
                subjects: 40,
                periods: PeriodsPerSubject::Fixed { count: 4 },
                intercept: CoefficientShape::Constant { value: 0.0 },
                effects: vec![EffectSpec {
                    name: "strong".into(),
                    distribution: CovariateDistribution::Bernoulli { p: 0.5 },
                    shape: CoefficientShape::Constant { value: 4.0 },
                }],
                kernel_subject: KernelConfig {
                    family: KernelFamily::SquaredExponential,
                    variance: 1.0,
                    length_scale_min: 30.0,
                },
                kernel_noise: KernelConfig {
                    family: KernelFamily::SquaredExponential,
                    variance: 1.0,
                    length_scale_min: 20.0,
                },
                heavy_tail_noise: false,
                grid,
                seed: run_seed,
            };
            let (data, _) = crate::simulate::simulate_dataset(&gen)?;
            let ensembles =
                infer::cluster_bootstrap(&data, 60, run_seed, &BootstrapOptions::new())?;
            let band = infer::joint_band(&ensembles[1], 0.05, 2000, run_seed)?;
            let p = infer::global_pvalue(&ensembles[1], &band, &TestSpec::default())?.p_value;
            Ok(p < 0.01)
        })
        .collect::<Result<_>>()?;
    Ok((hits.iter().filter(|&&h| h).count(), runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_reml_oracle_agrees() {
        let report = reml_oracle_suite(5, 314).unwrap();
        assert!(report.pass, "beta err {} var err {}", report.max_beta_err, report.max_var_rel_err);
    }

    #[test]
    fn duality_holds_on_a_few_ensembles() {
        let report = duality_suite(10, 2718).unwrap();
        assert_eq!(report.violations, 0);
    }
}

//! Subject-level bootstrap, joint confidence bands, and joint-band p-values.
//!
//! Inference resamples whole subjects with replacement, refits every grid
//! point, smooths each replicate's coefficient curves, and summarizes the
//! replicates by their mean and covariance. Joint bands come from the
//! Monte-Carlo distribution of the standardized maximum deviation of
//! Gaussian draws with that mean and covariance; the global p-value is the
//! smallest level at which the joint band excludes the null function.
//!
//! One deviation sample per covariate serves every band level and the
//! p-value, which makes the band/p-value duality exact: with
//! `p = (1 + #{u_n ≥ m}) / (N + 1)` the level-α band uses the order
//! statistic of rank `N + 1 − ⌊α(N+1)⌋`, so `p ≤ α` holds exactly when the
//! band excludes the null somewhere on the tested subset.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::lmm::{self, SolverOptions};
use crate::rng::{self, domain};
use crate::smooth::{SmoothConfig, SmoothingOperator};

/// Relative threshold below which a grid point's bootstrap variance is
/// treated as zero and excluded from max statistics.
const ZERO_VARIANCE_RTOL: f64 = 1e-12;

/// Bootstrap controls.
#[derive(Debug, Clone, Default)]
pub struct BootstrapOptions {
    pub solver: SolverOptions,
    pub smooth: SmoothConfig,
    /// Redraw attempts when a resample produces a rank-deficient design.
    pub max_redraws: usize,
}

impl BootstrapOptions {
    pub fn new() -> Self {
        Self {
            solver: SolverOptions::default(),
            smooth: SmoothConfig::default(),
            max_redraws: 10,
        }
    }
}

/// Bootstrap distribution of one smoothed coefficient curve.
#[derive(Debug, Clone)]
pub struct BootstrapEnsemble {
    pub covariate_name: String,
    /// B × K matrix; row b is the smoothed coefficient curve of replicate b.
    pub draws: DMatrix<f64>,
    pub b: usize,
    pub seed: u64,
    /// Column means of `draws`.
    pub mean: DVector<f64>,
    /// K × K empirical covariance of the rows.
    pub cov: DMatrix<f64>,
}

impl BootstrapEnsemble {
    /// Summarize a draws matrix by its mean and covariance.
    pub fn from_draws(covariate_name: String, draws: DMatrix<f64>, seed: u64) -> Self {
        let b = draws.nrows();
        let k = draws.ncols();
        let mean = DVector::from_fn(k, |j, _| draws.column(j).sum() / b as f64);
        let mut centered = draws.clone();
        for i in 0..b {
            for j in 0..k {
                centered[(i, j)] -= mean[j];
            }
        }
        let cov = centered.transpose() * &centered / (b as f64 - 1.0);
        Self {
            covariate_name,
            draws,
            b,
            seed,
            mean,
            cov,
        }
    }

    /// Build an ensemble directly from moments (synthetic inputs, tests).
    pub fn from_moments(covariate_name: String, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let k = mean.len();
        Self {
            covariate_name,
            draws: DMatrix::zeros(0, k),
            b: 0,
            seed: 0,
            mean,
            cov,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Joint confidence band at one level, together with the deviation sample
/// it was cut from.
#[derive(Debug, Clone)]
pub struct JointBand {
    pub alpha: f64,
    /// Critical multiple of the pointwise bootstrap standard error.
    pub q: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Sorted standardized maximum deviations u_1 ≤ … ≤ u_N.
    pub u_sample: Vec<f64>,
    pub n_draws: usize,
    /// Grid indices excluded from max statistics for zero variance.
    pub excluded: Vec<usize>,
}

/// Null specification for the global test.
#[derive(Debug, Clone, Default)]
pub struct TestSpec {
    /// Null coefficient function on the grid; `None` means identically zero.
    pub null: Option<Vec<f64>>,
    /// Grid indices to test over; `None` means the full grid.
    pub subset: Option<Vec<usize>>,
}

impl TestSpec {
    fn resolve(&self, k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let null = match &self.null {
            None => vec![0.0; k],
            Some(v) => {
                if v.len() != k {
                    return Err(Error::InvalidArgument(format!(
                        "null function has {} points, grid has {k}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        let subset = match &self.subset {
            None => (0..k).collect(),
            Some(s) => {
                if s.is_empty() || s.iter().any(|&i| i >= k) {
                    return Err(Error::InvalidSubset);
                }
                s.clone()
            }
        };
        Ok((null, subset))
    }
}

/// Result of the global null test for one covariate.
#[derive(Debug, Clone)]
pub struct TestResult {
    pub covariate_name: String,
    /// `(1 + #{u_n ≥ m}) / (N + 1)`; always positive.
    pub p_value: f64,
    pub max_standardized_deviation: f64,
}

/// Cluster bootstrap of study subjects. Returns one ensemble per design
/// column (intercept first). Deterministic given `(seed, b)` and
/// independent of the parallel schedule.
///
/// Each replicate is refit at every grid point and its coefficient curves
/// are smoothed. The smoothing penalty is selected by GCV once, on the
/// full-data coefficient curve, and then held fixed across replicates:
/// replicate curves carry resampling noise on top of the data's own noise,
/// so re-running GCV inside each replicate systematically oversmooths and
/// deflates the bootstrap covariance.
pub fn cluster_bootstrap(
    dataset: &FunctionalDataset,
    b: usize,
    seed: u64,
    opts: &BootstrapOptions,
) -> Result<Vec<BootstrapEnsemble>> {
    if b < 2 {
        return Err(Error::InvalidArgument("need at least 2 replicates".into()));
    }
    if dataset.n_subjects() < 2 {
        return Err(Error::Dataset("need at least 2 subjects".into()));
    }
    let k = dataset.grid().len();
    let n_coef = dataset.n_covariates() + 1;
    let smoother = SmoothingOperator::new(dataset.grid(), &opts.smooth)?;

    let full_series = lmm::fit_all_timepoints_seq(dataset, &opts.solver)?;
    let lambdas: Vec<f64> = (0..n_coef)
        .map(|j| {
            let raw = full_series.coefficient_curve(j);
            Ok(smoother
                .apply(&raw, &full_series.coefficient_names[j])?
                .lambda_smooth)
        })
        .collect::<Result<_>>()?;

    let replicate_curves: Vec<Vec<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| bootstrap_replicate(dataset, rep, seed, opts, &smoother, &lambdas))
        .collect::<Result<_>>()?;

    let mut names = vec!["(Intercept)".to_string()];
    names.extend(dataset.covariate_names().iter().cloned());

    Ok((0..n_coef)
        .map(|j| {
            let draws = DMatrix::from_fn(b, k, |row, col| replicate_curves[row][j][col]);
            BootstrapEnsemble::from_draws(names[j].clone(), draws, seed)
        })
        .collect())
}

fn bootstrap_replicate(
    dataset: &FunctionalDataset,
    rep: usize,
    seed: u64,
    opts: &BootstrapOptions,
    smoother: &SmoothingOperator,
    lambdas: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let n_subjects = dataset.n_subjects();
    let attempts = opts.max_redraws + 1;
    for attempt in 0..attempts {
        let mut rng = rng::stream(
            seed,
            domain::BOOTSTRAP,
            (rep as u64) * attempts as u64 + attempt as u64,
        );
        let indices: Vec<usize> = (0..n_subjects)
            .map(|_| rng.random_range(0..n_subjects))
            .collect();
        let resampled = dataset.resample_subjects(&indices)?;
        // Rank deficiency depends only on the expanded design, which is
        // shared by every grid point; check it once and redraw if needed.
        let probe = resampled.design_at(0)?;
        if !lmm::dependent_columns(&probe.x, &probe.column_names).is_empty() {
            continue;
        }
        let series = lmm::fit_all_timepoints_seq(&resampled, &opts.solver)?;
        let mut curves = Vec::with_capacity(series.n_coefficients());
        for j in 0..series.n_coefficients() {
            let raw = series.coefficient_curve(j);
            curves.push(
                smoother
                    .apply_with_lambda(&raw, &series.coefficient_names[j], lambdas[j])?
                    .values,
            );
        }
        return Ok(curves);
    }
    Err(Error::BootstrapRedraws {
        replicate: rep,
        attempts,
    })
}

/// Rank (1-based) of the order statistic that cuts the level-α band out of
/// N sorted deviations, chosen so that band exclusion is exactly dual to
/// `p ≤ α` under the `(1 + count)/(N + 1)` p-value.
fn band_rank(alpha: f64, n: usize) -> Result<usize> {
    let c = (alpha * (n as f64 + 1.0)).floor() as i64 - 1;
    if c < 0 {
        return Err(Error::AlphaTooSmall { alpha, draws: n });
    }
    Ok(n - c as usize)
}

/// Monte-Carlo deviation sample and level-α joint band for one ensemble.
///
/// Draws N samples from `N(mean, cov)` (covariance factored with a ridge of
/// `1e-10·trace/K` if plain Cholesky fails), records
/// `u = max_k |draw_k − mean_k| / √cov_kk` over the non-degenerate grid
/// points, and cuts the critical value from the sorted sample.
pub fn joint_critical_value(
    ensemble: &BootstrapEnsemble,
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<JointBand> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha}")));
    }
    if n_draws < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 Monte-Carlo draws, got {n_draws}"
        )));
    }
    let k = ensemble.len();
    let diag: Vec<f64> = (0..k).map(|j| ensemble.cov[(j, j)]).collect();
    let max_var = diag.iter().cloned().fold(0.0, f64::max);
    if max_var <= 0.0 {
        return Err(Error::DegenerateEnsemble);
    }
    let excluded: Vec<usize> = (0..k)
        .filter(|&j| diag[j] <= ZERO_VARIANCE_RTOL * max_var)
        .collect();
    let se: Vec<f64> = diag.iter().map(|v| v.max(0.0).sqrt()).collect();

    let l = match ensemble.cov.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let ridge = 1e-10 * ensemble.cov.trace() / k as f64;
            let mut ridged = ensemble.cov.clone();
            for j in 0..k {
                ridged[(j, j)] += ridge;
            }
            ridged
                .cholesky()
                .ok_or(Error::NotPositiveSemidefinite)?
                .l()
        }
    };

    let mut rng = rng::stream(seed, domain::MC_BAND, 0);
    let mut u_sample = Vec::with_capacity(n_draws);
    let mut z = DVector::zeros(k);
    for _ in 0..n_draws {
        for j in 0..k {
            z[j] = rng.sample(StandardNormal);
        }
        let d = &l * &z;
        let mut u = 0.0f64;
        for j in 0..k {
            if diag[j] > ZERO_VARIANCE_RTOL * max_var {
                u = u.max(d[j].abs() / se[j]);
            }
        }
        u_sample.push(u);
    }
    u_sample.sort_by(f64::total_cmp);

    band_from_sample(ensemble, alpha, u_sample, n_draws, excluded)
}

fn band_from_sample(
    ensemble: &BootstrapEnsemble,
    alpha: f64,
    u_sample: Vec<f64>,
    n_draws: usize,
    excluded: Vec<usize>,
) -> Result<JointBand> {
    let rank = band_rank(alpha, n_draws)?;
    let q = u_sample[rank - 1];
    let k = ensemble.len();
    let mut lower = Vec::with_capacity(k);
    let mut upper = Vec::with_capacity(k);
    for j in 0..k {
        let se = ensemble.cov[(j, j)].max(0.0).sqrt();
        lower.push(ensemble.mean[j] - q * se);
        upper.push(ensemble.mean[j] + q * se);
    }
    Ok(JointBand {
        alpha,
        q,
        lower,
        upper,
        u_sample,
        n_draws,
        excluded,
    })
}

/// Joint confidence band `mean ± q·√diag(cov)` at level α.
pub fn joint_band(
    ensemble: &BootstrapEnsemble,
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<JointBand> {
    joint_critical_value(ensemble, alpha, n_draws, seed)
}

impl JointBand {
    /// Re-cut this band at another level from the same deviation sample.
    /// No new Monte-Carlo draws; duality with p-values is preserved.
    pub fn at_level(&self, ensemble: &BootstrapEnsemble, alpha: f64) -> Result<JointBand> {
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha = {alpha}")));
        }
        band_from_sample(
            ensemble,
            alpha,
            self.u_sample.clone(),
            self.n_draws,
            self.excluded.clone(),
        )
    }
}

/// Pointwise band `estimate ± z_{1−α/2}·se` from explicit curves.
pub fn pointwise_band(estimate: &[f64], se: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha}")));
    }
    if estimate.len() != se.len() {
        return Err(Error::InvalidArgument("estimate/se length mismatch".into()));
    }
    let z = crate::stats::normal_quantile(1.0 - alpha / 2.0);
    let lower = estimate.iter().zip(se).map(|(b, s)| b - z * s).collect();
    let upper = estimate.iter().zip(se).map(|(b, s)| b + z * s).collect();
    Ok((lower, upper))
}

/// Pointwise band from the model-based fits (the default source).
pub fn pointwise_band_from_fits(
    series: &crate::lmm::PointwiseFitSeries,
    coefficient: usize,
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let est = series.coefficient_curve(coefficient);
    let se = series.se_curve(coefficient);
    pointwise_band(&est, &se, alpha)
}

/// Pointwise band from the bootstrap ensemble's diagonal.
pub fn pointwise_band_from_ensemble(
    ensemble: &BootstrapEnsemble,
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let est: Vec<f64> = ensemble.mean.iter().copied().collect();
    let se: Vec<f64> = (0..ensemble.len())
        .map(|j| ensemble.cov[(j, j)].max(0.0).sqrt())
        .collect();
    pointwise_band(&est, &se, alpha)
}

/// Global test of `H₀: β(t) = β₀(t) for all t in S` against the joint band
/// machinery. The p-value is the smallest level at which the band from the
/// same deviation sample excludes the null somewhere on S.
pub fn global_pvalue(
    ensemble: &BootstrapEnsemble,
    band: &JointBand,
    spec: &TestSpec,
) -> Result<TestResult> {
    let k = ensemble.len();
    let (null, subset) = spec.resolve(k)?;
    let mut m = 0.0f64;
    for &j in &subset {
        if band.excluded.contains(&j) {
            continue;
        }
        let se = ensemble.cov[(j, j)].max(0.0).sqrt();
        m = m.max((ensemble.mean[j] - null[j]).abs() / se);
    }
    // #{u_n >= m} on the sorted sample.
    let first_ge = band.u_sample.partition_point(|&u| u < m);
    let count = band.n_draws - first_ge;
    let p = (1.0 + count as f64) / (band.n_draws as f64 + 1.0);
    Ok(TestResult {
        covariate_name: ensemble.covariate_name.clone(),
        p_value: p,
        max_standardized_deviation: m,
    })
}

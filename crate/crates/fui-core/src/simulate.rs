//! Generative simulator for multilevel functional responses.
//!
//! Responses are assembled as
//! `y_ij(t_k) = β₀(t_k) + Σ_r β_r(t_k) x_ir + b_i(t_k) + ε_ij(t_k)`,
//! with the subject deviation b_i and the per-period error ε_ij drawn as
//! mean-zero Gaussian processes on the grid. Every component is recorded in
//! a [`TruthRecord`] so tests can reconstruct the responses exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::dataset::FunctionalDataset;
use crate::grid::TimeGrid;
use crate::rng::{self, domain};

/// True coefficient function shapes (time in minutes).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientShape {
    Constant { value: f64 },
    /// `intercept + slope_per_hour * t / 60`
    Linear { intercept: f64, slope_per_hour: f64 },
    /// `amplitude * sin(2π (t - phase_min) / period_min)`
    Sine {
        amplitude: f64,
        period_min: f64,
        phase_min: f64,
    },
    /// Gaussian bump `height * exp(-(t - center_min)² / (2 width_min²))`
    Bump {
        center_min: f64,
        width_min: f64,
        height: f64,
    },
}

impl CoefficientShape {
    pub fn eval(&self, t_min: f64) -> f64 {
        match *self {
            CoefficientShape::Constant { value } => value,
            CoefficientShape::Linear {
                intercept,
                slope_per_hour,
            } => intercept + slope_per_hour * t_min / 60.0,
            CoefficientShape::Sine {
                amplitude,
                period_min,
                phase_min,
            } => amplitude * (2.0 * std::f64::consts::PI * (t_min - phase_min) / period_min).sin(),
            CoefficientShape::Bump {
                center_min,
                width_min,
                height,
            } => {
                let z = (t_min - center_min) / width_min;
                height * (-0.5 * z * z).exp()
            }
        }
    }

    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.points().iter().map(|&t| self.eval(t)).collect()
    }
}

/// Subject-level covariate distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDistribution {
    Bernoulli { p: f64 },
    StandardNormal,
}

/// One covariate: a name, how it is drawn, and its true effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSpec {
    pub name: String,
    pub distribution: CovariateDistribution,
    pub shape: CoefficientShape,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Exponential,
}

/// Stationary covariance kernel on the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    /// Marginal variance σ².
    pub variance: f64,
    /// Correlation length in minutes.
    pub length_scale_min: f64,
}

impl KernelConfig {
    pub fn matrix(&self, grid: &TimeGrid) -> DMatrix<f64> {
        let pts = grid.points();
        DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
            let d = (pts[i] - pts[j]).abs() / self.length_scale_min;
            let corr = match self.family {
                KernelFamily::SquaredExponential => (-0.5 * d * d).exp(),
                KernelFamily::Exponential => (-d).exp(),
            };
            self.variance * corr
        })
    }
}

/// Periods per subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeriodsPerSubject {
    Fixed { count: usize },
    /// Uniform over `min..=max`, drawn per subject.
    Uniform { min: usize, max: usize },
    /// Explicit per-subject counts (length must equal the subject count).
    PerSubject { counts: Vec<usize> },
}

/// Full description of a generative instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub subjects: usize,
    pub periods: PeriodsPerSubject,
    pub grid: TimeGrid,
    pub intercept: CoefficientShape,
    pub effects: Vec<EffectSpec>,
    pub kernel_subject: KernelConfig,
    pub kernel_noise: KernelConfig,
    /// Multiply each period's error curve by an independent heavy-tailed
    /// scale (t₃ scale mixture). Off by default.
    #[serde(default)]
    pub heavy_tail_noise: bool,
    pub seed: u64,
}

/// Everything the generator drew, for exact reconstruction in tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    /// (R+1) × K coefficient curves, intercept first.
    pub beta_on_grid: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
    /// I × R covariate draws, row-major.
    pub covariates: Vec<Vec<f64>>,
    /// I × K subject deviations.
    pub subject_effects: Vec<Vec<f64>>,
    /// M × K period errors (after any heavy-tail scaling).
    pub period_errors: Vec<Vec<f64>>,
    pub subject_of_row: Vec<usize>,
    pub period_of_row: Vec<usize>,
    pub seed: u64,
}

impl TruthRecord {
    /// Reassemble the response matrix from the stored components, using the
    /// same arithmetic order as the generator.
    pub fn assemble_responses(&self) -> DMatrix<f64> {
        let m = self.subject_of_row.len();
        let k = self.beta_on_grid[0].len();
        DMatrix::from_fn(m, k, |row, col| {
            let subj = self.subject_of_row[row];
            let mut fixed = self.beta_on_grid[0][col];
            for (r, x) in self.covariates[subj].iter().enumerate() {
                fixed += self.beta_on_grid[r + 1][col] * x;
            }
            fixed + self.subject_effects[subj][col] + self.period_errors[row][col]
        })
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::Config("need at least one subject".into()));
        }
        for kernel in [&self.kernel_subject, &self.kernel_noise] {
            if kernel.variance < 0.0 {
                return Err(Error::Config("kernel variance must be >= 0".into()));
            }
            if kernel.length_scale_min <= 0.0 {
                return Err(Error::Config("correlation length must be > 0".into()));
            }
        }
        let check_j = |j: usize| -> Result<()> {
            if !(1..=50).contains(&j) {
                return Err(Error::Config(format!("periods per subject must be in 1..=50, got {j}")));
            }
            Ok(())
        };
        match &self.periods {
            PeriodsPerSubject::Fixed { count } => check_j(*count)?,
            PeriodsPerSubject::Uniform { min, max } => {
                check_j(*min)?;
                check_j(*max)?;
                if min > max {
                    return Err(Error::Config("period range min > max".into()));
                }
            }
            PeriodsPerSubject::PerSubject { counts } => {
                if counts.len() != self.subjects {
                    return Err(Error::Config(format!(
                        "{} period counts for {} subjects",
                        counts.len(),
                        self.subjects
                    )));
                }
                for &j in counts {
                    check_j(j)?;
                }
            }
        }
        for e in &self.effects {
            if let CovariateDistribution::Bernoulli { p } = e.distribution {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("Bernoulli p = {p}")));
                }
            }
        }
        Ok(())
    }

    /// Parse a config from its TOML representation.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: GeneratorConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn period_counts(&self, seed: u64) -> Vec<usize> {
        match &self.periods {
            PeriodsPerSubject::Fixed { count } => vec![*count; self.subjects],
            PeriodsPerSubject::Uniform { min, max } => (0..self.subjects)
                .map(|i| {
                    let mut r = rng::stream(seed, domain::SIM_PERIODS, i as u64);
                    r.random_range(*min..=*max)
                })
                .collect(),
            PeriodsPerSubject::PerSubject { counts } => counts.clone(),
        }
    }

    /// Small dense instance used throughout the test suites.
    pub fn small_test(subjects: usize, periods: usize, grid: TimeGrid, seed: u64) -> Self {
        GeneratorConfig {
            subjects,
            periods: PeriodsPerSubject::Fixed { count: periods },
            intercept: CoefficientShape::Constant { value: 1.0 },
            effects: vec![EffectSpec {
                name: "x".into(),
                distribution: CovariateDistribution::Bernoulli { p: 0.5 },
                shape: CoefficientShape::Constant { value: 2.0 },
            }],
            kernel_subject: KernelConfig {
                family: KernelFamily::SquaredExponential,
                variance: 1.0,
                length_scale_min: 30.0,
            },
            kernel_noise: KernelConfig {
                family: KernelFamily::SquaredExponential,
                variance: 1.0,
                length_scale_min: 15.0,
            },
            heavy_tail_noise: false,
            grid,
            seed,
        }
    }

    /// Default instance mirroring the motivating sleep study: 174 subjects,
    /// a fixed period profile totalling 1812 with median 11 and range 5-20,
    /// the 84-point 5-minute grid, and the seven standard covariates.
    pub fn default_sleep_study(seed: u64) -> Self {
        let counts_by_value: [(usize, usize); 16] = [
            (5, 18),
            (6, 16),
            (7, 14),
            (8, 12),
            (9, 12),
            (10, 12),
            (11, 40),
            (12, 9),
            (13, 7),
            (14, 7),
            (15, 6),
            (16, 5),
            (17, 4),
            (18, 4),
            (19, 3),
            (20, 5),
        ];
        let mut counts = Vec::with_capacity(174);
        for (value, n) in counts_by_value {
            counts.extend(std::iter::repeat(value).take(n));
        }
        debug_assert_eq!(counts.len(), 174);
        debug_assert_eq!(counts.iter().sum::<usize>(), 1812);

        let bern = |p: f64| CovariateDistribution::Bernoulli { p };
        let constant = |value: f64| CoefficientShape::Constant { value };
        GeneratorConfig {
            subjects: 174,
            periods: PeriodsPerSubject::PerSubject { counts },
            grid: TimeGrid::default_sleep(),
            intercept: constant(140.0),
            effects: vec![
                EffectSpec {
                    name: "age".into(),
                    distribution: CovariateDistribution::StandardNormal,
                    shape: constant(-3.0),
                },
                EffectSpec {
                    name: "sex".into(),
                    distribution: bern(0.5),
                    shape: constant(2.0),
                },
                EffectSpec {
                    name: "bmi".into(),
                    distribution: bern(0.25),
                    shape: constant(0.0),
                },
                EffectSpec {
                    name: "osa".into(),
                    distribution: bern(0.5),
                    shape: constant(5.0),
                },
                EffectSpec {
                    name: "biguanide".into(),
                    distribution: bern(0.83),
                    // Drug effect peaking mid-sleep, around three hours in.
                    shape: CoefficientShape::Bump {
                        center_min: 180.0,
                        width_min: 80.0,
                        height: -8.0,
                    },
                },
                EffectSpec {
                    name: "sulfonylurea".into(),
                    distribution: bern(0.38),
                    shape: constant(0.0),
                },
                EffectSpec {
                    name: "hba1c".into(),
                    distribution: CovariateDistribution::StandardNormal,
                    shape: constant(8.0),
                },
            ],
            kernel_subject: KernelConfig {
                family: KernelFamily::SquaredExponential,
                variance: 400.0, // sd 20 mg/dL
                length_scale_min: 60.0,
            },
            kernel_noise: KernelConfig {
                family: KernelFamily::SquaredExponential,
                variance: 225.0, // sd 15 mg/dL
                length_scale_min: 60.0,
            },
            heavy_tail_noise: false,
            seed,
        }
    }
}

/// Draw `n` iid mean-zero Gaussian rows with the kernel's covariance on the
/// grid, via one Cholesky factorization (ridge `1e-10·σ²` on failure).
pub fn gp_sample(
    kernel: &KernelConfig,
    grid: &TimeGrid,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let k = grid.len();
    if kernel.variance == 0.0 {
        // Consume no randomness: a zero-variance process is identically zero.
        return Ok(DMatrix::zeros(n, k));
    }
    let sigma = kernel.matrix(grid);
    let l = match sigma.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let mut ridged = sigma;
            let ridge = 1e-10 * kernel.variance;
            for j in 0..k {
                ridged[(j, j)] += ridge;
            }
            ridged
                .cholesky()
                .ok_or(Error::NotPositiveSemidefinite)?
                .l()
        }
    };
    let mut out = DMatrix::zeros(n, k);
    let mut z = DVector::zeros(k);
    for row in 0..n {
        for j in 0..k {
            z[j] = rng.sample(StandardNormal);
        }
        let sample = &l * &z;
        for j in 0..k {
            out[(row, j)] = sample[j];
        }
    }
    Ok(out)
}

/// Simulate a dataset and record every generated component.
pub fn simulate_dataset(cfg: &GeneratorConfig) -> Result<(FunctionalDataset, TruthRecord)> {
    cfg.validate()?;
    let grid = &cfg.grid;
    let k = grid.len();
    let n_effects = cfg.effects.len();

    let counts = cfg.period_counts(cfg.seed);
    let m: usize = counts.iter().sum();

    let mut beta_on_grid = Vec::with_capacity(n_effects + 1);
    beta_on_grid.push(cfg.intercept.on_grid(grid));
    for e in &cfg.effects {
        beta_on_grid.push(e.shape.on_grid(grid));
    }

    let mut covariates = DMatrix::zeros(cfg.subjects, n_effects);
    for i in 0..cfg.subjects {
        let mut r = rng::stream(cfg.seed, domain::SIM_COVARIATES, i as u64);
        for (j, e) in cfg.effects.iter().enumerate() {
            covariates[(i, j)] = match e.distribution {
                CovariateDistribution::Bernoulli { p } => {
                    if r.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
                CovariateDistribution::StandardNormal => r.sample(StandardNormal),
            };
        }
    }

    let mut gp_rng = rng::stream(cfg.seed, domain::SIM_SUBJECT_GP, 0);
    let subject_effects = gp_sample(&cfg.kernel_subject, grid, cfg.subjects, &mut gp_rng)?;
    let mut noise_rng = rng::stream(cfg.seed, domain::SIM_NOISE_GP, 0);
    let mut period_errors = gp_sample(&cfg.kernel_noise, grid, m, &mut noise_rng)?;

    if cfg.heavy_tail_noise {
        // t₃ scale mixture: multiply each period's curve by sqrt(3/χ²₃).
        let mut scale_rng = rng::stream(cfg.seed, domain::SIM_NOISE_SCALE, 0);
        for row in 0..m {
            let chi2: f64 = (0..3)
                .map(|_| {
                    let z: f64 = scale_rng.sample(StandardNormal);
                    z * z
                })
                .sum();
            let s = (3.0 / chi2).sqrt();
            for j in 0..k {
                period_errors[(row, j)] *= s;
            }
        }
    }

    let mut subject_of_row = Vec::with_capacity(m);
    let mut period_of_row = Vec::with_capacity(m);
    for (i, &j_count) in counts.iter().enumerate() {
        for j in 0..j_count {
            subject_of_row.push(i);
            period_of_row.push(j);
        }
    }

    let truth = TruthRecord {
        beta_on_grid,
        covariate_names: cfg.effects.iter().map(|e| e.name.clone()).collect(),
        covariates: (0..cfg.subjects)
            .map(|i| covariates.row(i).iter().copied().collect())
            .collect(),
        subject_effects: (0..cfg.subjects)
            .map(|i| subject_effects.row(i).iter().copied().collect())
            .collect(),
        period_errors: (0..m)
            .map(|r| period_errors.row(r).iter().copied().collect())
            .collect(),
        subject_of_row: subject_of_row.clone(),
        period_of_row: period_of_row.clone(),
        seed: cfg.seed,
    };

    let responses = truth.assemble_responses();
    let dataset = FunctionalDataset::from_parts(
        responses,
        subject_of_row,
        period_of_row,
        covariates,
        truth.covariate_names.clone(),
        grid.clone(),
    )?;
    Ok((dataset, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_kernels_reproduce_fixed_effects_exactly() {
        let grid = TimeGrid::uniform(5.0, 5.0, 10).unwrap();
        let mut cfg = GeneratorConfig::small_test(6, 2, grid, 3);
        cfg.kernel_subject.variance = 0.0;
        cfg.kernel_noise.variance = 0.0;
        let (data, truth) = simulate_dataset(&cfg).unwrap();
        for row in 0..data.n_rows() {
            let subj = data.subject_of_row()[row];
            let x = truth.covariates[subj][0];
            for col in 0..10 {
                let expected = 1.0 + 2.0 * x;
                assert_eq!(data.responses()[(row, col)], expected);
            }
        }
    }

    #[test]
    fn reconstruction_is_exact() {
        let grid = TimeGrid::uniform(5.0, 5.0, 12).unwrap();
        let mut cfg = GeneratorConfig::small_test(10, 4, grid, 9);
        cfg.heavy_tail_noise = true;
        let (data, truth) = simulate_dataset(&cfg).unwrap();
        let rebuilt = truth.assemble_responses();
        assert_eq!(data.responses(), &rebuilt);
    }

    #[test]
    fn same_seed_same_dataset() {
        let grid = TimeGrid::uniform(5.0, 5.0, 8).unwrap();
        let cfg = GeneratorConfig::small_test(7, 3, grid, 2024);
        let (a, _) = simulate_dataset(&cfg).unwrap();
        let (b, _) = simulate_dataset(&cfg).unwrap();
        assert_eq!(a.responses(), b.responses());
        assert_eq!(a.covariates(), b.covariates());
    }

    #[test]
    fn default_sleep_study_shape() {
        let cfg = GeneratorConfig::default_sleep_study(1);
        let (data, _) = simulate_dataset(&cfg).unwrap();
        assert_eq!(data.n_subjects(), 174);
        assert_eq!(data.n_rows(), 1812);
        assert_eq!(data.grid().len(), 84);
        let mut js: Vec<usize> = (0..174).map(|i| data.periods_of_subject(i)).collect();
        js.sort_unstable();
        assert_eq!((js[86] + js[87]) as f64 / 2.0, 11.0);
        assert_eq!(*js.first().unwrap(), 5);
        assert_eq!(*js.last().unwrap(), 20);
    }

    #[test]
    fn gp_zero_scale_is_zero() {
        let grid = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
        let kernel = KernelConfig {
            family: KernelFamily::Exponential,
            variance: 0.0,
            length_scale_min: 10.0,
        };
        let mut r = rng::stream(1, 50, 0);
        let s = gp_sample(&kernel, &grid, 4, &mut r).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gp_empirical_covariance_matches_kernel() {
        let grid = TimeGrid::uniform(0.0, 10.0, 8).unwrap();
        let kernel = KernelConfig {
            family: KernelFamily::SquaredExponential,
            variance: 2.0,
            length_scale_min: 20.0,
        };
        let mut r = rng::stream(99, 51, 0);
        let n = 50_000;
        let s = gp_sample(&kernel, &grid, n, &mut r).unwrap();
        let target = kernel.matrix(&grid);
        for i in 0..8 {
            for j in 0..8 {
                let emp: f64 =
                    (0..n).map(|row| s[(row, i)] * s[(row, j)]).sum::<f64>() / n as f64;
                assert!(
                    (emp - target[(i, j)]).abs() < 0.05 * kernel.variance,
                    "cov[{i},{j}] = {emp} vs {}",
                    target[(i, j)]
                );
            }
        }
    }

    #[test]
    fn gp_long_correlation_length_gives_constant_rows() {
        let grid = TimeGrid::uniform(0.0, 5.0, 10).unwrap();
        let kernel = KernelConfig {
            family: KernelFamily::SquaredExponential,
            variance: 1.0,
            length_scale_min: 1e6,
        };
        let mut r = rng::stream(4, 52, 0);
        let s = gp_sample(&kernel, &grid, 20, &mut r).unwrap();
        for row in 0..20 {
            for j in 1..10 {
                assert!((s[(row, j)] - s[(row, 0)]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn between_subject_spread_grows_with_subject_variance() {
        let grid = TimeGrid::uniform(5.0, 5.0, 8).unwrap();
        let spread_at = |var: f64| -> f64 {
            let mut total = 0.0;
            for rep in 0..30 {
                let mut cfg = GeneratorConfig::small_test(20, 3, grid.clone(), 1000 + rep);
                cfg.kernel_subject.variance = var;
                let (data, _) = simulate_dataset(&cfg).unwrap();
                // variance of subject means
                let means: Vec<f64> = (0..20)
                    .map(|s| {
                        let rows: Vec<usize> = (0..data.n_rows())
                            .filter(|&r| data.subject_of_row()[r] == s)
                            .collect();
                        let mut sum = 0.0;
                        for &r in &rows {
                            sum += data.responses().row(r).sum();
                        }
                        sum / (rows.len() * 8) as f64
                    })
                    .collect();
                let mbar = means.iter().sum::<f64>() / 20.0;
                total += means.iter().map(|m| (m - mbar) * (m - mbar)).sum::<f64>() / 19.0;
            }
            total / 30.0
        };
        let s0 = spread_at(0.25);
        let s1 = spread_at(1.0);
        let s2 = spread_at(4.0);
        assert!(s0 < s1 && s1 < s2, "{s0} {s1} {s2}");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = GeneratorConfig::default_sleep_study(7);
        let text = cfg.to_toml_string();
        let back = GeneratorConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.subjects, 174);
        assert_eq!(back.effects.len(), 7);
        let (a, _) = simulate_dataset(&cfg).unwrap();
        let (b, _) = simulate_dataset(&back).unwrap();
        assert_eq!(a.responses(), b.responses());
    }
}

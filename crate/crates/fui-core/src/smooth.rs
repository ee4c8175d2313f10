//! Penalized cubic regression spline smoothing with GCV penalty selection.
//!
//! The smoother is diagonalized once per (grid, config) pair: with
//! BᵀB = LLᵀ and the Demmler-Reinsch decomposition L⁻¹PL⁻ᵀ = UΓUᵀ, the
//! fitted values at penalty λ are G (w ⊘ (1+λγ)) where G = BL⁻ᵀU has
//! orthonormal columns and w = Gᵀy. Each GCV evaluation is then O(n), so
//! smoothing inside every bootstrap replicate is cheap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bspline::{basis_matrix, second_difference_penalty};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Smoothing controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothConfig {
    /// Number of cubic B-spline basis functions (capped by the grid size).
    pub basis_size: usize,
    /// Number of points in the log-spaced GCV grid.
    pub gcv_grid_size: usize,
    /// GCV grid range for the penalty.
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Pin the penalty instead of selecting it by GCV.
    #[serde(default)]
    pub lambda_override: Option<f64>,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            basis_size: 30,
            gcv_grid_size: 50,
            lambda_min: 1e-6,
            lambda_max: 1e6,
            lambda_override: None,
        }
    }
}

/// A coefficient curve on the grid, before and after smoothing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientFunction {
    pub values: Vec<f64>,
    pub raw: Vec<f64>,
    pub lambda_smooth: f64,
    pub covariate_name: String,
    /// Set when the grid was too short for a spline and the input was
    /// passed through unchanged.
    pub passthrough: bool,
}

/// Pre-diagonalized smoother for one (grid, config) pair. Reusable across
/// curves; applying it is O(K·n).
#[derive(Debug, Clone)]
pub struct SmoothingOperator {
    /// K × n matrix with orthonormal columns.
    g: Option<DMatrix<f64>>,
    /// Penalty eigenvalues γ ≥ 0 in the rotated basis.
    gamma: DVector<f64>,
    lambdas: Vec<f64>,
    lambda_override: Option<f64>,
    k: usize,
}

impl SmoothingOperator {
    pub fn new(grid: &TimeGrid, cfg: &SmoothConfig) -> Result<Self> {
        let k = grid.len();
        if cfg.lambda_min <= 0.0 || cfg.lambda_max < cfg.lambda_min || cfg.gcv_grid_size < 2 {
            return Err(Error::InvalidArgument("bad GCV grid".into()));
        }
        if k < 4 {
            // Too short for a cubic spline; degrade to the identity.
            return Ok(Self {
                g: None,
                gamma: DVector::zeros(0),
                lambdas: Vec::new(),
                lambda_override: cfg.lambda_override,
                k,
            });
        }
        let n = cfg.basis_size.min(k - 1).max(4);
        let b = basis_matrix(grid.points(), n, grid.start(), grid.end());
        let btb = b.transpose() * &b;
        let chol = btb
            .cholesky()
            .ok_or(Error::NotPositiveSemidefinite)?;
        let l = chol.l();
        let penalty = second_difference_penalty(n);
        // F = L⁻¹ P L⁻ᵀ
        let tmp = l
            .solve_lower_triangular(&penalty)
            .ok_or(Error::NotPositiveSemidefinite)?;
        let f = l
            .solve_lower_triangular(&tmp.transpose())
            .ok_or(Error::NotPositiveSemidefinite)?;
        let f = (&f + f.transpose()) * 0.5;
        let eig = SymmetricEigen::new(f);
        // The difference penalty has an exact two-dimensional null space
        // (constant and linear coefficient sequences). Numerical residue
        // there would let large penalties shrink straight lines, so clamp
        // near-zero eigenvalues to exactly zero.
        let gamma_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let gamma = eig
            .eigenvalues
            .map(|g| if g <= 1e-10 * gamma_max { 0.0 } else { g });
        // G = B L⁻ᵀ U = (L⁻¹ Bᵀ)ᵀ U
        let linv_bt = l
            .solve_lower_triangular(&b.transpose())
            .ok_or(Error::NotPositiveSemidefinite)?;
        let g = linv_bt.transpose() * eig.eigenvectors;

        let lambdas = (0..cfg.gcv_grid_size)
            .map(|i| {
                let t = i as f64 / (cfg.gcv_grid_size - 1) as f64;
                cfg.lambda_min * (cfg.lambda_max / cfg.lambda_min).powf(t)
            })
            .collect();

        Ok(Self {
            g: Some(g),
            gamma,
            lambdas,
            lambda_override: cfg.lambda_override,
            k,
        })
    }

    /// Smooth one curve. Deterministic given the inputs.
    pub fn apply(&self, raw: &[f64], covariate_name: &str) -> Result<CoefficientFunction> {
        self.fit(raw, covariate_name, self.lambda_override)
    }

    /// Smooth one curve with a pinned penalty, bypassing GCV selection.
    /// Used inside the bootstrap, where the penalty chosen on the original
    /// data is reapplied to every replicate so the smoother stays a fixed
    /// linear operator across replicates.
    pub fn apply_with_lambda(
        &self,
        raw: &[f64],
        covariate_name: &str,
        lambda: f64,
    ) -> Result<CoefficientFunction> {
        self.fit(raw, covariate_name, Some(lambda.max(0.0)))
    }

    fn fit(
        &self,
        raw: &[f64],
        covariate_name: &str,
        lambda_override: Option<f64>,
    ) -> Result<CoefficientFunction> {
        if raw.len() != self.k {
            return Err(Error::InvalidArgument(format!(
                "curve has {} points, grid has {}",
                raw.len(),
                self.k
            )));
        }
        if let Some(idx) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: idx });
        }
        let g = match &self.g {
            None => {
                return Ok(CoefficientFunction {
                    values: raw.to_vec(),
                    raw: raw.to_vec(),
                    lambda_smooth: 0.0,
                    covariate_name: covariate_name.to_string(),
                    passthrough: true,
                });
            }
            Some(g) => g,
        };

        let y = DVector::from_column_slice(raw);
        let w = g.transpose() * &y;
        let yty = y.dot(&y);
        let n = self.gamma.len();
        let kf = self.k as f64;

        let gcv_at = |lambda: f64| {
            let mut rss = yty;
            let mut tr = 0.0;
            for j in 0..n {
                let a = 1.0 / (1.0 + lambda * self.gamma[j]);
                rss -= w[j] * w[j] * (2.0 * a - a * a);
                tr += a;
            }
            let rss = rss.max(0.0);
            let denom = kf - tr;
            kf * rss / (denom * denom)
        };

        let lambda = match lambda_override {
            Some(l) => l.max(0.0),
            None => {
                let mut best = (self.lambdas[0], gcv_at(self.lambdas[0]));
                for &l in &self.lambdas[1..] {
                    let v = gcv_at(l);
                    if v < best.1 {
                        best = (l, v);
                    }
                }
                best.0
            }
        };

        let shrunk = DVector::from_fn(n, |j, _| w[j] / (1.0 + lambda * self.gamma[j]));
        let values = g * shrunk;
        Ok(CoefficientFunction {
            values: values.iter().copied().collect(),
            raw: raw.to_vec(),
            lambda_smooth: lambda,
            covariate_name: covariate_name.to_string(),
            passthrough: false,
        })
    }
}

/// One-off smoothing of a single curve; builds the operator internally.
pub fn smooth_curve(raw: &[f64], grid: &TimeGrid, cfg: &SmoothConfig) -> Result<CoefficientFunction> {
    SmoothingOperator::new(grid, cfg)?.apply(raw, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn grid84() -> TimeGrid {
        TimeGrid::default_sleep()
    }

    #[test]
    fn linear_curves_pass_through_unchanged() {
        let grid = grid84();
        for (a, b) in [(0.0, 0.0), (2.0, 0.3), (-5.0, -0.01), (100.0, 1.7)] {
            let raw: Vec<f64> = grid.points().iter().map(|&t| a + b * t).collect();
            let sm = smooth_curve(&raw, &grid, &SmoothConfig::default()).unwrap();
            for (v, r) in sm.values.iter().zip(&raw) {
                assert!((v - r).abs() < 1e-8, "linear reproduction failed: {v} vs {r}");
            }
        }
    }

    #[test]
    fn noisy_sine_gets_closer_to_truth() {
        let grid = grid84();
        let truth: Vec<f64> = grid
            .points()
            .iter()
            .map(|&t| (2.0 * std::f64::consts::PI * t / 420.0).sin())
            .collect();
        let op = SmoothingOperator::new(&grid, &SmoothConfig::default()).unwrap();
        let mut wins = 0;
        for rep in 0..100 {
            let mut r = rng::stream(2024, 99, rep);
            let noisy: Vec<f64> = truth
                .iter()
                .map(|&v| v + 0.1 * r.sample::<f64, _>(StandardNormal))
                .collect();
            let sm = op.apply(&noisy, "sine").unwrap();
            let rmse = |xs: &[f64]| -> f64 {
                (xs.iter()
                    .zip(&truth)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / xs.len() as f64)
                    .sqrt()
            };
            if rmse(&sm.values) < rmse(&noisy) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "smoother beat the raw curve only {wins}/100 times");
    }

    #[test]
    fn penalty_limits_match_unpenalized_and_line_fits() {
        let grid = grid84();
        let raw: Vec<f64> = grid
            .points()
            .iter()
            .map(|&t| (t / 100.0).sin() + 0.2 * (t / 35.0).cos())
            .collect();

        // λ → 0: unpenalized spline fit, computed directly from the basis.
        let cfg0 = SmoothConfig {
            lambda_override: Some(0.0),
            ..Default::default()
        };
        let sm0 = smooth_curve(&raw, &grid, &cfg0).unwrap();
        let b = basis_matrix(grid.points(), 30, grid.start(), grid.end());
        let btb = b.transpose() * &b;
        let coef = btb.cholesky().unwrap().solve(&(b.transpose() * DVector::from_column_slice(&raw)));
        let unpen = &b * coef;
        for (v, u) in sm0.values.iter().zip(unpen.iter()) {
            assert!((v - u).abs() < 1e-8);
        }

        // λ → ∞: the least-squares line.
        let cfg_inf = SmoothConfig {
            lambda_override: Some(1e12),
            ..Default::default()
        };
        let sm_inf = smooth_curve(&raw, &grid, &cfg_inf).unwrap();
        let k = grid.len() as f64;
        let tbar = grid.points().iter().sum::<f64>() / k;
        let ybar = raw.iter().sum::<f64>() / k;
        let sxy: f64 = grid.points().iter().zip(&raw).map(|(&t, &y)| (t - tbar) * (y - ybar)).sum();
        let sxx: f64 = grid.points().iter().map(|&t| (t - tbar) * (t - tbar)).sum();
        let slope = sxy / sxx;
        for (&t, v) in grid.points().iter().zip(&sm_inf.values) {
            let line = ybar + slope * (t - tbar);
            assert!((v - line).abs() < 1e-5, "{v} vs {line}");
        }
    }

    #[test]
    fn smoother_is_linear_for_fixed_lambda() {
        let grid = grid84();
        let cfg = SmoothConfig {
            lambda_override: Some(12.5),
            ..Default::default()
        };
        let op = SmoothingOperator::new(&grid, &cfg).unwrap();
        let mut r = rng::stream(7, 98, 0);
        let x: Vec<f64> = (0..84).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..84).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(xv, yv)| a * xv + b * yv).collect();
        let sx = op.apply(&x, "").unwrap().values;
        let sy = op.apply(&y, "").unwrap().values;
        let sc = op.apply(&combo, "").unwrap().values;
        for i in 0..84 {
            assert!((sc[i] - (a * sx[i] + b * sy[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn gcv_lambda_invariant_to_adding_constant() {
        let grid = grid84();
        let op = SmoothingOperator::new(&grid, &SmoothConfig::default()).unwrap();
        let mut r = rng::stream(11, 97, 0);
        let raw: Vec<f64> = grid
            .points()
            .iter()
            .map(|&t| (t / 80.0).sin() + 0.3 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let shifted: Vec<f64> = raw.iter().map(|v| v + 57.0).collect();
        let a = op.apply(&raw, "").unwrap();
        let b = op.apply(&shifted, "").unwrap();
        assert_eq!(a.lambda_smooth, b.lambda_smooth);
    }

    #[test]
    fn short_grid_passes_through_with_flag() {
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let sm = smooth_curve(&[1.0, 5.0, 2.0], &grid, &SmoothConfig::default()).unwrap();
        assert!(sm.passthrough);
        assert_eq!(sm.values, vec![1.0, 5.0, 2.0]);
    }

    #[test]
    fn non_finite_input_is_an_error_naming_the_index() {
        let grid = grid84();
        let mut raw = vec![0.0; 84];
        raw[17] = f64::NAN;
        match smooth_curve(&raw, &grid, &SmoothConfig::default()) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 17),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}

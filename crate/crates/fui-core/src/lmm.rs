//! Pointwise random-intercept linear mixed model, fitted by profiled REML.
//!
//! At one grid point the model is `y = Xβ + Zb + ε` with a single random
//! intercept per subject, `b ~ N(0, σ_b² I)` and `ε ~ N(0, σ_ε² I)`.
//! Writing λ = σ_b²/σ_ε² and H(λ) = I + λZZᵀ, H is block diagonal with
//! per-subject blocks `I + λ11ᵀ`, so every determinant and quadratic form
//! reduces to per-subject scalars:
//!
//! * H_i⁻¹ = I − c_i 11ᵀ with c_i = λ/(1 + λ n_i)
//! * log|H| = Σ_i log(1 + λ n_i)
//!
//! σ_ε² is profiled out analytically, leaving a one-dimensional search over
//! λ. After an O(M p²) pass over the data each objective evaluation costs
//! O(I p²), never O(M³).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::dataset::{FunctionalDataset, PointwiseDesign};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;

const LN_2PI: f64 = 1.8378770664093453;

/// REML solver controls.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Convergence tolerance on the restricted log-likelihood.
    pub objective_tol: f64,
    /// Iteration cap for the line search.
    pub max_iter: usize,
    /// Floor for the reported residual variance on degenerate (exact-fit)
    /// inputs.
    pub sigma2_floor: f64,
    /// Pin λ = σ_b²/σ_ε² instead of optimizing it.
    pub lambda_override: Option<f64>,
    /// Upper end of the bracket expansion for λ.
    pub max_lambda: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            objective_tol: 1e-8,
            max_iter: 200,
            sigma2_floor: 1e-10,
            lambda_override: None,
            max_lambda: 1e10,
        }
    }
}

/// Mixed-model fit at a single grid point.
#[derive(Debug, Clone)]
pub struct PointwiseFit {
    /// Fixed-effect estimates, intercept first.
    pub beta: DVector<f64>,
    /// Model-based GLS standard errors.
    pub se: DVector<f64>,
    /// Between-subject variance component (0 at the boundary).
    pub sigma2_b: f64,
    /// Residual variance (floored away from zero).
    pub sigma2_eps: f64,
    /// Variance ratio σ_b²/σ_ε² at the optimum.
    pub lambda: f64,
    pub converged: bool,
    /// Attained restricted log-likelihood.
    pub reml_value: f64,
}

/// Fits at every grid point, in grid order.
#[derive(Debug, Clone)]
pub struct PointwiseFitSeries {
    pub fits: Vec<PointwiseFit>,
    pub grid: TimeGrid,
    /// Design column names, intercept first.
    pub coefficient_names: Vec<String>,
}

impl PointwiseFitSeries {
    pub fn n_coefficients(&self) -> usize {
        self.coefficient_names.len()
    }

    /// Raw coefficient curve for design column `j`.
    pub fn coefficient_curve(&self, j: usize) -> Vec<f64> {
        self.fits.iter().map(|f| f.beta[j]).collect()
    }

    /// Model-based standard-error curve for design column `j`.
    pub fn se_curve(&self, j: usize) -> Vec<f64> {
        self.fits.iter().map(|f| f.se[j]).collect()
    }
}

/// Detect linearly dependent columns by modified Gram-Schmidt. Returns the
/// names of columns that are (numerically) in the span of earlier ones.
pub(crate) fn dependent_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let p = x.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut dependent = Vec::new();
    for j in 0..p {
        let mut v = x.column(j).into_owned();
        let original = v.norm();
        for b in &basis {
            let coef = b.dot(&v);
            v.axpy(-coef, b, 1.0);
        }
        // Re-orthogonalize once; plain MGS loses accuracy on close columns.
        for b in &basis {
            let coef = b.dot(&v);
            v.axpy(-coef, b, 1.0);
        }
        let norm = v.norm();
        if norm <= 1e-8 * original.max(1e-300) {
            dependent.push(names.get(j).cloned().unwrap_or_else(|| format!("col{j}")));
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

/// Per-subject sufficient statistics plus design totals; everything a
/// profiled-REML evaluation needs.
struct DesignStats {
    m: usize,
    p: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    /// (n_i, Σ rows of X_i, Σ y_i) per subject.
    groups: Vec<(f64, DVector<f64>, f64)>,
}

impl DesignStats {
    fn new(design: &PointwiseDesign) -> Result<Self> {
        let m = design.x.nrows();
        let p = design.x.ncols();
        if design.y.len() != m || design.groups.len() != m {
            return Err(Error::Dataset("design rows misaligned".into()));
        }
        if m <= p {
            return Err(Error::Dataset(format!(
                "need more rows than design columns ({m} rows, {p} columns)"
            )));
        }
        let dependent = dependent_columns(&design.x, &design.column_names);
        if !dependent.is_empty() {
            return Err(Error::SingularDesign { columns: dependent });
        }
        let n_groups = design.groups.iter().copied().max().unwrap() + 1;
        let distinct = {
            let mut seen = vec![false; n_groups];
            for &g in &design.groups {
                seen[g] = true;
            }
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::Dataset("need at least 2 subjects".into()));
        }

        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        let mut groups = vec![(0.0, DVector::zeros(p), 0.0); n_groups];
        for row in 0..m {
            let x_row = design.x.row(row).transpose();
            let y = design.y[row];
            xtx.ger(1.0, &x_row, &x_row, 1.0);
            xty.axpy(y, &x_row, 1.0);
            yty += y * y;
            let g = &mut groups[design.groups[row]];
            g.0 += 1.0;
            g.1.axpy(1.0, &x_row, 1.0);
            g.2 += y;
        }
        groups.retain(|g| g.0 > 0.0);

        Ok(Self {
            m,
            p,
            xtx,
            xty,
            yty,
            groups,
        })
    }

    /// Evaluate the profiled restricted log-likelihood at λ, returning the
    /// GLS solution alongside.
    fn profile(&self, lambda: f64, sigma2_floor: f64) -> Result<ProfilePoint> {
        let mut a = self.xtx.clone();
        let mut u = self.xty.clone();
        let mut w = self.yty;
        let mut logdet_h = 0.0;
        if lambda > 0.0 {
            for (n, sx, sy) in &self.groups {
                let c = lambda / (1.0 + lambda * n);
                a.ger(-c, sx, sx, 1.0);
                u.axpy(-c * sy, sx, 1.0);
                w -= c * sy * sy;
                logdet_h += (1.0 + lambda * n).ln();
            }
        }
        let chol: Cholesky<f64, Dyn> = Cholesky::new(a).ok_or(Error::NotPositiveSemidefinite)?;
        let beta = chol.solve(&u);
        let quad = (w - u.dot(&beta)).max(0.0);
        let dof = (self.m - self.p) as f64;
        let sigma2_raw = quad / dof;
        let sigma2 = sigma2_raw.max(sigma2_floor);
        let logdet_a: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let reml = -0.5 * (dof * (LN_2PI + sigma2.ln()) + quad / sigma2 + logdet_h + logdet_a);
        Ok(ProfilePoint {
            lambda,
            beta,
            chol,
            sigma2_raw,
            sigma2,
            reml,
        })
    }
}

struct ProfilePoint {
    lambda: f64,
    beta: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    sigma2_raw: f64,
    sigma2: f64,
    reml: f64,
}

impl ProfilePoint {
    fn into_fit(self, converged: bool) -> PointwiseFit {
        let cov = self.chol.inverse() * self.sigma2;
        let p = self.beta.len();
        let se = DVector::from_fn(p, |j, _| cov[(j, j)].max(0.0).sqrt());
        PointwiseFit {
            beta: self.beta,
            se,
            sigma2_b: self.lambda * self.sigma2,
            sigma2_eps: self.sigma2,
            lambda: self.lambda,
            converged,
            reml_value: self.reml,
        }
    }
}

/// Restricted log-likelihood of the design at variance ratio `lambda`,
/// with σ_ε² profiled out analytically.
pub fn reml_objective(lambda: f64, design: &PointwiseDesign) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let stats = DesignStats::new(design)?;
    Ok(stats.profile(lambda, SolverOptions::default().sigma2_floor)?.reml)
}

/// Golden-section maximization of `f` on [a, b]. Terminates when the two
/// interior objective values agree within `tol` or after `max_iter`
/// shrinkage steps. Does not assume unimodality beyond the bracket.
fn golden_max<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, f64, bool)> {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut converged = false;
    for _ in 0..max_iter {
        if (fc - fd).abs() <= tol || (b - a).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()) {
            converged = true;
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d)?;
        }
    }
    let (x, fx) = if fc > fd { (c, fc) } else { (d, fd) };
    Ok((x, fx, converged))
}

/// Fit the random-intercept model at one grid point.
///
/// λ is searched on the log(1+λ) scale: a ladder of candidate points is
/// expanded until the best value is interior or sits at the λ = 0
/// boundary, then the surrounding bracket is refined by golden section.
pub fn fit_pointwise(design: &PointwiseDesign, opts: &SolverOptions) -> Result<PointwiseFit> {
    let stats = DesignStats::new(design)?;

    if let Some(lambda) = opts.lambda_override {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda override must be nonnegative, got {lambda}"
            )));
        }
        return Ok(stats.profile(lambda, opts.sigma2_floor)?.into_fit(true));
    }

    // Exact fit: the random effect cannot improve on zero residuals.
    let at_zero = stats.profile(0.0, opts.sigma2_floor)?;
    if at_zero.sigma2_raw <= opts.sigma2_floor {
        let mut fit = at_zero.into_fit(true);
        fit.sigma2_b = 0.0;
        fit.lambda = 0.0;
        return Ok(fit);
    }

    // Ladder on θ = log(1+λ).
    let mut thetas = vec![0.0];
    let mut lam = 0.01;
    while lam < opts.max_lambda {
        thetas.push(lam.ln_1p());
        lam *= 4.0;
    }
    thetas.push(opts.max_lambda.ln_1p());
    let values: Vec<f64> = thetas
        .iter()
        .map(|&t| stats.profile(t.exp_m1(), opts.sigma2_floor).map(|p| p.reml))
        .collect::<Result<_>>()?;
    let best = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();

    let lo = if best == 0 { 0.0 } else { thetas[best - 1] };
    let hi = if best + 1 < thetas.len() {
        thetas[best + 1]
    } else {
        thetas[best]
    };
    let (theta_hat, _, converged) = golden_max(
        |t| stats.profile(t.exp_m1(), opts.sigma2_floor).map(|p| p.reml),
        lo,
        hi,
        opts.objective_tol,
        opts.max_iter,
    )?;

    // Prefer the exact boundary when it is at least as good.
    let interior = stats.profile(theta_hat.exp_m1(), opts.sigma2_floor)?;
    let point = if at_zero.reml >= interior.reml {
        at_zero
    } else {
        interior
    };
    let boundary = point.lambda == 0.0;
    let mut fit = point.into_fit(converged);
    if boundary {
        fit.sigma2_b = 0.0;
        fit.lambda = 0.0;
    }
    Ok(fit)
}

/// Fit every grid point of the dataset. Fans out over grid indices; the
/// result is identical to sequential execution because each fit is pure.
pub fn fit_all_timepoints(
    dataset: &FunctionalDataset,
    opts: &SolverOptions,
) -> Result<PointwiseFitSeries> {
    let report = dataset.validate();
    if !report.is_valid() {
        return Err(Error::Dataset(report.violations.join("; ")));
    }
    let fits: Vec<PointwiseFit> = (0..dataset.grid().len())
        .into_par_iter()
        .map(|k| {
            let design = dataset.design_at(k)?;
            fit_pointwise(&design, opts).map_err(|e| Error::AtTimepoint {
                index: k,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let coefficient_names = dataset.design_at(0)?.column_names;
    Ok(PointwiseFitSeries {
        fits,
        grid: dataset.grid().clone(),
        coefficient_names,
    })
}

/// Sequential variant of [`fit_all_timepoints`] for use inside already
/// parallel callers (e.g. bootstrap replicates).
pub(crate) fn fit_all_timepoints_seq(
    dataset: &FunctionalDataset,
    opts: &SolverOptions,
) -> Result<PointwiseFitSeries> {
    let fits: Vec<PointwiseFit> = (0..dataset.grid().len())
        .map(|k| {
            let design = dataset.design_at(k)?;
            fit_pointwise(&design, opts).map_err(|e| Error::AtTimepoint {
                index: k,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let coefficient_names = dataset.design_at(0)?.column_names;
    Ok(PointwiseFitSeries {
        fits,
        grid: dataset.grid().clone(),
        coefficient_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn design(x: DMatrix<f64>, y: Vec<f64>, groups: Vec<usize>) -> PointwiseDesign {
        let names = (0..x.ncols())
            .map(|j| if j == 0 { "(Intercept)".into() } else { format!("x{j}") })
            .collect();
        PointwiseDesign {
            y: DVector::from_vec(y),
            x,
            groups,
            column_names: names,
        }
    }

    fn two_group_design() -> PointwiseDesign {
        let x = DMatrix::from_row_slice(6, 2, &[
            1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
        ]);
        let y = vec![1.0, 1.4, 0.8, 2.9, 3.2, 3.1];
        design(x, y, vec![0, 0, 0, 1, 1, 1])
    }

    #[test]
    fn lambda_zero_matches_ols_restricted_loglik() {
        let d = two_group_design();
        // Independent OLS route: normal equations on the raw design.
        let xtx = d.x.transpose() * &d.x;
        let beta = xtx.clone().try_inverse().unwrap() * d.x.transpose() * &d.y;
        let resid = &d.y - &d.x * &beta;
        let rss: f64 = resid.iter().map(|r| r * r).sum();
        let dof = (d.x.nrows() - d.x.ncols()) as f64;
        let sigma2 = rss / dof;
        let logdet_xtx = xtx.determinant().ln();
        let expected = -0.5 * (dof * (LN_2PI + sigma2.ln()) + dof + logdet_xtx);
        let got = reml_objective(0.0, &d).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-9);
    }

    #[test]
    fn pinned_lambda_zero_equals_ols_beta() {
        let d = two_group_design();
        let opts = SolverOptions {
            lambda_override: Some(0.0),
            ..Default::default()
        };
        let fit = fit_pointwise(&d, &opts).unwrap();
        let xtx = d.x.transpose() * &d.x;
        let beta_ols = xtx.try_inverse().unwrap() * d.x.transpose() * &d.y;
        for j in 0..2 {
            assert!((fit.beta[j] - beta_ols[j]).abs() < 1e-10);
        }
        assert_eq!(fit.sigma2_b, 0.0);
    }

    #[test]
    fn duplicated_rows_leave_ols_beta_unchanged() {
        let d = two_group_design();
        let m = d.x.nrows();
        let x2 = DMatrix::from_fn(2 * m, 2, |r, c| d.x[(r % m, c)]);
        let y2: Vec<f64> = (0..2 * m).map(|r| d.y[r % m]).collect();
        let groups2: Vec<usize> = (0..2 * m).map(|r| d.groups[r % m]).collect();
        let doubled = design(x2, y2, groups2);

        let opts = SolverOptions {
            lambda_override: Some(0.0),
            ..Default::default()
        };
        let f1 = fit_pointwise(&d, &opts).unwrap();
        let f2 = fit_pointwise(&doubled, &opts).unwrap();
        for j in 0..2 {
            assert!((f1.beta[j] - f2.beta[j]).abs() < 1e-10);
        }
        // The objective itself changes with the duplicated rows.
        let o1 = reml_objective(0.0, &d).unwrap();
        let o2 = reml_objective(0.0, &doubled).unwrap();
        assert!((o1 - o2).abs() > 1e-6);
    }

    #[test]
    fn constant_response_hits_the_floor() {
        let x = DMatrix::from_element(6, 1, 1.0);
        let d = design(x, vec![3.5; 6], vec![0, 0, 0, 1, 1, 1]);
        let fit = fit_pointwise(&d, &SolverOptions::default()).unwrap();
        assert_relative_eq!(fit.beta[0], 3.5, epsilon = 1e-12);
        assert_eq!(fit.sigma2_b, 0.0);
        assert_eq!(fit.sigma2_eps, 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn duplicate_intercept_column_is_singular() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let d = design(x, vec![1.0, 2.0, 3.0, 4.0], vec![0, 0, 1, 1]);
        match fit_pointwise(&d, &SolverOptions::default()) {
            Err(Error::SingularDesign { columns }) => {
                assert_eq!(columns, vec!["x1".to_string()]);
            }
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn optimizer_matches_coarse_lambda_grid() {
        // 10 subjects, strong between-subject variance.
        let mut y = Vec::new();
        let mut groups = Vec::new();
        let mut rng_state = 9u64;
        let mut next = || {
            // xorshift for a cheap deterministic stream
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for subject in 0..10 {
            let b = 4.0 * (next() - 0.5) * 2.0;
            for _ in 0..3 {
                y.push(1.0 + b + (next() - 0.5));
                groups.push(subject);
            }
        }
        let x = DMatrix::from_element(30, 1, 1.0);
        let d = design(x, y, groups);

        let fit = fit_pointwise(&d, &SolverOptions::default()).unwrap();

        // 2000-point log-spaced grid over the same objective.
        let mut best = (0.0, reml_objective(0.0, &d).unwrap());
        for i in 0..2000 {
            let lambda = 10f64.powf(-6.0 + 12.0 * i as f64 / 1999.0);
            let v = reml_objective(lambda, &d).unwrap();
            if v > best.1 {
                best = (lambda, v);
            }
        }
        let grid_step = 10f64.powf(12.0 / 1999.0);
        assert!(
            fit.lambda <= best.0 * grid_step && fit.lambda >= best.0 / grid_step,
            "lambda {} vs grid argmax {}",
            fit.lambda,
            best.0
        );
        assert!(fit.reml_value >= best.1 - 1e-8);
    }

    #[test]
    fn k_equals_one_series_matches_direct_fit() {
        let grid = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let responses = DMatrix::from_row_slice(4, 2, &[1.0, 1.1, 2.0, 2.2, 3.0, 2.9, 4.0, 4.2]);
        let d = FunctionalDataset::from_parts(
            responses,
            vec![0, 0, 1, 1],
            vec![0, 1, 0, 1],
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            vec!["x".into()],
            grid,
        )
        .unwrap();
        let series = fit_all_timepoints(&d, &SolverOptions::default()).unwrap();
        let direct = fit_pointwise(&d.design_at(0).unwrap(), &SolverOptions::default()).unwrap();
        assert_eq!(series.fits[0].beta, direct.beta);
        assert_eq!(series.fits[0].sigma2_eps, direct.sigma2_eps);
    }

    #[test]
    fn shuffled_rows_give_identical_fits() {
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let rows = [
            (0usize, 0usize, [1.0, 2.0, 3.0]),
            (0, 1, [1.5, 2.5, 3.5]),
            (1, 0, [4.0, 5.0, 6.0]),
            (1, 1, [4.5, 5.5, 6.5]),
            (2, 0, [0.5, 1.5, 2.5]),
            (2, 1, [0.0, 1.0, 2.0]),
        ];
        let build = |order: &[usize]| {
            let responses = DMatrix::from_fn(6, 3, |r, c| rows[order[r]].2[c]);
            FunctionalDataset::from_parts(
                responses,
                order.iter().map(|&i| rows[i].0).collect(),
                order.iter().map(|&i| rows[i].1).collect(),
                DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.5]),
                vec!["x".into()],
                grid.clone(),
            )
            .unwrap()
        };
        let a = fit_all_timepoints(&build(&[0, 1, 2, 3, 4, 5]), &SolverOptions::default()).unwrap();
        let b = fit_all_timepoints(&build(&[5, 2, 0, 4, 1, 3]), &SolverOptions::default()).unwrap();
        for k in 0..3 {
            assert_eq!(a.fits[k].beta, b.fits[k].beta);
            assert_eq!(a.fits[k].sigma2_b, b.fits[k].sigma2_b);
            assert_eq!(a.fits[k].sigma2_eps, b.fits[k].sigma2_eps);
        }
    }
}

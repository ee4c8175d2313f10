//! Brute-force reference implementations used by the verification suites.
//!
//! Everything here builds the full M × M covariance explicitly and searches
//! parameter grids by enumeration. Deliberately independent of the fast
//! solver paths in [`crate::lmm`]; slow, but a second route to the same
//! numbers.

use nalgebra::{DMatrix, DVector};

use crate::dataset::PointwiseDesign;

const LN_2PI: f64 = 1.8378770664093453;

/// Restricted-likelihood evaluation at one variance ratio, computed densely.
#[derive(Debug, Clone)]
pub struct DenseRemlPoint {
    pub lambda: f64,
    pub beta: DVector<f64>,
    pub sigma2_eps: f64,
    pub sigma2_b: f64,
    pub reml: f64,
}

/// Evaluate the profiled restricted log-likelihood at `lambda` by building
/// H = I + λZZᵀ in full and factoring it.
pub fn dense_restricted_loglik(design: &PointwiseDesign, lambda: f64) -> DenseRemlPoint {
    let m = design.x.nrows();
    let p = design.x.ncols();
    let mut h = DMatrix::identity(m, m);
    for r in 0..m {
        for c in 0..m {
            if design.groups[r] == design.groups[c] {
                h[(r, c)] += lambda;
            }
        }
    }
    let chol_h = h.cholesky().expect("H = I + lambda ZZ' is positive definite");
    let hinv_x = chol_h.solve(&design.x);
    let hinv_y = chol_h.solve(&design.y);
    let a = design.x.transpose() * &hinv_x;
    let xt_hinv_y = design.x.transpose() * &hinv_y;
    let chol_a = a.clone().cholesky().expect("full-rank design");
    let beta = chol_a.solve(&xt_hinv_y);
    let quad = (design.y.dot(&hinv_y) - xt_hinv_y.dot(&beta)).max(0.0);
    let dof = (m - p) as f64;
    let sigma2 = (quad / dof).max(1e-300);
    let logdet_h: f64 = chol_h.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let logdet_a: f64 = chol_a.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let reml = -0.5 * (dof * (LN_2PI + sigma2.ln()) + quad / sigma2 + logdet_h + logdet_a);
    DenseRemlPoint {
        lambda,
        beta,
        sigma2_eps: sigma2,
        sigma2_b: lambda * sigma2,
        reml,
    }
}

/// Argmax of the dense restricted likelihood over an explicit λ list.
pub fn grid_search_reml(design: &PointwiseDesign, lambdas: &[f64]) -> DenseRemlPoint {
    lambdas
        .iter()
        .map(|&l| dense_restricted_loglik(design, l))
        .max_by(|a, b| a.reml.total_cmp(&b.reml))
        .expect("non-empty lambda grid")
}

/// Two-stage enumeration: a log-spaced coarse grid over
/// `[10^lo, 10^hi]` (plus λ = 0), then a linear fine grid between the
/// neighbors of the coarse argmax.
pub fn two_stage_grid_search(
    design: &PointwiseDesign,
    coarse: usize,
    fine: usize,
    log10_lo: f64,
    log10_hi: f64,
) -> DenseRemlPoint {
    let mut grid = Vec::with_capacity(coarse + 1);
    grid.push(0.0);
    for i in 0..coarse {
        let t = i as f64 / (coarse - 1) as f64;
        grid.push(10f64.powf(log10_lo + (log10_hi - log10_lo) * t));
    }
    let points: Vec<DenseRemlPoint> = grid
        .iter()
        .map(|&l| dense_restricted_loglik(design, l))
        .collect();
    let best = points
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.reml.total_cmp(&b.1.reml))
        .map(|(i, _)| i)
        .unwrap();
    let lo = if best == 0 { 0.0 } else { grid[best - 1] };
    let hi = if best + 1 < grid.len() { grid[best + 1] } else { grid[best] };
    let fine_grid: Vec<f64> = (0..fine)
        .map(|i| lo + (hi - lo) * i as f64 / (fine - 1) as f64)
        .collect();
    grid_search_reml(design, &fine_grid)
}

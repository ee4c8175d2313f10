//! Uniform cubic B-spline basis with an index-space difference penalty.
//!
//! Knots are equally spaced and extend three intervals beyond the data
//! range, so Greville sites are equally spaced and second differences of
//! the coefficients annihilate exactly the linear functions — penalized
//! fits reproduce lines regardless of the penalty weight.

use nalgebra::DMatrix;

/// Evaluate `n_basis` uniform cubic B-splines at the given sites.
/// Requires `n_basis >= 4`; the basis spans `[lo, hi]`.
pub fn basis_matrix(sites: &[f64], n_basis: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    assert!(n_basis >= 4, "cubic basis needs at least 4 functions");
    assert!(hi > lo);
    let h = (hi - lo) / (n_basis as f64 - 3.0);
    let mut b = DMatrix::zeros(sites.len(), n_basis);
    for (row, &t) in sites.iter().enumerate() {
        // Knot coordinate: u = 3 at lo, u = n_basis at hi.
        let u = (t - lo) / h + 3.0;
        let m = (u.floor() as usize).clamp(3, n_basis - 1);
        let s = u - m as f64;
        let s2 = s * s;
        let s3 = s2 * s;
        let omt = 1.0 - s;
        b[(row, m - 3)] = omt * omt * omt / 6.0;
        b[(row, m - 2)] = (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0;
        b[(row, m - 1)] = (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0;
        b[(row, m)] = s3 / 6.0;
    }
    b
}

/// D₂ᵀD₂ where D₂ is the (n−2) × n second-difference operator.
pub fn second_difference_penalty(n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(2) {
        let idx = [i, i + 1, i + 2];
        let coef = [1.0, -2.0, 1.0];
        for (a, ca) in idx.iter().zip(coef) {
            for (b, cb) in idx.iter().zip(coef) {
                p[(*a, *b)] += ca * cb;
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity() {
        let sites: Vec<f64> = (0..50).map(|i| i as f64 / 49.0 * 10.0).collect();
        let b = basis_matrix(&sites, 12, 0.0, 10.0);
        for row in 0..sites.len() {
            let sum: f64 = b.row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {row}: {sum}");
        }
    }

    #[test]
    fn linear_functions_have_linear_coefficients() {
        // With uniform knots, c_j = f(greville_j) represents a linear f
        // exactly and those coefficients are linear in j.
        let n = 10;
        let (lo, hi) = (2.0, 7.0);
        let h = (hi - lo) / (n as f64 - 3.0);
        let sites: Vec<f64> = (0..40).map(|i| lo + (hi - lo) * i as f64 / 39.0).collect();
        let b = basis_matrix(&sites, n, lo, hi);
        // greville_j = lo + (j - 1) h for cubic uniform knots
        let coef: Vec<f64> = (0..n)
            .map(|j| {
                let g = lo + (j as f64 - 1.0) * h;
                3.0 - 0.5 * g
            })
            .collect();
        for (row, &t) in sites.iter().enumerate() {
            let fitted: f64 = (0..n).map(|j| b[(row, j)] * coef[j]).sum();
            assert!((fitted - (3.0 - 0.5 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_annihilates_linear_index_sequences() {
        let p = second_difference_penalty(8);
        let c = nalgebra::DVector::from_fn(8, |j, _| 2.0 + 3.0 * j as f64);
        let q = (&p * &c).norm();
        assert!(q < 1e-12);
    }
}

//! Multilevel functional dataset and per-timepoint regression problems.
//!
//! Responses are stored as an M × K matrix with one row per
//! (subject, period) pair. Covariates are stored once per subject and
//! expanded lazily when a pointwise design is assembled, which makes the
//! "covariates constant across a subject's periods" invariant structural.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Immutable multilevel functional dataset.
///
/// Rows are kept in canonical (subject, period) order; constructors sort
/// their inputs, so any row permutation of the same records produces a
/// bit-identical dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    responses: DMatrix<f64>,
    subject_of_row: Vec<usize>,
    period_of_row: Vec<usize>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    grid: TimeGrid,
    // Contiguous row range of each subject in canonical order.
    subject_rows: Vec<(usize, usize)>,
}

/// Outcome of [`FunctionalDataset::validate`]: a list of invariant
/// violations. Empty means valid; the check itself never aborts.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_valid() {
            write!(f, "dataset valid")
        } else {
            writeln!(f, "{} violation(s):", self.violations.len())?;
            for v in &self.violations {
                writeln!(f, "  - {v}")?;
            }
            Ok(())
        }
    }
}

/// Regression problem at a single grid point.
#[derive(Debug, Clone)]
pub struct PointwiseDesign {
    /// Response vector: column k of the response matrix.
    pub y: DVector<f64>,
    /// M × (R+1) design with an intercept column prepended.
    pub x: DMatrix<f64>,
    /// Subject label of each row, in 0..I.
    pub groups: Vec<usize>,
    /// Names of the design columns, intercept first.
    pub column_names: Vec<String>,
}

impl FunctionalDataset {
    /// Assemble a dataset from parallel row arrays. Rows may arrive in any
    /// order; they are sorted into (subject, period) order. Dimension
    /// mismatches and out-of-range subject indices are hard errors; value
    /// level invariants are left to [`validate`](Self::validate).
    pub fn from_parts(
        responses: DMatrix<f64>,
        subject_of_row: Vec<usize>,
        period_of_row: Vec<usize>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        grid: TimeGrid,
    ) -> Result<Self> {
        let m = responses.nrows();
        if subject_of_row.len() != m || period_of_row.len() != m {
            return Err(Error::Dataset(format!(
                "row labels ({}, {}) do not match {} response rows",
                subject_of_row.len(),
                period_of_row.len(),
                m
            )));
        }
        if m == 0 {
            return Err(Error::Dataset("no response rows".into()));
        }
        if responses.ncols() != grid.len() {
            return Err(Error::Dataset(format!(
                "responses have {} columns but grid has {} points",
                responses.ncols(),
                grid.len()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::Dataset(format!(
                "{} covariate names for {} covariate columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        let n_subjects = covariates.nrows();
        if let Some(&bad) = subject_of_row.iter().find(|&&s| s >= n_subjects) {
            return Err(Error::Dataset(format!(
                "subject index {bad} out of range (I = {n_subjects})"
            )));
        }

        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&r| (subject_of_row[r], period_of_row[r]));

        let responses = DMatrix::from_fn(m, grid.len(), |r, c| responses[(order[r], c)]);
        let subject_of_row: Vec<usize> = order.iter().map(|&r| subject_of_row[r]).collect();
        let period_of_row: Vec<usize> = order.iter().map(|&r| period_of_row[r]).collect();

        let mut subject_rows = vec![(0usize, 0usize); n_subjects];
        let mut r = 0;
        while r < m {
            let s = subject_of_row[r];
            let start = r;
            while r < m && subject_of_row[r] == s {
                r += 1;
            }
            subject_rows[s] = (start, r);
        }

        Ok(Self {
            responses,
            subject_of_row,
            period_of_row,
            covariates,
            covariate_names,
            grid,
            subject_rows,
        })
    }

    /// Diagnostic check of all dataset invariants. Returns every violation
    /// found; never aborts.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let m = self.responses.nrows();
        let n_subjects = self.covariates.nrows();

        let mut seen = vec![0usize; n_subjects];
        for &s in &self.subject_of_row {
            seen[s] += 1;
        }
        for (s, &count) in seen.iter().enumerate() {
            if count == 0 {
                violations.push(format!("subject {s} has no rows"));
            }
        }

        let mut nonfinite = 0usize;
        let mut first: Option<(usize, usize)> = None;
        for r in 0..m {
            for c in 0..self.responses.ncols() {
                if !self.responses[(r, c)].is_finite() {
                    nonfinite += 1;
                    first.get_or_insert((r, c));
                }
            }
        }
        if let Some((r, c)) = first {
            violations.push(format!(
                "{nonfinite} non-finite response value(s), first at row {r}, grid index {c}"
            ));
        }

        for r in 0..self.covariates.nrows() {
            for c in 0..self.covariates.ncols() {
                if !self.covariates[(r, c)].is_finite() {
                    violations.push(format!("non-finite covariate for subject {r}, column {c}"));
                }
            }
        }

        for w in 0..m.saturating_sub(1) {
            if self.subject_of_row[w] == self.subject_of_row[w + 1]
                && self.period_of_row[w] == self.period_of_row[w + 1]
            {
                violations.push(format!(
                    "duplicate (subject, period) pair ({}, {})",
                    self.subject_of_row[w],
                    self.period_of_row[w]
                ));
            }
        }

        ValidationReport { violations }
    }

    /// Assemble the regression problem at grid index `k` (0-based).
    pub fn design_at(&self, k: usize) -> Result<PointwiseDesign> {
        if k >= self.grid.len() {
            return Err(Error::GridIndex {
                index: k,
                len: self.grid.len(),
            });
        }
        let m = self.responses.nrows();
        let r = self.covariates.ncols();
        let y = DVector::from_fn(m, |row, _| self.responses[(row, k)]);
        let x = DMatrix::from_fn(m, r + 1, |row, col| {
            if col == 0 {
                1.0
            } else {
                self.covariates[(self.subject_of_row[row], col - 1)]
            }
        });
        let mut column_names = Vec::with_capacity(r + 1);
        column_names.push("(Intercept)".to_string());
        column_names.extend(self.covariate_names.iter().cloned());
        Ok(PointwiseDesign {
            y,
            x,
            groups: self.subject_of_row.clone(),
            column_names,
        })
    }

    /// A new dataset whose subjects are `indices` (with repetition allowed).
    /// Repeated draws of the same subject are relabelled as distinct
    /// clusters; each draw carries all of the subject's periods.
    pub fn resample_subjects(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= self.n_subjects()) {
            return Err(Error::Dataset("resample index out of range".into()));
        }
        let k = self.grid.len();
        let m_new: usize = indices
            .iter()
            .map(|&i| {
                let (a, b) = self.subject_rows[i];
                b - a
            })
            .sum();
        let mut responses = DMatrix::zeros(m_new, k);
        let mut subject_of_row = Vec::with_capacity(m_new);
        let mut period_of_row = Vec::with_capacity(m_new);
        let mut covariates = DMatrix::zeros(indices.len(), self.covariates.ncols());
        let mut out = 0;
        for (new_s, &old_s) in indices.iter().enumerate() {
            covariates.row_mut(new_s).copy_from(&self.covariates.row(old_s));
            let (a, b) = self.subject_rows[old_s];
            for row in a..b {
                responses.row_mut(out).copy_from(&self.responses.row(row));
                subject_of_row.push(new_s);
                period_of_row.push(self.period_of_row[row]);
                out += 1;
            }
        }
        Self::from_parts(
            responses,
            subject_of_row,
            period_of_row,
            covariates,
            self.covariate_names.clone(),
            self.grid.clone(),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.responses.nrows()
    }

    pub fn n_subjects(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn subject_of_row(&self) -> &[usize] {
        &self.subject_of_row
    }

    pub fn period_of_row(&self) -> &[usize] {
        &self.period_of_row
    }

    /// Number of periods observed for one subject.
    pub fn periods_of_subject(&self, s: usize) -> usize {
        let (a, b) = self.subject_rows[s];
        b - a
    }
}

/// Check that per-row covariates are constant within each subject. Used
/// when covariates arrive attached to (subject, period) rows rather than
/// one row per subject; the violations feed a [`ValidationReport`].
pub fn validate_row_covariates(
    subject_of_row: &[usize],
    row_covariates: &DMatrix<f64>,
) -> Vec<String> {
    let mut violations = Vec::new();
    let n_subjects = subject_of_row.iter().copied().max().map_or(0, |s| s + 1);
    let mut first_row: Vec<Option<usize>> = vec![None; n_subjects];
    for (row, &s) in subject_of_row.iter().enumerate() {
        match first_row[s] {
            None => first_row[s] = Some(row),
            Some(anchor) => {
                let differs = (0..row_covariates.ncols())
                    .any(|c| row_covariates[(anchor, c)] != row_covariates[(row, c)]);
                if differs {
                    violations.push(format!(
                        "subject {s}: covariates differ between rows {anchor} and {row}"
                    ));
                    first_row[s] = Some(row); // report each run of disagreement once
                }
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> FunctionalDataset {
        // I=2, J=(1,1), R=1, covariates ((0),(1))
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let responses = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        FunctionalDataset::from_parts(
            responses,
            vec![0, 1],
            vec![0, 0],
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            vec!["x".into()],
            grid,
        )
        .unwrap()
    }

    #[test]
    fn design_expands_intercept_and_covariates() {
        let d = tiny_dataset();
        let design = d.design_at(0).unwrap();
        assert_eq!(design.x, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
        assert_eq!(design.column_names, vec!["(Intercept)", "x"]);
    }

    #[test]
    fn design_at_last_column_and_out_of_range() {
        let d = tiny_dataset();
        let design = d.design_at(2).unwrap();
        assert_eq!(design.y, DVector::from_vec(vec![3.0, 6.0]));
        assert!(matches!(
            d.design_at(3),
            Err(Error::GridIndex { index: 3, len: 3 })
        ));
    }

    #[test]
    fn single_subject_groups() {
        let grid = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let responses = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = FunctionalDataset::from_parts(
            responses,
            vec![0, 0, 0],
            vec![0, 1, 2],
            DMatrix::zeros(1, 0),
            vec![],
            grid,
        )
        .unwrap();
        assert_eq!(d.design_at(0).unwrap().groups, vec![0, 0, 0]);
    }

    #[test]
    fn design_at_is_pure() {
        let d = tiny_dataset();
        let a = d.design_at(1).unwrap();
        let b = d.design_at(1).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.groups, b.groups);
    }

    #[test]
    fn rows_are_canonicalized() {
        let grid = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let responses = DMatrix::from_row_slice(3, 2, &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        let d = FunctionalDataset::from_parts(
            responses,
            vec![1, 0, 0],
            vec![0, 0, 1],
            DMatrix::from_row_slice(2, 1, &[0.5, 1.5]),
            vec!["x".into()],
            grid,
        )
        .unwrap();
        assert_eq!(d.subject_of_row(), &[0, 0, 1]);
        assert_eq!(d.period_of_row(), &[0, 1, 0]);
        assert_eq!(d.responses().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);
        assert_eq!(d.responses().row(2).iter().copied().collect::<Vec<_>>(), vec![5.0, 6.0]);
    }

    #[test]
    fn validate_flags_missing_value_sentinel() {
        let grid = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let responses = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 3.0, 4.0]);
        let d = FunctionalDataset::from_parts(
            responses,
            vec![0, 1],
            vec![0, 0],
            DMatrix::zeros(2, 0),
            vec![],
            grid,
        )
        .unwrap();
        let report = d.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].contains("non-finite response"));
    }

    #[test]
    fn validate_accepts_well_formed() {
        assert!(tiny_dataset().validate().is_valid());
    }

    #[test]
    fn row_covariates_must_be_constant_per_subject() {
        let rows = DMatrix::from_row_slice(3, 1, &[2.0, 2.0, 7.0]);
        let violations = validate_row_covariates(&[0, 1, 1], &rows);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("subject 1"));
        assert!(validate_row_covariates(&[0, 1, 1], &DMatrix::from_row_slice(3, 1, &[2.0, 7.0, 7.0])).is_empty());
    }

    #[test]
    fn resample_relabels_clusters() {
        let d = tiny_dataset();
        let resampled = d.resample_subjects(&[1, 1]).unwrap();
        assert_eq!(resampled.n_subjects(), 2);
        assert_eq!(resampled.subject_of_row(), &[0, 1]);
        assert_eq!(resampled.covariates()[(0, 0)], 1.0);
        assert_eq!(resampled.covariates()[(1, 0)], 1.0);
    }
}

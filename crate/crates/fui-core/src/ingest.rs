//! CGM ingestion: raw readings plus actigraphy-estimated sleep periods in,
//! a [`FunctionalDataset`] out.
//!
//! The protocol: drop sleep periods shorter than 5 hours, linearly
//! interpolate each remaining period's glucose readings at the grid times
//! from sleep onset, reject periods with coverage gaps, and keep subjects
//! with at least 5 accepted periods and a covariate row. All row-level
//! processing is order-insensitive: records are grouped and sorted before
//! anything else happens.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// One CGM reading.
#[derive(Debug, Clone, PartialEq)]
pub struct CgmRecord {
    pub subject_id: String,
    /// Epoch seconds.
    pub timestamp: i64,
    /// mg/dL; must be positive.
    pub glucose: f64,
}

/// One actigraphy-estimated sleep period.
#[derive(Debug, Clone, PartialEq)]
pub struct SleepPeriodRecord {
    pub subject_id: String,
    pub onset: i64,
    pub offset: i64,
}

/// Subject-level covariates keyed by subject id.
#[derive(Debug, Clone)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub by_subject: BTreeMap<String, Vec<f64>>,
}

/// Ingestion controls.
#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub grid: TimeGrid,
    /// Maximum gap between bracketing readings for interpolation.
    pub max_gap_min: f64,
    /// Periods shorter than this are excluded (inclusive boundary kept).
    pub min_period_hours: f64,
    /// Subjects with fewer accepted periods are dropped.
    pub min_periods_per_subject: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            grid: TimeGrid::default_sleep(),
            max_gap_min: 30.0,
            min_period_hours: 5.0,
            min_periods_per_subject: 5,
        }
    }
}

/// Why a period's window could not be extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowRejection {
    /// No reading at or before some grid time.
    NoReadingBefore,
    /// The CGM record ends before the window does.
    RecordEndsEarly,
    /// Bracketing readings exist but are further apart than the gap limit.
    GapTooLarge,
}

/// Counts of everything kept and dropped during ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub subjects_seen: usize,
    pub subjects_kept: usize,
    pub subjects_dropped_few_periods: usize,
    pub subjects_dropped_no_covariates: usize,
    pub periods_seen: usize,
    pub periods_kept: usize,
    pub periods_too_short: usize,
    pub periods_overlapping: usize,
    pub periods_no_reading_before: usize,
    pub periods_record_ends_early: usize,
    pub periods_gap_too_large: usize,
    pub duplicate_readings_dropped: usize,
    pub invalid_rows_skipped: usize,
    pub covariate_rows_unmatched: usize,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "subjects: {} seen, {} kept ({} with too few periods, {} without covariates)",
            self.subjects_seen, self.subjects_kept,
            self.subjects_dropped_few_periods, self.subjects_dropped_no_covariates)?;
        writeln!(f, "periods:  {} seen, {} kept", self.periods_seen, self.periods_kept)?;
        writeln!(f, "  rejected: {} too short, {} overlapping, {} no reading before grid time, {} record ends early, {} gap too large",
            self.periods_too_short, self.periods_overlapping,
            self.periods_no_reading_before, self.periods_record_ends_early,
            self.periods_gap_too_large)?;
        write!(f, "rows:     {} duplicate readings dropped, {} invalid rows skipped, {} covariate rows unmatched",
            self.duplicate_readings_dropped, self.invalid_rows_skipped,
            self.covariate_rows_unmatched)
    }
}

fn parse_timestamp(text: &str) -> Option<i64> {
    let text = text.trim();
    if let Ok(epoch) = text.parse::<i64>() {
        return Some(epoch);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(naive.and_utc().timestamp());
        }
    }
    None
}

/// Read a CGM CSV (`subject_id,timestamp,glucose`). Timestamps may be epoch
/// seconds or ISO-8601; unparseable or non-positive-glucose rows are
/// skipped and counted.
pub fn read_cgm_csv(path: &Path) -> Result<(Vec<CgmRecord>, usize)> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for row in reader.records() {
        let row = row?;
        let parsed = (|| {
            let subject_id = row.get(0)?.trim().to_string();
            let timestamp = parse_timestamp(row.get(1)?)?;
            let glucose: f64 = row.get(2)?.trim().parse().ok()?;
            if subject_id.is_empty() || !glucose.is_finite() || glucose <= 0.0 {
                return None;
            }
            Some(CgmRecord { subject_id, timestamp, glucose })
        })();
        match parsed {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Read a sleep-period CSV (`subject_id,onset,offset`).
pub fn read_sleep_csv(path: &Path) -> Result<(Vec<SleepPeriodRecord>, usize)> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for row in reader.records() {
        let row = row?;
        let parsed = (|| {
            let subject_id = row.get(0)?.trim().to_string();
            let onset = parse_timestamp(row.get(1)?)?;
            let offset = parse_timestamp(row.get(2)?)?;
            if subject_id.is_empty() || offset <= onset {
                return None;
            }
            Some(SleepPeriodRecord { subject_id, onset, offset })
        })();
        match parsed {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Read a covariate CSV (`subject_id,<name1>,...,<nameR>`).
pub fn read_covariates_csv(path: &Path) -> Result<(CovariateTable, usize)> {
    let mut reader = csv::Reader::from_path(path)?;
    let names: Vec<String> = reader
        .headers()?
        .iter()
        .skip(1)
        .map(|h| h.trim().to_string())
        .collect();
    let mut by_subject = BTreeMap::new();
    let mut skipped = 0usize;
    for row in reader.records() {
        let row = row?;
        let parsed = (|| {
            let subject_id = row.get(0)?.trim().to_string();
            if subject_id.is_empty() || row.len() != names.len() + 1 {
                return None;
            }
            let mut values = Vec::with_capacity(names.len());
            for j in 0..names.len() {
                let v: f64 = row.get(j + 1)?.trim().parse().ok()?;
                if !v.is_finite() {
                    return None;
                }
                values.push(v);
            }
            Some((subject_id, values))
        })();
        match parsed {
            Some((id, values)) => {
                by_subject.insert(id, values);
            }
            None => skipped += 1,
        }
    }
    Ok((CovariateTable { names, by_subject }, skipped))
}

/// Keep periods at least `min_hours` long (boundary inclusive). Returns the
/// kept periods and the number dropped.
pub fn filter_periods(
    periods: Vec<SleepPeriodRecord>,
    min_hours: f64,
) -> (Vec<SleepPeriodRecord>, usize) {
    let min_s = (min_hours * 3600.0).round() as i64;
    let before = periods.len();
    let kept: Vec<_> = periods
        .into_iter()
        .filter(|p| p.offset - p.onset >= min_s)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Linearly interpolate one subject's readings (sorted by timestamp) at
/// `onset + t_k` for every grid time, or reject the period.
pub fn extract_window(
    readings: &[CgmRecord],
    onset: i64,
    grid: &TimeGrid,
    max_gap_min: f64,
) -> std::result::Result<Vec<f64>, WindowRejection> {
    let max_gap_s = max_gap_min * 60.0;
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid.points() {
        let target = onset as f64 + t * 60.0;
        let idx = readings.partition_point(|r| (r.timestamp as f64) <= target);
        if idx == 0 {
            return Err(WindowRejection::NoReadingBefore);
        }
        let left = &readings[idx - 1];
        if left.timestamp as f64 == target {
            out.push(left.glucose);
            continue;
        }
        if idx == readings.len() {
            return Err(WindowRejection::RecordEndsEarly);
        }
        let right = &readings[idx];
        let gap = (right.timestamp - left.timestamp) as f64;
        if gap > max_gap_s {
            return Err(WindowRejection::GapTooLarge);
        }
        let w = (target - left.timestamp as f64) / gap;
        out.push(left.glucose + w * (right.glucose - left.glucose));
    }
    Ok(out)
}

/// Run the full ingestion protocol over already-parsed records.
pub fn ingest(
    cgm: Vec<CgmRecord>,
    sleep: Vec<SleepPeriodRecord>,
    covariates: &CovariateTable,
    cfg: &IngestConfig,
) -> Result<(FunctionalDataset, IngestReport)> {
    let mut report = IngestReport::default();

    let mut readings_by_subject: BTreeMap<String, Vec<CgmRecord>> = BTreeMap::new();
    for r in cgm {
        readings_by_subject.entry(r.subject_id.clone()).or_default().push(r);
    }
    for readings in readings_by_subject.values_mut() {
        readings.sort_by(|a, b| (a.timestamp, a.glucose).partial_cmp(&(b.timestamp, b.glucose)).unwrap());
        let before = readings.len();
        readings.dedup_by_key(|r| r.timestamp);
        report.duplicate_readings_dropped += before - readings.len();
    }

    let mut periods_by_subject: BTreeMap<String, Vec<SleepPeriodRecord>> = BTreeMap::new();
    for p in sleep {
        periods_by_subject.entry(p.subject_id.clone()).or_default().push(p);
    }

    report.subjects_seen = periods_by_subject.len();

    struct Accepted {
        subject_id: String,
        windows: Vec<Vec<f64>>,
    }
    let mut accepted_subjects: Vec<Accepted> = Vec::new();

    for (subject_id, mut periods) in periods_by_subject {
        report.periods_seen += periods.len();
        periods.sort_by_key(|p| (p.onset, p.offset));

        // Drop overlapping periods, keeping the earlier one.
        let mut non_overlapping: Vec<SleepPeriodRecord> = Vec::with_capacity(periods.len());
        for p in periods {
            match non_overlapping.last() {
                Some(prev) if p.onset < prev.offset => report.periods_overlapping += 1,
                _ => non_overlapping.push(p),
            }
        }

        let (long_enough, dropped_short) =
            filter_periods(non_overlapping, cfg.min_period_hours);
        report.periods_too_short += dropped_short;

        let readings = readings_by_subject
            .get(subject_id.as_str())
            .map(|v| v.as_slice())
            .unwrap_or(&[]);
        let mut windows = Vec::new();
        for p in &long_enough {
            match extract_window(readings, p.onset, &cfg.grid, cfg.max_gap_min) {
                Ok(w) => windows.push(w),
                Err(WindowRejection::NoReadingBefore) => report.periods_no_reading_before += 1,
                Err(WindowRejection::RecordEndsEarly) => report.periods_record_ends_early += 1,
                Err(WindowRejection::GapTooLarge) => report.periods_gap_too_large += 1,
            }
        }

        if windows.len() < cfg.min_periods_per_subject {
            report.subjects_dropped_few_periods += 1;
            continue;
        }
        if !covariates.by_subject.contains_key(&subject_id) {
            report.subjects_dropped_no_covariates += 1;
            continue;
        }
        report.periods_kept += windows.len();
        accepted_subjects.push(Accepted { subject_id, windows });
    }

    report.covariate_rows_unmatched = covariates
        .by_subject
        .keys()
        .filter(|id| !accepted_subjects.iter().any(|a| &a.subject_id == *id))
        .count();

    if accepted_subjects.is_empty() {
        return Err(Error::NoSubjects);
    }
    report.subjects_kept = accepted_subjects.len();

    let k = cfg.grid.len();
    let m: usize = accepted_subjects.iter().map(|a| a.windows.len()).sum();
    let mut responses = DMatrix::zeros(m, k);
    let mut subject_of_row = Vec::with_capacity(m);
    let mut period_of_row = Vec::with_capacity(m);
    let mut cov = DMatrix::zeros(accepted_subjects.len(), covariates.names.len());
    let mut row = 0;
    for (s, accepted) in accepted_subjects.iter().enumerate() {
        let values = &covariates.by_subject[&accepted.subject_id];
        if values.len() != covariates.names.len() {
            return Err(Error::Ingest(format!(
                "covariate row for {} has {} values, expected {}",
                accepted.subject_id,
                values.len(),
                covariates.names.len()
            )));
        }
        for (c, &v) in values.iter().enumerate() {
            cov[(s, c)] = v;
        }
        for (j, window) in accepted.windows.iter().enumerate() {
            for (col, &v) in window.iter().enumerate() {
                responses[(row, col)] = v;
            }
            subject_of_row.push(s);
            period_of_row.push(j);
            row += 1;
        }
    }

    let dataset = FunctionalDataset::from_parts(
        responses,
        subject_of_row,
        period_of_row,
        cov,
        covariates.names.clone(),
        cfg.grid.clone(),
    )?;
    Ok((dataset, report))
}

/// Read the three raw CSVs and ingest them.
pub fn ingest_files(
    cgm_path: &Path,
    sleep_path: &Path,
    covariates_path: &Path,
    cfg: &IngestConfig,
) -> Result<(FunctionalDataset, IngestReport)> {
    let (cgm, bad_cgm) = read_cgm_csv(cgm_path)?;
    let (sleep, bad_sleep) = read_sleep_csv(sleep_path)?;
    let (covariates, bad_cov) = read_covariates_csv(covariates_path)?;
    let (dataset, mut report) = ingest(cgm, sleep, &covariates, cfg)?;
    report.invalid_rows_skipped = bad_cgm + bad_sleep + bad_cov;
    Ok((dataset, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reading(id: &str, ts: i64, glucose: f64) -> CgmRecord {
        CgmRecord { subject_id: id.into(), timestamp: ts, glucose }
    }

    #[test]
    fn five_hour_boundary_is_inclusive() {
        let mk = |hours: f64| SleepPeriodRecord {
            subject_id: "a".into(),
            onset: 0,
            offset: (hours * 3600.0) as i64,
        };
        let (kept, dropped) =
            filter_periods(vec![mk(4.0 + 59.0 / 60.0), mk(5.0), mk(8.0)], 5.0);
        assert_eq!(kept.len(), 2);
        assert_eq!(dropped, 1);
        assert_eq!(kept[0].offset, 18_000);
    }

    #[test]
    fn interpolation_at_knots_is_exact() {
        let grid = TimeGrid::uniform(5.0, 5.0, 4).unwrap();
        let readings: Vec<CgmRecord> = (0..6)
            .map(|k| reading("a", k * 300, 100.0 + k as f64))
            .collect();
        let w = extract_window(&readings, 0, &grid, 30.0).unwrap();
        assert_eq!(w, vec![101.0, 102.0, 103.0, 104.0]);
    }

    #[test]
    fn linear_midpoint() {
        let grid = TimeGrid::new(vec![5.0, 10.0]).unwrap();
        let readings = vec![reading("a", 0, 100.0), reading("a", 600, 110.0)];
        let w = extract_window(&readings, 0, &grid, 30.0).unwrap();
        assert_eq!(w[0], 105.0);
        assert_eq!(w[1], 110.0);
    }

    #[test]
    fn shifted_grid_matches_sine_within_linearization_error() {
        // Readings sample sin(t) every 5 minutes; interpolate on a grid
        // shifted by 2 minutes. Linear interpolation error is bounded by
        // h²/8 · max|f''| with h = 5 min here.
        let omega = 2.0 * std::f64::consts::PI / 120.0; // one cycle per 2 h
        let value = |t_min: f64| 100.0 + 20.0 * (omega * t_min).sin();
        let readings: Vec<CgmRecord> = (0..=100)
            .map(|k| reading("a", k * 300, value(k as f64 * 5.0)))
            .collect();
        let grid = TimeGrid::uniform(7.0, 5.0, 24).unwrap(); // 5-min grid shifted by 2
        let w = extract_window(&readings, 0, &grid, 30.0).unwrap();
        let bound = 25.0 / 8.0 * 20.0 * omega * omega + 1e-12;
        for (&t, &v) in grid.points().iter().zip(&w) {
            assert!((v - value(t)).abs() <= bound, "t={t}: {v} vs {}", value(t));
        }
    }

    #[test]
    fn gap_and_coverage_rejections() {
        let grid = TimeGrid::uniform(5.0, 5.0, 4).unwrap();
        // 40-minute hole between 0 and 2400 s.
        let gappy = vec![reading("a", 0, 100.0), reading("a", 2400, 120.0)];
        assert_eq!(
            extract_window(&gappy, 0, &grid, 30.0),
            Err(WindowRejection::GapTooLarge)
        );
        // Record stops before the last grid time.
        let short: Vec<CgmRecord> = (0..3).map(|k| reading("a", k * 300, 100.0)).collect();
        assert_eq!(
            extract_window(&short, 0, &grid, 30.0),
            Err(WindowRejection::RecordEndsEarly)
        );
        // Nothing at or before the first grid time.
        let late = vec![reading("a", 400, 100.0), reading("a", 700, 101.0)];
        assert_eq!(
            extract_window(&late, 0, &grid, 30.0),
            Err(WindowRejection::NoReadingBefore)
        );
    }

    fn synthetic_inputs(
        n_subjects: usize,
        periods_per_subject: &[usize],
    ) -> (Vec<CgmRecord>, Vec<SleepPeriodRecord>, CovariateTable) {
        let grid = TimeGrid::default_sleep();
        let mut cgm = Vec::new();
        let mut sleep = Vec::new();
        let mut by_subject = BTreeMap::new();
        for s in 0..n_subjects {
            let id = format!("P{s:02}");
            for p in 0..periods_per_subject[s] {
                let onset = 1_000_000 + (p as i64) * 86_400;
                sleep.push(SleepPeriodRecord {
                    subject_id: id.clone(),
                    onset,
                    offset: onset + 7 * 3600,
                });
                for &t in grid.points() {
                    cgm.push(reading(&id, onset + (t * 60.0) as i64, 100.0 + s as f64 + t));
                }
            }
            by_subject.insert(id, vec![s as f64]);
        }
        let covariates = CovariateTable {
            names: vec!["x".into()],
            by_subject,
        };
        (cgm, sleep, covariates)
    }

    #[test]
    fn five_period_subject_filter_boundary() {
        let (cgm, sleep, covs) = synthetic_inputs(3, &[4, 5, 8]);
        let cfg = IngestConfig::default();
        let (dataset, report) = ingest(cgm, sleep, &covs, &cfg).unwrap();
        assert_eq!(dataset.n_subjects(), 2); // the 4-period subject is dropped
        assert_eq!(report.subjects_dropped_few_periods, 1);
        assert_eq!(report.periods_kept, 13);
        assert_eq!(dataset.periods_of_subject(0), 5);
    }

    #[test]
    fn missing_covariates_drop_subject() {
        let (cgm, sleep, mut covs) = synthetic_inputs(2, &[6, 6]);
        covs.by_subject.remove("P01");
        let (dataset, report) = ingest(cgm, sleep, &covs, &IngestConfig::default()).unwrap();
        assert_eq!(dataset.n_subjects(), 1);
        assert_eq!(report.subjects_dropped_no_covariates, 1);
    }

    #[test]
    fn ingest_is_order_insensitive() {
        let (mut cgm, mut sleep, covs) = synthetic_inputs(2, &[5, 6]);
        let cfg = IngestConfig::default();
        let (a, _) = ingest(cgm.clone(), sleep.clone(), &covs, &cfg).unwrap();
        cgm.reverse();
        sleep.reverse();
        let (b, _) = ingest(cgm, sleep, &covs, &cfg).unwrap();
        assert_eq!(a.responses(), b.responses());
        assert_eq!(a.covariates(), b.covariates());
    }

    #[test]
    fn no_subjects_is_an_error() {
        let (cgm, sleep, covs) = synthetic_inputs(1, &[2]);
        assert!(matches!(
            ingest(cgm, sleep, &covs, &IngestConfig::default()),
            Err(Error::NoSubjects)
        ));
    }

    #[test]
    fn timestamp_formats_auto_detect() {
        assert_eq!(parse_timestamp("1600000000"), Some(1_600_000_000));
        assert_eq!(
            parse_timestamp("2020-09-13T12:26:40Z"),
            Some(1_600_000_000)
        );
        assert_eq!(
            parse_timestamp("2020-09-13 12:26:40"),
            Some(1_600_000_000)
        );
        assert_eq!(parse_timestamp("not a time"), None);
    }
}

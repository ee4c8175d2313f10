//! Raw-file export: write a simulated dataset in the CSV formats the
//! ingestion front end consumes, plus the truth record as JSON.
//!
//! Readings are written at exactly the grid times of each sleep period, and
//! floats use the shortest round-trip decimal form, so reading the files
//! back reproduces the dataset bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataset::FunctionalDataset;
use crate::error::Result;
use crate::simulate::TruthRecord;

pub const CGM_FILE: &str = "cgm.csv";
pub const SLEEP_FILE: &str = "sleep.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Epoch base for synthetic timestamps (2020-09-13T12:26:40Z).
const EPOCH_BASE: i64 = 1_600_000_000;

fn subject_label(index: usize) -> String {
    format!("S{:04}", index + 1)
}

/// Synthetic sleep onset for (subject, period): one period per day.
fn period_onset(period: usize) -> i64 {
    EPOCH_BASE + period as i64 * 86_400
}

/// Write `cgm.csv`, `sleep.csv`, and `covariates.csv` for the dataset.
pub fn export_raw_csvs(dataset: &FunctionalDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let grid = dataset.grid();

    let mut cgm = BufWriter::new(File::create(dir.join(CGM_FILE))?);
    writeln!(cgm, "subject_id,timestamp,glucose")?;
    let mut sleep = BufWriter::new(File::create(dir.join(SLEEP_FILE))?);
    writeln!(sleep, "subject_id,onset,offset")?;

    let window_s = (grid.end() * 60.0).round() as i64;
    for row in 0..dataset.n_rows() {
        let subject = subject_label(dataset.subject_of_row()[row]);
        let onset = period_onset(dataset.period_of_row()[row]);
        writeln!(sleep, "{subject},{onset},{}", onset + window_s)?;
        for (k, &t) in grid.points().iter().enumerate() {
            let ts = onset + (t * 60.0).round() as i64;
            writeln!(cgm, "{subject},{ts},{}", dataset.responses()[(row, k)])?;
        }
    }
    cgm.flush()?;
    sleep.flush()?;

    let mut cov = BufWriter::new(File::create(dir.join(COVARIATES_FILE))?);
    write!(cov, "subject_id")?;
    for name in dataset.covariate_names() {
        write!(cov, ",{name}")?;
    }
    writeln!(cov)?;
    for s in 0..dataset.n_subjects() {
        write!(cov, "{}", subject_label(s))?;
        for c in 0..dataset.n_covariates() {
            write!(cov, ",{}", dataset.covariates()[(s, c)])?;
        }
        writeln!(cov)?;
    }
    cov.flush()?;
    Ok(())
}

/// Serialize the truth record next to the raw CSVs.
pub fn export_truth_json(truth: &TruthRecord, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, truth)?;
    Ok(())
}

//! Shared time grid for functional observations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the equal-spacing check.
const SPACING_RTOL: f64 = 1e-9;

/// Equally spaced, strictly increasing time grid (minutes from sleep onset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct TimeGrid {
    points: Vec<f64>,
    spacing: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    points: Vec<f64>,
}

impl TryFrom<RawGrid> for TimeGrid {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        TimeGrid::new(raw.points)
    }
}

impl From<TimeGrid> for RawGrid {
    fn from(grid: TimeGrid) -> Self {
        RawGrid { points: grid.points }
    }
}

impl TimeGrid {
    /// Build a grid from explicit points, checking the spacing invariants.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Grid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Grid("non-finite grid point".into()));
        }
        let spacing = points[1] - points[0];
        if spacing <= 0.0 {
            return Err(Error::Grid("points must be strictly increasing".into()));
        }
        for w in points.windows(2) {
            let d = w[1] - w[0];
            if d <= 0.0 {
                return Err(Error::Grid("points must be strictly increasing".into()));
            }
            if (d - spacing).abs() > SPACING_RTOL * spacing {
                return Err(Error::Grid(format!(
                    "unequal spacing: {} vs {}",
                    d, spacing
                )));
            }
        }
        Ok(Self { points, spacing })
    }

    /// Uniform grid `start, start + spacing, ...` with `len` points.
    pub fn uniform(start: f64, spacing: f64, len: usize) -> Result<Self> {
        let points = (0..len).map(|i| start + spacing * i as f64).collect();
        Self::new(points)
    }

    /// The default sleep-window grid: 84 points at 5-minute spacing,
    /// t_k = 5k minutes, so the last point lands exactly on 7 hours.
    pub fn default_sleep() -> Self {
        Self::uniform(5.0, 5.0, 84).expect("default grid is valid")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor enforces len >= 2
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        *self.points.last().unwrap()
    }
}

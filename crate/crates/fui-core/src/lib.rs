//! Fast univariate inference for multilevel function-on-scalar regression.
//!
//! The pipeline fits a random-intercept linear mixed model at every point of
//! a shared time grid ([`lmm`]), smooths the resulting coefficient curves
//! ([`smooth`]), and derives joint confidence bands and global p-values from
//! a cluster bootstrap of subjects ([`infer`]). A generative simulator
//! ([`simulate`]) and a CGM ingestion front end ([`ingest`]) allow every
//! statistical property to be verified end to end; [`study`] packages those
//! verifications as Monte-Carlo suites.

pub mod bspline;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod infer;
pub mod ingest;
pub mod io;
pub mod lmm;
pub mod oracle;
pub mod rng;
pub mod simulate;
pub mod smooth;
pub mod stats;
pub mod study;

pub use dataset::{FunctionalDataset, PointwiseDesign, ValidationReport};
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use infer::{BootstrapEnsemble, BootstrapOptions, JointBand, TestResult, TestSpec};
pub use lmm::{PointwiseFit, PointwiseFitSeries, SolverOptions};
pub use simulate::{GeneratorConfig, TruthRecord};
pub use smooth::{CoefficientFunction, SmoothConfig, SmoothingOperator};

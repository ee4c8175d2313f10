use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("grid index {index} out of range (grid has {len} points)")]
    GridIndex { index: usize, len: usize },

    #[error("design matrix is rank deficient; dependent columns: {}", columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("fit at grid index {index} failed: {source}")]
    AtTimepoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("degenerate ensemble: bootstrap covariance is identically zero")]
    DegenerateEnsemble,

    #[error("matrix not positive semidefinite, even after ridge regularization")]
    NotPositiveSemidefinite,

    #[error("test subset is empty or out of range")]
    InvalidSubset,

    #[error("{draws} Monte-Carlo draws cannot resolve a level-{alpha} band")]
    AlphaTooSmall { alpha: f64, draws: usize },

    #[error("bootstrap replicate {replicate}: design still rank deficient after {attempts} redraws")]
    BootstrapRedraws { replicate: usize, attempts: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid generator config: {0}")]
    Config(String),

    #[error("ingest: {0}")]
    Ingest(String),

    #[error("no subjects remain after ingestion filters")]
    NoSubjects,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

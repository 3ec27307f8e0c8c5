use thiserror::Error;

/// Errors raised while building or differentiating an expression.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("cholesky failed on a {dim}x{dim} matrix after jitter {jitter:e} (min eigenvalue ~ {min_eigenvalue:e})")]
    NotPositiveDefinite {
        dim: usize,
        jitter: f64,
        min_eigenvalue: f64,
    },
    #[error("backward requires a scalar output, got {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("{0}")]
    Invalid(String),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("enumeration over 2^{0} subsets is too large (limit 2^20)")]
    TooManyCandidates(usize),
    #[error("bound evaluation failed for subset {subset:?}: {source}")]
    Bound {
        subset: Vec<usize>,
        #[source]
        source: Box<Error>,
    },
    #[error("{phase} phase, epoch {epoch}: {source}")]
    Training {
        phase: String,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("minibatching requires the uncollapsed bound")]
    MinibatchInCollapsedMode,
    #[error("csv error at row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },
    #[error("empty data file")]
    EmptyData,
    #[error("model file version {found} is not supported (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },
    #[error("dense sampling limited to {limit} points, got {n}")]
    TooLarge { n: usize, limit: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

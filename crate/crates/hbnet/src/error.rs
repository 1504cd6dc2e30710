use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("header does not match schema: missing {missing:?}, unexpected {unexpected:?}")]
    HeaderMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("column {column} has {count} distinct levels; a discrete column is capped at {cap} (mis-declared continuous column?)")]
    TooManyLevels {
        column: String,
        count: usize,
        cap: usize,
    },
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("column {0} is not continuous")]
    NotContinuous(String),
    #[error("column {0} is not discrete")]
    NotDiscrete(String),
    #[error("need at least 2 distinct groups, found {0}")]
    TooFewGroups(usize),
    #[error("rank-deficient design; aliased columns: {aliased:?}")]
    RankDeficient { aliased: Vec<String> },
    #[error("too few observations: n={n} with {p} coefficients")]
    TooFewRows { n: usize, p: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("cut level k={k} outside 1..={leaves}")]
    CutOutOfRange { k: usize, leaves: usize },
    #[error("silhouette needs at least 2 clusters")]
    SingleCluster,
    #[error("mixed model needs at least 2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("variance covariate near zero at row {row} (|fitted mean| = {value:.3e})")]
    VarianceCovariateNearZero { row: usize, value: f64 },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("constraint sets conflict: {0:?} is both blacklisted and whitelisted")]
    ConstraintConflict((String, String)),
    #[error("whitelist is cyclic")]
    CyclicWhitelist,
    #[error("all particles have zero weight; increase the particle count or relax the evidence")]
    ZeroWeight,
    #[error("zero-weight imputation rows: {rows:?}")]
    ZeroWeightRows { rows: Vec<usize> },
    #[error("effective sample size {ess:.1} below the minimum of {min}")]
    LowEss { ess: f64, min: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("actual value near zero at index {0}; MAPE undefined")]
    NearZeroActual(usize),
    #[error("zero variance of the loss differential")]
    ZeroLossVariance,
    #[error("evidence column {0} missing from the dataset")]
    MissingEvidenceColumn(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an I/O failure with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Free-form invalid-input error.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad classes of failure, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    /// Bad parameters or inconsistent arguments.
    Input,
    /// Problems reading or interpreting data files.
    Data,
    /// Singular designs and other numerical failures.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("weights have zero total mass")]
    ZeroWeightMass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rank-deficient design: column {column} is linearly dependent on earlier columns (pivot ratio {ratio:.3e})")]
    RankDeficient { column: usize, ratio: f64 },

    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("strata do not partition the sample: row {row} has {active} active indicators")]
    NotAPartition { row: usize, active: usize },

    #[error("design has no intercept column")]
    MissingIntercept,

    #[error("replicate {index}: {source}")]
    Replicate { index: u64, source: Box<Error> },

    #[error("{failed} singular bootstrap replicates exceeds the limit of {limit}")]
    TooManySingularReplicates { failed: usize, limit: usize },

    #[error("selector matches no observations")]
    EmptySelector,

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{0}` not found in header")]
    UnknownColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("treatment column `{column}` has {found} distinct values, expected 2")]
    TreatmentCardinality { column: String, found: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Replicate { source, .. } => source.family(),
            Error::RankDeficient { .. }
            | Error::TooManySingularReplicates { .. }
            | Error::NotAPartition { .. }
            | Error::ZeroWeightMass => ErrorFamily::Numerical,
            Error::Io { .. }
            | Error::Csv(_)
            | Error::UnknownColumn(_)
            | Error::NonNumeric { .. }
            | Error::TreatmentCardinality { .. }
            | Error::Json(_) => ErrorFamily::Data,
            _ => ErrorFamily::Input,
        }
    }

    /// True for failures a bootstrap replicate may recover from by redrawing.
    pub(crate) fn is_singular(&self) -> bool {
        match self {
            Error::RankDeficient { .. } | Error::ZeroWeightMass => true,
            Error::Replicate { source, .. } => source.is_singular(),
            _ => false,
        }
    }

    pub(crate) fn in_replicate(self, index: u64) -> Error {
        Error::Replicate {
            index,
            source: Box::new(self),
        }
    }
}

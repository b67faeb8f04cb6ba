use std::path::PathBuf;

use npb_hte::{Error, ErrorFamily};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(Error),

    #[error("config: {0}")]
    Config(String),

    #[error("rank-deficient design: column `{name}` is linearly dependent on earlier columns")]
    RankDeficient { name: String, source: Error },

    #[error("degenerate result: {0}")]
    Degenerate(String),

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

fn rank_column(e: &Error) -> Option<usize> {
    match e {
        Error::RankDeficient { column, .. } => Some(*column),
        Error::Replicate { source, .. } => rank_column(source),
        _ => None,
    }
}

impl CliError {
    /// Attaches the offending column name when `e` is a rank failure.
    pub fn with_names(e: Error, names: &[String]) -> CliError {
        match rank_column(&e).and_then(|c| names.get(c)) {
            Some(name) => CliError::RankDeficient {
                name: name.clone(),
                source: e,
            },
            None => CliError::Core(e),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.family() {
                ErrorFamily::Input => 2,
                ErrorFamily::Data => 3,
                ErrorFamily::Numerical => 4,
            },
            CliError::Config(_) => 2,
            CliError::RankDeficient { .. } | CliError::Degenerate(_) => 4,
            CliError::Write { .. } => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}:{column}: {message}")]
    Parse { file: PathBuf, line: usize, column: usize, message: String },
    #[error("invalid config value for `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("no IMU coverage for scan ending at t={t_end}")]
    ImuCoverage { t_end: f64 },
    #[error("initialization failed: {0}")]
    Initialization(String),
    #[error("point offset {offset} s lies outside the pose buffer")]
    DeskewCoverage { offset: f64 },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("trajectory evaluation needs at least 2 associated poses, found {0}")]
    TooFewAssociations(usize),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Input rejected before any processing (maps to CLI exit code 1).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Config { .. }
                | Error::UnknownScenario(_)
                | Error::UnknownStrategy(_)
                | Error::ImuCoverage { .. }
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} did not converge: {detail}")]
    Convergence { what: &'static str, detail: String },

    #[error("singular {what}; deficient directions: {null_space:?}")]
    Singular {
        what: &'static str,
        null_space: Vec<Vec<f64>>,
    },

    #[error("model evaluation failed at data index {index}: {source}")]
    ModelAt {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("design infeasible: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid campaign state: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable tag used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Convergence { .. } => "convergence",
            Error::Singular { .. } => "singular",
            Error::ModelAt { .. } => "model",
            Error::Estimation(_) => "estimation",
            Error::Infeasible(_) => "infeasible",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Invalid(_) => "invalid",
            Error::Parse { .. } => "parse",
            Error::SchemaVersion { .. } => "schema_version",
            Error::UnknownFixture(_) => "unknown_fixture",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::ModelAt {
            index,
            source: Box::new(source),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid bitwidth {0}")]
    InvalidBits(u32),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("trace validation failed for sequence `{seq}`, {stage} token {token}, layer {layer}: {message}")]
    Validation {
        seq: String,
        stage: &'static str,
        token: usize,
        layer: usize,
        message: String,
    },

    #[error("trace header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("empty stage: {0}")]
    EmptyStage(&'static str),

    #[error("placement budget K={k} exceeds expert count E={experts}")]
    BudgetTooLarge { k: usize, experts: usize },

    #[error("average bitwidth {0} outside [1, 4]")]
    AvgBitsOutOfRange(f64),

    #[error("uniform allocation needs an integer bitwidth, got {0}")]
    FractionalUniformBits(f64),

    #[error("oracle guard exceeded: {n} experts > limit {limit}")]
    OracleGuard { n: usize, limit: usize },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("I/O error on {path}: {source}")]
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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }
}

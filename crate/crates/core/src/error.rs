use thiserror::Error;

/// Errors surfaced by the numerical routines and the persistence layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("non-finite values encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix `{name}` is not positive definite (jitter exhausted at {max_jitter:e})")]
    NotPositiveDefinite { name: String, max_jitter: f64 },

    #[error("zero diagonal entry in triangular solve at index {0}")]
    SingularTriangular(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimizer diverged: {0}")]
    OptimizerDiverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 1 validation, 2 numerical, 3 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch { .. }
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::CheckpointVersion { .. } => 1,
            Error::NonFinite(_)
            | Error::NotPositiveDefinite { .. }
            | Error::SingularTriangular(_)
            | Error::OptimizerDiverged(_) => 2,
            Error::Io { .. } | Error::Malformed { .. } => 3,
        }
    }
}

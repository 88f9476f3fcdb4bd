use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The CLI maps these onto its exit-code contract via [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric fault: {op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any tensor that requires gradients")]
    DetachedLoss,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("gradient check invalidated: objective is non-deterministic")]
    Nondeterministic,
    #[error("format error in `{field}`: {msg}")]
    Format { field: String, msg: String },
    #[error("parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt or incompatible artifact: {0}")]
    Corrupt(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("hash mismatch for stage `{stage}`: expected {expected}, found {found}")]
    HashMismatch {
        stage: String,
        expected: String,
        found: String,
    },
    #[error("training diverged at step {step} (last good checkpoint kept)")]
    Diverged { step: usize },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 bad arguments, 3 missing prerequisite,
    /// 4 corrupt or incompatible artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Missing(_) => 3,
            Error::Corrupt(_) | Error::HashMismatch { .. } => 4,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

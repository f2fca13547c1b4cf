use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty loss: every target position is masked")]
    EmptyLoss,

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown module site `{0}`")]
    UnknownSite(String),

    #[error("backbone fingerprint mismatch: bundle expects {expected}, backbone is {found}")]
    Fingerprint { expected: String, found: String },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated array `{name}`: need {needed} bytes, found {available}")]
    TruncatedArray {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("malformed bundle at {path}: {reason}")]
    Bundle { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("{0} is undefined: {1}")]
    Undefined(&'static str, String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the CLI: 1 usage, 2 artifact, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::UnknownSite(_) => 1,
            Error::Fingerprint { .. }
            | Error::Version { .. }
            | Error::TruncatedArray { .. }
            | Error::Bundle { .. }
            | Error::MissingArtifact(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
            Error::Dimension(_)
            | Error::Domain(_)
            | Error::EmptyLoss
            | Error::TapeConsumed
            | Error::NonFinite(_)
            | Error::NoConvergence { .. }
            | Error::Undefined(..) => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

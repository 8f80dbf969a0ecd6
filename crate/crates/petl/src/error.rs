use std::path::PathBuf;

/// Errors of the runner, checkpoint and report layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] petl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or invalid configuration. `field` is the dotted path of the
    /// offending key.
    #[error("invalid config at `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("architecture fingerprint mismatch: checkpoint {found:016x}, base {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("report: {0}")]
    Report(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for training
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema { .. } | Error::Core(petl_core::Error::Validation { .. }) => 2,
            Error::Core(petl_core::Error::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

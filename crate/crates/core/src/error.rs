use std::io;

use thiserror::Error;

use crate::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("no adapter registered for task {0} on layer `{1}`")]
    MissingAdapter(TaskId, String),

    #[error("task {0} is not registered with the model")]
    MissingTask(TaskId),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("parameter `{0}` is frozen")]
    FrozenParam(String),

    #[error("invalid recipe: {0}")]
    Recipe(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("degenerate body-part profile: {0}")]
    DegenerateProfile(String),

    #[error("cannot parse {what}: {msg}")]
    Parse { what: &'static str, msg: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Failures specific to the binary checkpoint and volume formats.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("task shard was trained against base {shard:#018x} but loaded base is {base:#018x}")]
    BaseMismatch { shard: u64, base: u64 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

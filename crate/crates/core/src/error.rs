use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("quantization scale must be positive and finite, got {0}")]
    InvalidScale(f32),

    #[error("KV holds {kv_rows} rows but {needed} are required (offset {offset} + {queries} queries)")]
    KvTooShort {
        kv_rows: usize,
        needed: usize,
        offset: usize,
        queries: usize,
    },

    #[error("calibration needs at least one non-empty sample")]
    EmptyCalibration,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("subgraph ({chunk},{stage}) is not ready")]
    NotReady { chunk: usize, stage: usize },

    #[error("instance has {nodes} nodes, exhaustive search limit is {limit}")]
    InstanceTooLarge { nodes: usize, limit: usize },

    #[error("invalid cost model: {0}")]
    InvalidCost(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("missing calibration artifact {0}")]
    MissingCalibration(PathBuf),

    #[error("corrupt weight file {path}: {detail}")]
    CorruptWeights { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error reports a broken invariant rather than bad input or I/O.
    pub fn is_invariant(&self) -> bool {
        matches!(
            self,
            Error::Invariant(_) | Error::Shape { .. } | Error::KvTooShort { .. } | Error::NotReady { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::MissingCalibration(_) | Error::CorruptWeights { .. }
        )
    }
}

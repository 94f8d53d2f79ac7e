use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in op {op}: expected {expected}, got {got}")]
    ShapeMismatch { op: String, expected: String, got: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward requires a scalar root, root has shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("direction vector has zero norm")]
    ZeroVector,
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config error at `{field}` (line {line}, column {column}): {message}")]
    ConfigField { field: String, line: usize, column: usize, message: String },
    #[error("batch too small: need at least {needed} rows, got {got}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("transform pool is empty")]
    EmptyPool,
    #[error("method {method} is incompatible with a {paradigm} model")]
    MethodModelMismatch { method: String, paradigm: String },
    #[error("trace is empty or unscored")]
    EmptyTrace,
    #[error("accuracy matrix is missing entry {0}")]
    IncompleteMatrix(String),
    #[error("unsupported checkpoint format version {0}")]
    UnknownFormatVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch { op: op.to_string(), expected: format!("{expected:?}"), got: format!("{got:?}") }
}

use std::io;

use thiserror::Error;

/// Errors raised while decoding one of the on-disk formats
/// (datasets, indices, graphs, run CSVs).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed record at line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("invalid content: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("metric construction failed: {0}")]
    MetricConstruction(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("no convergence: {0}")]
    Convergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

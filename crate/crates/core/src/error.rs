use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OedpmError> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum OedpmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-numeric cell at row {row}, column {column}: {value:?}")]
    NonNumeric {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("label column {0:?} not present")]
    MissingLabelColumn(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("ensemble component {index} failed: {source}")]
    Component {
        index: usize,
        #[source]
        source: Box<OedpmError>,
    },
}

impl OedpmError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            OedpmError::Usage(_) | OedpmError::DimensionMismatch { .. } => ErrorKind::Usage,
            OedpmError::Config(_) => ErrorKind::Config,
            OedpmError::Domain(_)
            | OedpmError::NotPositiveDefinite { .. }
            | OedpmError::Numeric(_) => ErrorKind::Numeric,
            OedpmError::Io { .. }
            | OedpmError::MissingFile { .. }
            | OedpmError::RaggedRow { .. }
            | OedpmError::NonNumeric { .. }
            | OedpmError::MissingLabelColumn(_)
            | OedpmError::Malformed(_) => ErrorKind::Data,
            OedpmError::Component { source, .. } => source.kind(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        OedpmError::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        OedpmError::Config(msg.into())
    }
}

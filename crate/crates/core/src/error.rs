use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("template `{template}` has a {placeholder} placeholder but no argument was supplied")]
    MissingArgument {
        template: String,
        placeholder: &'static str,
    },
    #[error("template `{template}` has no {placeholder} placeholder for the supplied argument")]
    UnusedArgument {
        template: String,
        placeholder: &'static str,
    },
    #[error("text is empty")]
    EmptyText,
    #[error("invalid template `{name}`: {reason}")]
    InvalidTemplate { name: String, reason: String },
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence has no tokens")]
    EmptySequence,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("item {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("covariance has rank {rank} < {k}")]
    DegenerateCovariance { rank: usize, k: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("input is constant; rank correlation undefined")]
    ConstantInput,
    #[error("invalid retrieval task: {0}")]
    InvalidTask(String),

    #[error("image {width}x{height} is not divisible into {patch}px patches")]
    IndivisibleDimensions { width: usize, height: usize, patch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("inconsistent input: {0}")]
    InconsistentInput(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("missing payload for `{0}`")]
    MissingPayload(String),
    #[error("dataset `{dataset}`: {source}")]
    InDataset {
        dataset: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{}", format_many(.0))]
    Many(Vec<Error>),
}

fn format_many(errors: &[Error]) -> String {
    errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through index wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIndex { source, .. } => source.root(),
            other => other,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format parse error at line {line}, column {column}: {message}")]
    FormatParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("fixed tokens not in vocabulary: {}", .tokens.join(", "))]
    UnknownFixedTokens { tokens: Vec<String> },

    #[error("rhyme slot ({line}, {index}) is outside the sample")]
    RhymeSlotOutOfRange { line: usize, index: usize },

    #[error("lock index {0} falls on a separator or outside the sequence")]
    InvalidLock(usize),

    #[error("line {line} has {len} tokens; the intra-position table holds {max}")]
    LineTooLong { line: usize, len: usize, max: usize },

    #[error("sample has {lines} lines; the segment table holds {max}")]
    TooManyLines { lines: usize, max: usize },

    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("id {id} out of range for table of {rows} rows in {op}")]
    IdOutOfRange {
        op: &'static str,
        id: usize,
        rows: usize,
    },

    #[error("no non-ignored targets to average over")]
    EmptyMean,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("step must be at least 1")]
    ZeroStep,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("no token is allowed at stream position {0}")]
    NoCandidates(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

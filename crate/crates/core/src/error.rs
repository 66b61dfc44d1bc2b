use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("token {token} outside vocabulary of size {size}")]
    Vocab { token: usize, size: usize },

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("vocabulary fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint holds a {found} but a {expected} was requested")]
    WrongKind {
        expected: &'static str,
        found: String,
    },

    #[error("checkpoint is missing parameter {0}")]
    MissingParameter(String),

    #[error("corpus spec error: {0}")]
    CorpusSpec(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("decode session error: {0}")]
    Session(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("utterance ids differ between systems: {0}")]
    IdMismatch(String),

    #[error("oracle instance too large: {0}")]
    OracleSize(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-parseable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyInput(_) => "empty_input",
            Error::Vocab { .. } => "vocab",
            Error::UnknownWord(_) => "unknown_word",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::WrongKind { .. } => "wrong_kind",
            Error::MissingParameter(_) => "missing_parameter",
            Error::CorpusSpec(_) => "corpus_spec",
            Error::Parse { .. } => "parse",
            Error::Session(_) => "session",
            Error::Config(_) => "config",
            Error::IdMismatch(_) => "id_mismatch",
            Error::OracleSize(_) => "oracle_size",
            Error::Io { .. } => "io",
        }
    }
}

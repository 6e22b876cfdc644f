use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate particle filter: all weights vanished at step {step}")]
    DegenerateFilter { step: usize },

    #[error("simulation overflow at step {step}")]
    Overflow { step: usize },

    #[error("ambiguous mapping: {0}")]
    Ambiguous(String),

    #[error("no fit: {0}")]
    NoFit(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("record (p={p}, m={m}): {source}")]
    Record {
        p: usize,
        m: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("estimator failed on test signal {index}: {source}")]
    Estimator {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable, machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid-spec",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::InvalidPrior(_) => "invalid-prior",
            Error::Shape(_) => "shape",
            Error::Singular(_) => "singular",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "non-finite",
            Error::DegenerateFilter { .. } => "degenerate-filter",
            Error::Overflow { .. } => "overflow",
            Error::Ambiguous(_) => "ambiguous-mapping",
            Error::NoFit(_) => "no-fit",
            Error::Diverged { .. } => "diverged",
            Error::Record { source, .. } | Error::Estimator { source, .. } => source.category(),
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Checksum(_) => "checksum",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

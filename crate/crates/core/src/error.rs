use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code classes: config/usage problems,
/// data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    Numerics(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("argument outside valid range: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("empty dataset after filtering")]
    EmptyDataset,
    #[error("not enough negative candidates: {0}")]
    InsufficientCandidates(String),
    #[error("target item outside target-domain vocabulary: {0}")]
    DomainMismatch(String),
    #[error("empty domain vocabulary: domain {0}")]
    EmptyDomain(usize),
    #[error("no evaluation instances")]
    EmptyEval,
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class: 2 config/usage, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Numerics(_) => 4,
            _ => 3,
        }
    }
}

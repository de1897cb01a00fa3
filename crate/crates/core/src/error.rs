use thiserror::Error;

/// Errors raised anywhere in the benchmark pipeline.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// configuration problems, data problems and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate treatment: {0}")]
    DegenerateTreatment(String),
    #[error("no identifying variation: {0}")]
    NoIdentifyingVariation(String),
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
    #[error("R-squared undefined: {0}")]
    UndefinedR2(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ParameterDomain(_) | Error::Config(_) | Error::Json(_) => ErrorKind::Config,
            Error::Data(_)
            | Error::InsufficientData(_)
            | Error::DimensionMismatch { .. }
            | Error::Io(_)
            | Error::Csv(_) => ErrorKind::Data,
            Error::DegenerateTreatment(_)
            | Error::NoIdentifyingVariation(_)
            | Error::LinearAlgebra(_)
            | Error::UndefinedR2(_) => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;

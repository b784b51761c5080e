//! Crate-wide error type.
//!
//! Every fallible operation surfaces one of these variants. `kind()` returns a
//! stable machine-readable tag that the CLI prints as `error_kind: <tag>`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform (broadcast, matmul, concat, ...).
    #[error("shape error: {0}")]
    Shape(String),
    /// Numeric input outside an op's domain, or a non-finite result.
    #[error("domain error: {0}")]
    Domain(String),
    /// Optimizer or training state inconsistent (e.g. missing gradient).
    #[error("state error: {0}")]
    State(String),
    /// Malformed input file content.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Structurally valid input that violates the dataset schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// Invalid generator or experiment specification.
    #[error("spec error: {0}")]
    Spec(String),
    /// Embedding-table lookup index out of range.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Not enough other-client rows to mine hard negatives.
    #[error("mining error: {0}")]
    Mining(String),
    /// Batch too small for the requested loss.
    #[error("batch error: {0}")]
    Batch(String),
    /// Loss became non-finite during training.
    #[error("training diverged at epoch {epoch}: {msg}")]
    TrainingDiverged { epoch: usize, msg: String },
    /// Labels or predictions unusable for the requested metric.
    #[error("data error: {0}")]
    Data(String),
    /// Row identifiers disagree between feature matrices.
    #[error("alignment error: {0}")]
    Alignment(String),
    /// Experiment matrix rejected before any run started.
    #[error("plan error: {0}")]
    Plan(String),
    /// Configuration file or override rejected.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable tag for machine-parseable error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "ShapeError",
            Error::Domain(_) => "DomainError",
            Error::State(_) => "StateError",
            Error::Parse { .. } => "ParseError",
            Error::Schema(_) => "SchemaError",
            Error::Spec(_) => "SpecError",
            Error::Lookup(_) => "LookupError",
            Error::Mining(_) => "MiningError",
            Error::Batch(_) => "BatchError",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::Data(_) => "DataError",
            Error::Alignment(_) => "AlignmentError",
            Error::Plan(_) => "PlanError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

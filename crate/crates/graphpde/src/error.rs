//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by origin so callers (notably the CLI) can map them
/// onto coarse failure classes: configuration, data/IO, or numerics.
#[derive(Debug, Error)]
pub enum Error {
    // ---- DSL ----
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("undeclared symbol `{0}`")]
    Undeclared(String),
    #[error("conflicting declarations for symbol `{0}`: {1}")]
    Conflict(String, String),
    #[error("unbound payload slot `{0}`")]
    UnboundSlot(String),
    #[error("mixed periodic and non-periodic boundary conditions")]
    MixedBoundary,
    #[error("invalid definition: {0}")]
    InvalidDefinition(String),

    // ---- compiler ----
    #[error("cycle detected in compiled graph involving node {0}")]
    CycleDetected(usize),
    #[error("unsupported operator: {0}")]
    UnsupportedOperator(String),

    // ---- numerics ----
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    #[error("solver instability: {0}")]
    SolverInstability(String),
    #[error("solution blow-up: max |u| = {0} exceeds discard threshold")]
    BlowUp(f64),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty input: {0}")]
    EmptyInput(String),

    // ---- persistence ----
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("dataset format version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checksum failure in {0}")]
    Checksum(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> FailureClass {
        use Error::*;
        match self {
            Syntax { .. } | Undeclared(_) | Conflict(..) | UnboundSlot(_) | MixedBoundary
            | InvalidDefinition(_) | UnsupportedOperator(_) | Config(_) => FailureClass::Config,
            Io(_) | Manifest(_) | VersionMismatch { .. } | Checksum(_)
            | IncompatibleCheckpoint(_) | EmptyInput(_) => FailureClass::Data,
            CycleDetected(_) | NonFinite(_) | ShapeMismatch { .. } | SolverInstability(_)
            | BlowUp(_) | Diverged(_) => FailureClass::Numeric,
        }
    }
}

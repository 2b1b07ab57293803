//! Crate-wide error type.

use thiserror::Error;

use crate::solver::SolveTrace;

/// Errors produced by the pipeline.
///
/// Variants are grouped by how a caller should react: input/schema problems
/// (bad files, bad configuration, mismatched shapes), degenerate data (empty
/// or too-small clouds), and numerical failure of the solver.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented invariant (e.g. non-finite depth at a
    /// pixel flagged valid).
    #[error("malformed input: {0}")]
    MalformedInput(String),

    /// A configuration value is missing or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two containers that must be index-aligned have different lengths.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation that needs at least one point received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// An operation needs more points than the cloud provides.
    #[error("insufficient points: {0}")]
    InsufficientPoints(String),

    /// A point with non-positive depth cannot be projected.
    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    /// A binary or text artifact could not be decoded.
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },

    /// A JSON document or PLY header does not match the expected schema.
    #[error("{path}: schema error: {message}")]
    Schema { path: String, message: String },

    /// Underlying filesystem failure.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// The solver produced a non-finite loss. The trace collected up to the
    /// failing iteration is attached so it can still be written out.
    #[error("solver diverged at level {level}, iteration {iteration}")]
    SolverDiverged {
        level: usize,
        iteration: usize,
        trace: Box<SolveTrace>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

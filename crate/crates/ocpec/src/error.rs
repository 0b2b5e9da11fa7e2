//! Crate-wide error type.

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("unknown builtin problem {0:?}")]
    UnknownBuiltin(String),

    #[error("problem file {path}: {message}")]
    ProblemFile { path: String, message: String },

    #[error("invalid field {field}: {message}")]
    InvalidField {
        field: &'static str,
        message: String,
    },

    #[error("field {field}: expected {expected} entries, got {got}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(
        "complementarity pair {index} with values (G, H) = ({g:.6e}, {h:.6e}) \
         is not in the cone within tolerance {tol:.1e}"
    )]
    NotInCone {
        index: usize,
        g: f64,
        h: f64,
        tol: f64,
    },

    #[error("complementarity subproblem failed at node {node}: {status}")]
    LcpAtNode { node: usize, status: String },

    #[error("operation requires a linear-kind instance")]
    NotLinear,

    #[error("simulation requires a fixed or boxed initial state")]
    FreeInitialState,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

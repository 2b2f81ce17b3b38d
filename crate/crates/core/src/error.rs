use std::path::PathBuf;

use num_complex::Complex64;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("the layer stack supports no resonant mode")]
    NoModeFound,

    #[error("root finder did not converge (last iterate nu = {last}, |D| = {residual:e})")]
    RootNotConverged { last: Complex64, residual: f64 },

    #[error("operation requires {expected} geometry")]
    WrongGeometry { expected: &'static str },

    #[error("x step {step} nm exceeds the limit {limit} nm ({reason})")]
    StepTooLarge {
        step: f64,
        limit: f64,
        reason: &'static str,
    },

    #[error("grid `{name}` is not uniform")]
    NonUniformGrid { name: &'static str },

    #[error("refusing production-scale input: {0}")]
    ScaleGuard(String),

    #[error("grid too coarse: quadrature error estimate {estimate:e} exceeds {limit:e}")]
    GridTooCoarse { estimate: f64, limit: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoModeFound
                | Error::RootNotConverged { .. }
                | Error::GridTooCoarse { .. }
                | Error::Numerical(_)
        )
    }
}

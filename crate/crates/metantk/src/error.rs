//! Crate-wide error type.

use std::fmt;

/// Errors raised by the numeric routines and the I/O layer.
#[derive(Debug)]
pub enum Error {
    /// A matrix or vector contained NaN or infinite entries.
    NonFinite(&'static str),
    /// Shapes do not line up.
    DimMismatch { context: &'static str, expected: usize, got: usize },
    /// Input claimed to be symmetric is not, beyond tolerance.
    NotSymmetric { max_asym: f64 },
    /// The QL iteration for a symmetric eigenproblem did not converge.
    EigFailed { iterations: usize },
    /// A kernel matrix is singular (or numerically so) where an inverse is required.
    SingularKernel(String),
    /// A kernel matrix is not positive semi-definite within tolerance.
    NotPsd { lambda_min: f64, lambda_max: f64 },
    /// A matrix function limit is undefined for the given spectrum.
    ExponentUndefined(&'static str),
    /// Negative time or step supplied where nonnegative is required.
    NegativeTime(f64),
    /// Invalid configuration value.
    InvalidConfig(String),
    /// Linear-region counting requested on a network without ReLU activations.
    RegionsUndefined(&'static str),
    /// Meta-training aborted (non-finite or exploding loss).
    Diverged { step: usize, loss: f64 },
    /// Text or binary parse failure, with location when known.
    Parse { line: usize, msg: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// CLI usage error (maps to exit code 2).
    Usage(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFinite(what) => write!(f, "non-finite entries in {what}"),
            Error::DimMismatch { context, expected, got } => {
                write!(f, "dimension mismatch in {context}: expected {expected}, got {got}")
            }
            Error::NotSymmetric { max_asym } => {
                write!(f, "matrix not symmetric (max relative asymmetry {max_asym:.3e})")
            }
            Error::EigFailed { iterations } => {
                write!(f, "symmetric eigensolver failed to converge after {iterations} iterations")
            }
            Error::SingularKernel(msg) => write!(f, "{msg}"),
            Error::NotPsd { lambda_min, lambda_max } => write!(
                f,
                "kernel not positive semi-definite: lambda_min {lambda_min:.3e}, lambda_max {lambda_max:.3e}"
            ),
            Error::ExponentUndefined(msg) => write!(f, "{msg}"),
            Error::NegativeTime(t) => write!(f, "negative time parameter {t}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::RegionsUndefined(act) => {
                write!(f, "regions undefined: activation {act} is not ReLU")
            }
            Error::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss:.3e}); reduce eta")
            }
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

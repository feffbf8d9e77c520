//! A laboratory for second-order optimization on small fully-connected
//! networks.
//!
//! The crate implements three families of preconditioned updates and the
//! machinery to cross-validate them against brute-force references:
//!
//! * exact subsampled natural gradients, computed through the Woodbury
//!   identity on the factored Fisher `F = GGᵀ` ([`curvature`]),
//! * Kronecker-factored approximate curvature (KFAC) with heuristic and
//!   standard damping, and FOOF ("gradient descent on neurons"), with EMA
//!   factor estimation and amortized inversions ([`kron`]),
//! * exact sampling from the full-covariance Laplace posterior via a
//!   low-rank correction of a prior sample ([`laplace`]).
//!
//! Every implicit computation has a dense twin in [`oracle`], and the
//! [`harness`] module provides a deterministic training loop, alignment and
//! per-update-progress diagnostics, and grid search over learning rate and
//! damping.
//!
//! Conventions used throughout (documented once here, relied on everywhere):
//!
//! * Weight matrices have shape `n_out × n_in`; networks carry no biases.
//! * Backward errors `E` are raw per-column derivatives of the per-datapoint
//!   loss, so the layer gradient `E·Aᵀ` is the gradient of the *sum* of
//!   column losses; reported loss metrics are means over columns.
//! * Flat parameter vectors are row-major over each layer matrix, layers
//!   concatenated input to output.

pub mod curvature;
pub mod data;
pub mod harness;
pub mod kron;
pub mod laplace;
pub mod linalg;
pub mod net;
pub mod optim;
pub mod oracle;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// A matrix or vector had an incompatible shape; the message names the
    /// offending operand (e.g. the layer index).
    Shape { context: String },
    /// Invalid argument or configuration value.
    Invalid { message: String },
    /// A dataset file was malformed (bad magic, truncation, count mismatch).
    Data { message: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A symmetric positive-definite factorization failed even after the
    /// jitter retry; carries the smallest eigenvalue of the offending matrix.
    Factorization { smallest_pivot: f64 },
    /// A dense-oracle size guard was exceeded.
    SizeGuard { requested: usize, limit: usize },
    /// The operation is not defined for the given mode (e.g. full Fisher
    /// with a non-enumerable likelihood).
    Unsupported { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context } => write!(f, "shape mismatch: {context}"),
            Error::Invalid { message } => write!(f, "invalid argument: {message}"),
            Error::Data { message } => write!(f, "malformed data: {message}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Factorization { smallest_pivot } => write!(
                f,
                "symmetric factorization failed (smallest pivot {smallest_pivot:e})"
            ),
            Error::SizeGuard { requested, limit } => write!(
                f,
                "dense-oracle size guard exceeded: {requested} > {limit}"
            ),
            Error::Unsupported { message } => write!(f, "unsupported: {message}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// `true` iff `v` is strictly greater than zero; `NaN` fails the test, so
/// validation sites can reject non-numbers and non-positive values in one go.
pub(crate) fn positive(v: f64) -> bool {
    v > 0.0
}

/// `true` iff `v` is greater than or equal to zero; `NaN` fails the test.
pub(crate) fn non_negative(v: f64) -> bool {
    v >= 0.0
}

//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library API.
///
/// Construction-time validation reports every offending field at once (the
/// CLI relies on this to print a complete list for a bad config file);
/// runtime failures carry enough context to locate the failing computation.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument fell outside its documented domain.
    #[error("{name} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// A vector argument had the wrong length.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// A composite value failed validation; each reason names the field.
    #[error("invalid {what}: {}", reasons.join("; "))]
    Invalid {
        what: &'static str,
        reasons: Vec<String>,
    },

    /// An estimator degenerated (e.g. all importance weights vanished, or a
    /// kernel bandwidth could not be inferred from identical points).
    #[error("degenerate estimator: {0}")]
    Degenerate(String),

    /// The quadrature window does not contain the integrand's mass.
    #[error("quadrature window too small: boundary mass {boundary:e} of peak exceeds {limit:e}")]
    WindowTooSmall { boundary: f64, limit: f64 },

    /// A computation produced a non-finite value where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Training aborted on a non-finite loss; reports where it happened.
    #[error("non-finite training loss at iteration {iteration} (t-bin {t_bin})")]
    NonFiniteLoss { iteration: usize, t_bin: usize },

    /// A model checkpoint could not be read or failed validation.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

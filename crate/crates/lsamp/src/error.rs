//! Error types shared across the crate.

use ndarray::Array2;

/// Errors produced by the solvers, generators, and file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition (shape mismatch,
    /// non-finite value, out-of-range parameter).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A reference signal was identically zero where a norm is required.
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    /// An inner solver left the space of finite states.
    #[error("{solver} diverged at iteration {iteration}")]
    SolverDiverged {
        solver: &'static str,
        iteration: usize,
    },

    /// A phase of the outer loop diverged even after the damping retry.
    /// Carries the last finite signal estimate for diagnostics.
    #[error("turbo phase '{phase}' diverged at outer iteration {outer_iter}")]
    TurboDiverged {
        phase: &'static str,
        outer_iter: usize,
        last_x_hat: Box<Array2<f64>>,
    },

    /// A tensor or CSV file did not match the expected layout.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Configuration file problems (unknown keys, invalid grids).
    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

//! Crate-wide error type.
//!
//! Variants are grouped by the kind of failure so a front end can map them to
//! distinct exit codes: data/validation problems (bad input files, schema
//! violations, impossible parameters) versus numerical failures (rank
//! deficiency discovered mid-fit, non-convergence, degenerate variances)
//! versus simulation-level aborts.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- input / validation ---
    #[error("input contains no data rows")]
    EmptyInput,

    #[error("missing required column {column:?}")]
    MissingColumn { column: String },

    #[error("column {column:?}, row {row}: missing value")]
    MissingValue { column: String, row: usize },

    #[error("column {column:?}, row {row}: cannot parse {value:?} as a number")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("participant {participant:?} is assigned to multiple evaluators ({first:?} and {second:?})")]
    MultipleEvaluators {
        participant: String,
        first: String,
        second: String,
    },

    #[error("participant {participant:?} has inconsistent covariate values across its measurements")]
    InconsistentCovariates { participant: String },

    #[error("{0}")]
    InvalidParameter(String),

    #[error("length mismatch: {left} = {left_len}, {right} = {right_len}")]
    LengthMismatch {
        left: &'static str,
        left_len: usize,
        right: &'static str,
        right_len: usize,
    },

    #[error("insufficient degrees of freedom: {n_obs} observations for {n_params} parameters")]
    InsufficientDof { n_obs: usize, n_params: usize },

    // --- numerical ---
    #[error("design matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("GEE did not converge within {iterations} iterations (last max step {last_step:e})")]
    DidNotConverge { iterations: usize, last_step: f64 },

    #[error("fit has converged = false; refit before running inference")]
    NotConverged,

    #[error("working covariance matrix is singular or not positive definite")]
    SingularWorkingCovariance,

    #[error("contrast variance is not positive ({value:e}); covariance matrix may be degenerate")]
    DegenerateContrastVariance { value: f64 },

    #[error("estimated covariance violates the positive-semidefinite floor (min eigenvalue below {floor:e})")]
    CovarianceNotPsd { floor: f64 },

    // --- simulation ---
    #[error("{failed} of {total} simulation replicates failed (threshold {max_allowed}); first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        max_allowed: usize,
        first: String,
    },

    // --- wrapped IO ---
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True when the error reflects invalid input or parameters (as opposed
    /// to a numerical failure during fitting or a simulation abort).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::EmptyInput
                | Error::MissingColumn { .. }
                | Error::MissingValue { .. }
                | Error::NonNumeric { .. }
                | Error::MultipleEvaluators { .. }
                | Error::InconsistentCovariates { .. }
                | Error::InvalidParameter(_)
                | Error::LengthMismatch { .. }
                | Error::InsufficientDof { .. }
                | Error::Io(_)
                | Error::Csv(_)
        )
    }

    /// True when the error is a simulation-level abort.
    pub fn is_simulation(&self) -> bool {
        matches!(self, Error::TooManyFailures { .. })
    }
}

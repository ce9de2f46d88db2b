//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("no observations")]
    NoObservations,

    #[error("non-finite value in {context} at position(s) {indices:?}")]
    NonFinite { context: String, indices: Vec<usize> },

    #[error("probability grids differ between operands")]
    GridMismatch,

    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("insufficient sample for order {order}: need at least {order} observations, got {n}")]
    InsufficientSample { order: usize, n: usize },

    #[error("polynomial degree {0} exceeds the exact-coefficient limit of 12")]
    DegreeTooLarge(usize),

    #[error("basis too small: {got} functions cannot support degree {degree} (need at least {min})")]
    BasisTooSmall { degree: usize, got: usize, min: usize },

    #[error("invalid domain or grid: {0}")]
    InvalidDomain(String),

    #[error("negative smoothing parameter {0}")]
    NegativeLambda(f64),

    #[error("invalid model specification: {0}")]
    InvalidModel(String),

    #[error("subject {subject} has {n} observation(s) for feature `{feature}`; at least 2 are required")]
    TooFewObservations {
        subject: String,
        feature: String,
        n: usize,
    },

    #[error("feature `{feature}` missing for subject(s) {subjects:?}")]
    MissingFeature {
        feature: String,
        subjects: Vec<String>,
    },

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("degenerate smooth covariate `{0}`: observed values span zero range")]
    DegenerateSmooth(String),

    #[error("model did not converge after {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        coefficients: Vec<f64>,
    },

    #[error("complete separation suspected: coefficients diverging")]
    SeparationSuspected,

    #[error("normal equations are singular beyond jitter repair")]
    SingularSystem,

    #[error("every smoothing candidate failed; last error: {0}")]
    AllCandidatesFailed(Box<Error>),

    #[error("outcome has a single class; both 0 and 1 are required")]
    SingleClass,

    #[error("null deviance is zero: outcome is constant")]
    ZeroNullDeviance,

    #[error("binary outcome required: values must all be 0 or 1")]
    NotBinary,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the numerics (as opposed to invalid inputs);
    /// the CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::SeparationSuspected
                | Error::SingularSystem
                | Error::AllCandidatesFailed(_)
        )
    }
}

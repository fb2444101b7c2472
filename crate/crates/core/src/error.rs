use std::path::PathBuf;

/// Errors returned by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A required CSV column was not found in the header.
    #[error("schema error: column '{0}' not found in header")]
    MissingColumn(String),

    /// A cell could not be parsed as a finite number. `row` is the 1-based data row.
    #[error("parse error at row {row}, column '{column}': {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },

    /// Series are too short or have mismatched lengths.
    #[error("length error: {0}")]
    Length(String),

    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A series has zero variance and cannot be standardized.
    #[error("degenerate series '{0}': zero variance")]
    DegenerateSeries(String),

    /// A non-finite value appeared while evaluating a recorded computation.
    #[error("numeric error: non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    /// The least-squares design matrix is rank deficient.
    #[error("singular design matrix (condition estimate {condition:.3e})")]
    SingularDesign { condition: f64 },

    /// Neural training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}; try a smaller learning rate")]
    TrainingDiverged { epoch: usize },

    /// Feature vector length does not match the model.
    #[error("arity error: expected {expected} features, got {got}")]
    Arity { expected: usize, got: usize },

    /// Recursive forecast produced a non-finite prediction.
    #[error("rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    /// The counterfactual optimizer diverged. The objective trace is kept for diagnosis.
    #[error("optimizer diverged at iteration {iteration}")]
    OptimizerDiverged { iteration: usize, trace: Vec<f64> },

    /// The regularized normal equations could not be factorized.
    #[error("singular system: {0}")]
    Singular(String),

    /// The model or problem shape is not supported by an operation.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Every candidate in a model sweep failed to fit.
    #[error("all {0} candidates failed")]
    AllCandidatesFailed(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

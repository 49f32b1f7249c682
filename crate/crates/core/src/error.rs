use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` is not a finite number")]
    NonNumericCell { row: usize, column: String },
    #[error("row {row}: event time lies outside its truncation window (need left <= time <= right)")]
    TruncationViolation { row: usize },
    #[error("row {row}: event time {value} must be finite and positive")]
    NonPositiveTime { row: usize, value: f64 },
    #[error("row {row}: covariate {column} is not finite")]
    NonFiniteCovariate { row: usize, column: usize },
    #[error("covariate dimension mismatch (expected {expected}, got {actual})")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("information matrix is singular (collinear or constant covariates)")]
    SingularHessian,
    #[error("solver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("EM did not converge after {iterations} iterations (last log-likelihood {:.8})", trace.last().copied().unwrap_or(f64::NAN))]
    EmNoConvergence { iterations: usize, trace: Vec<f64> },
    #[error("no subject at risk at event time {time}")]
    EmptyRiskSet { time: f64 },
    #[error("no observation carries positive weight")]
    NoPositiveWeight,
    #[error("subject {subject}: observation probability {alpha:e} is below the floor{}", iteration.map(|k| format!(" at EM iteration {k}")).unwrap_or_default())]
    AlphaUnderflow { subject: usize, alpha: f64, iteration: Option<usize> },
    #[error("selection probabilities are not identifiable: event times and truncation windows form {components} disconnected groups")]
    NonIdentifiable { components: usize },
    #[error("{failures} of {total} bootstrap replicates failed")]
    TooManyFailures { failures: usize, total: usize },
    #[error("fewer than two comparable pairs for the {0} statistic")]
    NoComparablePairs(&'static str),

    #[error("acceptance rate {rate:e} in the pilot draw is too low to sample the scenario")]
    TruncationTooSevere { rate: f64 },
    #[error("calibration of truncation constants failed: {0}")]
    CalibrationFailed(String),
    #[error("study aborted: {failed} of {reps} replications failed")]
    StudyAborted { failed: usize, reps: usize },

    #[error("scenario file: {0}")]
    Scenario(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularHessian
                | Error::NoConvergence { .. }
                | Error::EmNoConvergence { .. }
                | Error::EmptyRiskSet { .. }
                | Error::AlphaUnderflow { .. }
                | Error::NonIdentifiable { .. }
                | Error::TooManyFailures { .. }
                | Error::TruncationTooSevere { .. }
                | Error::CalibrationFailed(_)
                | Error::StudyAborted { .. }
        )
    }
}

//! Error types shared across the library.

use thiserror::Error;

/// Why an estimator could not identify the coefficient of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentificationFailureKind {
    /// Every entry of the jackknifed projection is zero, so the estimator has
    /// no instrument variation left. Clustering at the judge level (or any
    /// clustering whose groups contain the judge groups) produces this.
    ZeroProjection,
    /// The moment matrix X'PX is singular or numerically near-singular.
    SingularMoment,
    /// The controls span the judge instruments (e.g. judge-level fixed
    /// effects), leaving no residual instrument variation.
    InstrumentsAbsorbed,
}

impl std::fmt::Display for IdentificationFailureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::ZeroProjection => write!(f, "zero_projection"),
            Self::SingularMoment => write!(f, "singular_moment"),
            Self::InstrumentsAbsorbed => write!(f, "instruments_absorbed"),
        }
    }
}

/// Errors raised by estimators and the projection machinery.
#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("identification failure ({kind}): {detail}")]
    IdentificationFailure {
        kind: IdentificationFailureKind,
        detail: String,
    },

    /// The leave-out instrument is undefined: the judge of `case` handles no
    /// cases outside the case's own leave-out cluster.
    #[error("leave-out instrument undefined for case {case}: judge {judge} handles no cases outside the case's cluster")]
    LeaveOutUndefined { case: usize, judge: usize },

    /// The fixed-effect adjustment system could not be solved to tolerance.
    #[error("fixed-effect adjustment infeasible: {0}")]
    AdjustmentInfeasible(String),

    /// The adjustment system exceeds the configured size cap.
    #[error("adjustment system size {size} exceeds configured cap {cap}")]
    ResourceLimit { size: usize, cap: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl EstimationError {
    pub fn identification(kind: IdentificationFailureKind, detail: impl Into<String>) -> Self {
        Self::IdentificationFailure {
            kind,
            detail: detail.into(),
        }
    }

    /// Stable machine-readable code for reports.
    pub fn code(&self) -> &'static str {
        match self {
            Self::IdentificationFailure { .. } => "identification_failure",
            Self::LeaveOutUndefined { .. } => "leave_out_undefined",
            Self::AdjustmentInfeasible(_) => "adjustment_infeasible",
            Self::ResourceLimit { .. } => "resource_limit",
            Self::InvalidInput(_) => "invalid_input",
        }
    }

    pub fn is_identification_failure(&self) -> bool {
        matches!(self, Self::IdentificationFailure { .. })
    }
}

/// Errors raised while constructing or ingesting datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),

    #[error("row {row}: column `{column}` holds non-numeric value `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("dataset is empty: {0}")]
    Empty(String),

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

use std::io;

use thiserror::Error;

/// Failure of an equivalence judge. Both variants abort the enclosing run.
#[derive(Debug, Error)]
pub enum OracleError {
    #[error("entailment service at {endpoint} unavailable after {attempts} attempt(s): {reason}")]
    Unavailable {
        endpoint: String,
        attempts: usize,
        reason: String,
    },
    #[error("malformed entailment response from {endpoint}: {reason}")]
    MalformedResponse { endpoint: String, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("record `{id}` has no samples")]
    EmptySamples { id: String },
    #[error("record `{id}` has no reference answer")]
    MissingLabel { id: String },
    #[error("record `{id}` has {got} sample(s) but the calibrated budget needs {needed}")]
    InsufficientSamples { id: String, needed: usize, got: usize },
    #[error("sample index {index} out of range for prefix of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(
        "risk level {risk} is infeasible for {n} calibration record(s): quantile rank {rank} exceeds {n}; \
         the minimal feasible risk level is 1/(N+1) = {min_feasible}"
    )]
    InfeasibleRiskLevel {
        n: usize,
        risk: f64,
        rank: usize,
        min_feasible: f64,
    },
    #[error(
        "sample budget is unbounded: the rank-{rank} conformal score is infinite \
         (too many calibration records never produced an acceptable sample)"
    )]
    UnboundedBudget { rank: usize },
    #[error("risk level {0} must lie strictly between 0 and 1")]
    InvalidRiskLevel(f64),
    #[error("cannot average over an empty collection")]
    EmptyCollection,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("exact enumeration over {size} points exceeds the budget of {max}")]
    EnumerationTooLarge { size: usize, max: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("need at least 2 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

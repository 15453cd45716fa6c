//! Two-stage conformal risk control for sampled generative answers.
//!
//! Stage one calibrates how many samples `r̂` to draw per question so that an
//! acceptable answer appears among them with probability at least `1 - α`.
//! Stage two calibrates a reliability threshold `ŝ` so that the prediction
//! set built from those samples keeps an acceptable answer with probability
//! at least `1 - β` given stage one succeeded. The combined miscoverage is at
//! most `ε = α + β - αβ`.
//!
//! All numerics are generic over [`Scalar`] (`f64`, `f32` or exact
//! [`Rational`]); the aliases below fix the common `f64` case.

pub mod calibration;
pub mod clustering;
pub mod domain;
pub mod error;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod prediction;
pub mod scalar;
pub mod simulation;

pub use calibration::{calibrate, calibrate_sampling, calibrate_threshold, ReliabilityMeasure};
pub use clustering::{cluster, dedup, ClusterAssignment};
pub use domain::{CalibrationResult, ConformalScore, Member, PredictionSet, Provenance, QaRecord, RiskBudget, Score};
pub use error::{Error, OracleError, Result};
pub use metrics::{evaluate, sweep, SetView, SweepConfig, SweepRow, SweepTable, TrialReport};
pub use oracle::{EquivalenceOracle, SimilarityFunction};
pub use prediction::{predict, PredictionRequest};
pub use scalar::Scalar;

/// Exact rational scalar.
pub type Rational = num_rational::Ratio<i64>;

pub type RiskBudgetF64 = RiskBudget<f64>;
pub type CalibrationResultF64 = CalibrationResult<f64>;
pub type PredictionSetF64 = PredictionSet<f64>;
pub type TrialReportF64 = TrialReport<f64>;
pub type ClusterAssignmentF64 = ClusterAssignment<f64>;

//! Records, scores and results shared by every stage of the pipeline.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One question with its sampled responses in generation order.
///
/// Fields are read-only once constructed: the conformal score is the position
/// of the first acceptable sample, so sample order must never change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    id: String,
    question: String,
    #[serde(default)]
    reference: Option<String>,
    samples: Vec<String>,
}

impl QaRecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        samples: Vec<String>,
        reference: Option<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            reference,
            samples,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn reference(&self) -> Option<&str> {
        self.reference.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.reference.is_some()
    }

    /// Reference answer, or `MissingLabel`.
    pub fn label(&self) -> Result<&str> {
        self.reference()
            .ok_or_else(|| Error::MissingLabel { id: self.id.clone() })
    }

    /// Checks the record can enter calibration (`require_label`) or
    /// prediction, returning it unchanged.
    pub fn validate(self, require_label: bool) -> Result<Self> {
        self.check(require_label)?;
        Ok(self)
    }

    pub(crate) fn check(&self, require_label: bool) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptySamples { id: self.id.clone() });
        }
        if require_label && self.reference.is_none() {
            return Err(Error::MissingLabel { id: self.id.clone() });
        }
        Ok(())
    }
}

/// A conformal or nonconformity score. `Infinite` orders after every finite
/// value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Score<T> {
    Finite(T),
    Infinite,
}

impl<T> Score<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            Score::Finite(v) => Some(v),
            Score::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Score::Infinite)
    }
}

impl<T: PartialOrd> Score<T> {
    /// Total comparison for sorting; incomparable finite values (NaN) compare
    /// equal.
    pub fn sort_cmp(&self, other: &Self) -> Ordering {
        self.partial_cmp(other).unwrap_or(Ordering::Equal)
    }
}

/// Stage-1 score: the number of samples needed to reach an acceptable one.
pub type ConformalScore = Score<usize>;

/// Stage-1 and stage-2 risk levels. The composite level
/// `epsilon = alpha + beta - alpha * beta` is always derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "BudgetRepr<T>", try_from = "BudgetRepr<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct RiskBudget<T> {
    alpha: T,
    beta: T,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
struct BudgetRepr<T> {
    alpha: T,
    beta: T,
    #[serde(default, skip_deserializing)]
    epsilon: Option<T>,
}

impl<T: Scalar> From<RiskBudget<T>> for BudgetRepr<T> {
    fn from(b: RiskBudget<T>) -> Self {
        BudgetRepr {
            alpha: b.alpha,
            beta: b.beta,
            epsilon: Some(b.epsilon()),
        }
    }
}

impl<T: Scalar> TryFrom<BudgetRepr<T>> for RiskBudget<T> {
    type Error = Error;

    fn try_from(r: BudgetRepr<T>) -> Result<Self> {
        RiskBudget::new(r.alpha, r.beta)
    }
}

impl<T: Scalar> RiskBudget<T> {
    pub fn new(alpha: T, beta: T) -> Result<Self> {
        check_risk(alpha)?;
        check_risk(beta)?;
        Ok(Self { alpha, beta })
    }

    /// Budget whose composite level is `epsilon` with stage-1 level `alpha`.
    pub fn from_epsilon(alpha: T, epsilon: T) -> Result<Self> {
        check_risk(alpha)?;
        let beta = (epsilon - alpha) / (T::one() - alpha);
        Self::new(alpha, beta)
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn epsilon(&self) -> T {
        self.alpha + self.beta - self.alpha * self.beta
    }
}

/// Rejects risk levels outside the open unit interval.
pub fn check_risk<T: Scalar>(risk: T) -> Result<T> {
    if risk > T::zero() && risk < T::one() {
        Ok(risk)
    } else {
        Err(Error::InvalidRiskLevel(risk.as_f64()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub split_ratio: Option<f64>,
    pub measure: String,
    pub oracle: String,
}

/// Output of the two calibration steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct CalibrationResult<T> {
    /// Number of samples to draw per test question.
    pub sample_budget: usize,
    /// Largest admissible nonconformity for a prediction-set member.
    pub threshold: T,
    pub budget: RiskBudget<T>,
    pub calibration_size: usize,
    pub provenance: Provenance,
}

/// One retained response of a prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member<T> {
    /// Zero-based position in the record's samples.
    pub index: usize,
    pub text: String,
    pub frequency: T,
    /// Value of the reliability measure used for thresholding (equals
    /// `frequency` under the frequency measure).
    pub reliability: T,
}

/// Responses retained for one record, with and without semantic duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet<T> {
    pub record_id: String,
    pub raw_members: Vec<Member<T>>,
    /// Earliest member of each semantic class among `raw_members`.
    pub dedup_members: Vec<Member<T>>,
}

impl<T> PredictionSet<T> {
    pub fn raw_indices(&self) -> Vec<usize> {
        self.raw_members.iter().map(|m| m.index).collect()
    }

    pub fn dedup_indices(&self) -> Vec<usize> {
        self.dedup_members.iter().map(|m| m.index).collect()
    }
}

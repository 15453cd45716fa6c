//! Prediction sets for test records.

use crate::calibration::{reliabilities, with_record_oracle, ReliabilityMeasure};
use crate::clustering::{cluster, dedup};
use crate::domain::{CalibrationResult, Member, PredictionSet, QaRecord};
use crate::error::{Error, Result};
use crate::oracle::EquivalenceOracle;
use crate::scalar::Scalar;

/// A test record (label optional) with the calibration to apply. The record
/// must carry at least `calibration.sample_budget` samples.
#[derive(Debug, Clone, Copy)]
pub struct PredictionRequest<'a, T> {
    pub record: &'a QaRecord,
    pub calibration: &'a CalibrationResult<T>,
    pub measure: &'a ReliabilityMeasure,
}

/// Clusters the first `r̂` samples and keeps every sample whose
/// nonconformity `1 - reliability` is at most `ŝ`. The set may be empty.
pub fn predict<T: Scalar>(req: &PredictionRequest<'_, T>, oracle: &dyn EquivalenceOracle) -> Result<PredictionSet<T>> {
    let record = req.record;
    record.check(false)?;
    let budget = req.calibration.sample_budget;
    let threshold = req.calibration.threshold;
    if record.samples().len() < budget {
        return Err(Error::InsufficientSamples {
            id: record.id().to_owned(),
            needed: budget,
            got: record.samples().len(),
        });
    }

    with_record_oracle(oracle, |oracle| {
        let assignment = cluster::<T>(record, oracle, Some(budget))?;
        let rel = reliabilities(record, &assignment, req.measure)?;
        let member = |m: usize| Member {
            index: m,
            text: record.samples()[m].clone(),
            frequency: assignment.frequencies()[m],
            reliability: rel[m],
        };
        let raw: Vec<usize> = (0..budget).filter(|&m| T::one() - rel[m] <= threshold).collect();
        let kept = dedup(&raw, record, oracle)?;
        Ok(PredictionSet {
            record_id: record.id().to_owned(),
            raw_members: raw.iter().map(|&m| member(m)).collect(),
            dedup_members: kept.iter().map(|&m| member(m)).collect(),
        })
    })
}

/// `(raw size, deduplicated size)`.
pub fn set_sizes<T>(ps: &PredictionSet<T>) -> (usize, usize) {
    (ps.raw_members.len(), ps.dedup_members.len())
}

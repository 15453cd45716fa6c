//! Empirical error rates, set sizes and accuracy over a labeled test split,
//! and risk-level sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    conformal_scores, first_acceptable, nonconformity_scores, quantile_rank, sample_budget_from_scores,
    threshold_from_scores, with_record_oracle, ReliabilityMeasure,
};
use crate::clustering::cluster;
use crate::domain::{CalibrationResult, PredictionSet, Provenance, QaRecord, RiskBudget};
use crate::error::{Error, Result};
use crate::io::{derive_seed, split};
use crate::oracle::EquivalenceOracle;
use crate::prediction::{predict, PredictionRequest};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetView {
    Raw,
    Dedup,
}

fn labeled(test: &[QaRecord]) -> Result<()> {
    if test.is_empty() {
        return Err(Error::EmptyCollection);
    }
    test.iter().try_for_each(|r| r.check(true))
}

/// Fraction of records whose first `r̂` samples contain no acceptable response.
pub fn stage1_eer<T: Scalar>(test: &[QaRecord], r_hat: usize, oracle: &dyn EquivalenceOracle) -> Result<T> {
    labeled(test)?;
    let misses = test
        .par_iter()
        .map(|r| {
            if r.samples().len() < r_hat {
                return Err(Error::InsufficientSamples {
                    id: r.id().to_owned(),
                    needed: r_hat,
                    got: r.samples().len(),
                });
            }
            with_record_oracle(oracle, |o| first_acceptable(r, r.label()?, r_hat, o))
                .map(|hit| usize::from(hit.is_none()))
        })
        .sum::<Result<usize>>()?;
    Ok(T::ratio(misses, test.len()))
}

/// Fraction of records whose raw prediction set has no acceptable member.
/// `sets[i]` must belong to `test[i]`.
pub fn stage2_eer<T: Scalar>(
    test: &[QaRecord],
    sets: &[PredictionSet<T>],
    oracle: &dyn EquivalenceOracle,
) -> Result<T> {
    labeled(test)?;
    if sets.len() != test.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction set(s) for {} record(s)",
            sets.len(),
            test.len()
        )));
    }
    let misses = test
        .par_iter()
        .zip(sets.par_iter())
        .map(|(r, ps)| {
            if ps.record_id != r.id() {
                return Err(Error::InvalidArgument(format!(
                    "prediction set for `{}` paired with record `{}`",
                    ps.record_id,
                    r.id()
                )));
            }
            let label = r.label()?;
            for m in &ps.raw_members {
                if oracle.equivalent(r.question(), &m.text, label)? {
                    return Ok(0);
                }
            }
            Ok(1)
        })
        .sum::<Result<usize>>()?;
    Ok(T::ratio(misses, test.len()))
}

/// Average prediction-set size.
pub fn apss<T: Scalar>(sets: &[PredictionSet<T>], view: SetView) -> Result<T> {
    if sets.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let total: usize = sets
        .iter()
        .map(|s| match view {
            SetView::Raw => s.raw_members.len(),
            SetView::Dedup => s.dedup_members.len(),
        })
        .sum();
    Ok(T::ratio(total, sets.len()))
}

/// Fraction of records whose most frequent response (earliest on ties) is
/// acceptable.
pub fn acc<T: Scalar>(test: &[QaRecord], oracle: &dyn EquivalenceOracle) -> Result<T> {
    labeled(test)?;
    let hits = test
        .par_iter()
        .map(|r| {
            with_record_oracle(oracle, |o| {
                let c = cluster::<T>(r, o, None)?;
                let mut best = 0;
                for (m, f) in c.frequencies().iter().enumerate() {
                    if *f > c.frequencies()[best] {
                        best = m;
                    }
                }
                let ok = o.equivalent(r.question(), &r.samples()[best], r.label()?)?;
                Ok(usize::from(ok))
            })
        })
        .sum::<Result<usize>>()?;
    Ok(T::ratio(hits, test.len()))
}

/// Metrics of one calibrate-then-evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct TrialReport<T> {
    pub stage1_eer: T,
    pub stage2_eer: T,
    pub apss_raw: T,
    pub apss_dedup: T,
    pub acc: T,
    pub n_test: usize,
    pub calibration: CalibrationResult<T>,
}

impl<T: Scalar> TrialReport<T> {
    /// `(alpha, epsilon)`: the bounds the two error rates are held to.
    pub fn bounds(&self) -> (T, T) {
        let b = &self.calibration.budget;
        (b.alpha(), b.epsilon())
    }

    pub fn to_row(&self, trial: usize) -> SweepRow {
        let c = &self.calibration;
        SweepRow {
            alpha: c.budget.alpha().as_f64(),
            beta: c.budget.beta().as_f64(),
            epsilon: c.budget.epsilon().as_f64(),
            trial,
            seed: c.provenance.seed.unwrap_or_default(),
            split_ratio: c.provenance.split_ratio.unwrap_or(f64::NAN),
            stage1_eer: Some(self.stage1_eer.as_f64()),
            stage2_eer: Some(self.stage2_eer.as_f64()),
            apss_raw: Some(self.apss_raw.as_f64()),
            apss_dedup: Some(self.apss_dedup.as_f64()),
            acc: Some(self.acc.as_f64()),
            n_cal: c.calibration_size,
            n_test: self.n_test,
            r_hat: Some(c.sample_budget),
            s_hat: Some(c.threshold.as_f64()),
            measure: c.provenance.measure.clone(),
            oracle: c.provenance.oracle.clone(),
            status: "ok".into(),
        }
    }
}

/// Predicts every test record and computes all metrics.
pub fn evaluate<T: Scalar>(
    test: &[QaRecord],
    calibration: &CalibrationResult<T>,
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
) -> Result<(TrialReport<T>, Vec<PredictionSet<T>>)> {
    labeled(test)?;
    let sets = test
        .par_iter()
        .map(|record| {
            predict(
                &PredictionRequest {
                    record,
                    calibration,
                    measure,
                },
                oracle,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let report = TrialReport {
        stage1_eer: stage1_eer(test, calibration.sample_budget, oracle)?,
        stage2_eer: stage2_eer(test, &sets, oracle)?,
        apss_raw: apss(&sets, SetView::Raw)?,
        apss_dedup: apss(&sets, SetView::Dedup)?,
        acc: acc(test, oracle)?,
        n_test: test.len(),
        calibration: calibration.clone(),
    };
    Ok((report, sets))
}

/// One CSV row of a sweep. Metric columns are empty when the grid point was
/// infeasible; `status` then carries the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub trial: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub stage1_eer: Option<f64>,
    pub stage2_eer: Option<f64>,
    pub apss_raw: Option<f64>,
    pub apss_dedup: Option<f64>,
    pub acc: Option<f64>,
    pub n_cal: usize,
    pub n_test: usize,
    pub r_hat: Option<usize>,
    pub s_hat: Option<f64>,
    pub measure: String,
    pub oracle: String,
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Mean and standard error of each metric over the feasible trials of one
/// grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub split_ratio: f64,
    pub trials: usize,
    pub n_ok: usize,
    pub stage1_eer_mean: Option<f64>,
    pub stage1_eer_se: Option<f64>,
    pub stage2_eer_mean: Option<f64>,
    pub stage2_eer_se: Option<f64>,
    pub apss_raw_mean: Option<f64>,
    pub apss_raw_se: Option<f64>,
    pub apss_dedup_mean: Option<f64>,
    pub apss_dedup_se: Option<f64>,
    pub acc_mean: Option<f64>,
    pub acc_se: Option<f64>,
    pub measure: String,
    pub oracle: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Sample mean and standard error of the mean (0 for fewer than 2 values).
pub fn mean_se(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Groups rows by grid point (in first-appearance order) and aggregates them.
pub fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(u64, u64, u64)> = Vec::new();
    for r in rows {
        let k = (r.alpha.to_bits(), r.beta.to_bits(), r.split_ratio.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| (r.alpha.to_bits(), r.beta.to_bits(), r.split_ratio.to_bits()) == k)
                .collect();
            let ok: Vec<&&SweepRow> = group.iter().filter(|r| r.is_ok()).collect();
            let stat = |f: fn(&SweepRow) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                mean_se(&v)
            };
            let s1 = stat(|r| r.stage1_eer);
            let s2 = stat(|r| r.stage2_eer);
            let ar = stat(|r| r.apss_raw);
            let ad = stat(|r| r.apss_dedup);
            let ac = stat(|r| r.acc);
            let first = group[0];
            AggregateRow {
                alpha: first.alpha,
                beta: first.beta,
                epsilon: first.epsilon,
                split_ratio: first.split_ratio,
                trials: group.len(),
                n_ok: ok.len(),
                stage1_eer_mean: s1.map(|x| x.0),
                stage1_eer_se: s1.map(|x| x.1),
                stage2_eer_mean: s2.map(|x| x.0),
                stage2_eer_se: s2.map(|x| x.1),
                apss_raw_mean: ar.map(|x| x.0),
                apss_raw_se: ar.map(|x| x.1),
                apss_dedup_mean: ad.map(|x| x.0),
                apss_dedup_se: ad.map(|x| x.1),
                acc_mean: ac.map(|x| x.0),
                acc_se: ac.map(|x| x.1),
                measure: first.measure.clone(),
                oracle: first.oracle.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub split_ratio: f64,
    pub seed: u64,
    pub trials: usize,
}

/// Evaluates every `(alpha, beta)` pair of the grid on `trials` seeded
/// calibration/test splits of `records`. Rows come out ordered by grid point
/// (alpha-major), then trial. Infeasible grid points are recorded in their
/// rows rather than aborting the sweep.
pub fn sweep<T: Scalar>(
    records: &[QaRecord],
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
    config: &SweepConfig,
) -> Result<SweepTable> {
    if config.alphas.is_empty() || config.betas.is_empty() || config.trials == 0 {
        return Err(Error::InvalidArgument(
            "sweep grids and trial count must be non-empty".into(),
        ));
    }
    for &r in config.alphas.iter().chain(&config.betas) {
        crate::domain::check_risk(r)?;
    }
    let per_trial = (0..config.trials)
        .into_par_iter()
        .map(|trial| sweep_trial::<T>(records, oracle, measure, config, trial))
        .collect::<Result<Vec<_>>>()?;

    let points = config.alphas.len() * config.betas.len();
    let mut rows = Vec::with_capacity(points * config.trials);
    for p in 0..points {
        for trial_rows in &per_trial {
            rows.push(trial_rows[p].clone());
        }
    }
    let aggregates = aggregate(&rows);
    Ok(SweepTable { rows, aggregates })
}

fn sweep_trial<T: Scalar>(
    records: &[QaRecord],
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
    config: &SweepConfig,
    trial: usize,
) -> Result<Vec<SweepRow>> {
    let seed = derive_seed(config.seed, trial as u64);
    let (cal, test) = split(records, config.split_ratio, seed)?;
    let r_scores = conformal_scores(&cal, oracle)?;
    let mut out = Vec::new();
    for &a in &config.alphas {
        let alpha = T::from_real(a);
        // (r̂, stage-2 scores over the first r̂ samples), or the reason the point is skipped
        let stage1 = match quantile_rank(cal.len(), alpha).and_then(|_| sample_budget_from_scores(&r_scores, alpha)) {
            Ok(r_hat) => Ok((r_hat, nonconformity_scores::<T>(&cal, oracle, measure, Some(r_hat))?)),
            Err(e) => Err(flag(&e)?),
        };
        for &b in &config.betas {
            let beta = T::from_real(b);
            let budget = RiskBudget::new(alpha, beta)?;
            let calibrated = match &stage1 {
                Ok((r_hat, s_scores)) => {
                    match quantile_rank(cal.len(), beta).and_then(|_| threshold_from_scores(s_scores, beta)) {
                        Ok(s_hat) => Ok((*r_hat, s_hat)),
                        Err(e) => Err(flag(&e)?),
                    }
                }
                Err(status) => Err(status.clone()),
            };
            let row = match calibrated {
                Ok((sample_budget, threshold)) => {
                    let calibration = CalibrationResult {
                        sample_budget,
                        threshold,
                        budget,
                        calibration_size: cal.len(),
                        provenance: Provenance {
                            seed: Some(seed),
                            split_ratio: Some(config.split_ratio),
                            measure: measure.name(),
                            oracle: oracle.name().to_owned(),
                        },
                    };
                    let (report, _) = evaluate(&test, &calibration, oracle, measure)?;
                    SweepRow {
                        alpha: a,
                        beta: b,
                        ..report.to_row(trial)
                    }
                }
                Err(status) => SweepRow {
                    alpha: a,
                    beta: b,
                    epsilon: budget.epsilon().as_f64(),
                    trial,
                    seed,
                    split_ratio: config.split_ratio,
                    stage1_eer: None,
                    stage2_eer: None,
                    apss_raw: None,
                    apss_dedup: None,
                    acc: None,
                    n_cal: cal.len(),
                    n_test: test.len(),
                    r_hat: None,
                    s_hat: None,
                    measure: measure.name(),
                    oracle: oracle.name().to_owned(),
                    status,
                },
            };
            out.push(row);
        }
    }
    Ok(out)
}

/// Row status for grid-point failures that are recorded rather than fatal.
fn flag(e: &Error) -> Result<String> {
    match e {
        Error::InfeasibleRiskLevel { .. } => Ok(format!("infeasible: {e}")),
        Error::UnboundedBudget { .. } => Ok(format!("unbounded: {e}")),
        other => Err(Error::InvalidArgument(other.to_string())),
    }
}

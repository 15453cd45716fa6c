//! Two-step calibration.
//!
//! Step 1 scores each labeled calibration record by the number of samples
//! needed to reach an acceptable response and picks the sample budget `r̂` as
//! the `⌈(N+1)(1-α)⌉`-th smallest score. Step 2 scores each record by one
//! minus the reliability of its first acceptable response within the first
//! `r̂` samples and picks the threshold `ŝ` as the `⌈(N+1)(1-β)⌉`-th smallest
//! score. Prediction sets keep prefix responses whose nonconformity is at most
//! `ŝ`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::clustering::{cluster, semantic_diversity, ClusterAssignment};
use crate::domain::{check_risk, CalibrationResult, ConformalScore, Provenance, QaRecord, RiskBudget, Score};
use crate::error::{Error, Result};
use crate::oracle::{EquivalenceOracle, MemoOracle, SimilarityFunction};
use crate::scalar::Scalar;

/// How reliable a response is within its candidate set, in `[0, 1]`.
#[derive(Clone, Default)]
pub enum ReliabilityMeasure {
    /// Self-consistency frequency of the response.
    #[default]
    Frequency,
    /// Semantic diversity, divided by the largest diversity in the same set.
    SemanticDiversity(Arc<dyn SimilarityFunction>),
}

impl ReliabilityMeasure {
    pub fn name(&self) -> String {
        match self {
            ReliabilityMeasure::Frequency => "frequency".into(),
            ReliabilityMeasure::SemanticDiversity(sim) => {
                format!("semantic-diversity:{}", sim.name())
            }
        }
    }
}

impl fmt::Debug for ReliabilityMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Reliability of every clustered sample under `measure`.
pub fn reliabilities<T: Scalar>(
    record: &QaRecord,
    assignment: &ClusterAssignment<T>,
    measure: &ReliabilityMeasure,
) -> Result<Vec<T>> {
    match measure {
        ReliabilityMeasure::Frequency => Ok(assignment.frequencies().to_vec()),
        ReliabilityMeasure::SemanticDiversity(sim) => {
            let raw = (0..assignment.prefix_len())
                .map(|m| semantic_diversity(assignment, record, sim.as_ref(), m))
                .collect::<Result<Vec<T>>>()?;
            let max = raw.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
            if max == T::zero() {
                return Ok(vec![T::zero(); raw.len()]);
            }
            Ok(raw.into_iter().map(|d| d / max).collect())
        }
    }
}

/// Runs `f` with a per-record cache in front of costly oracles.
pub(crate) fn with_record_oracle<R>(oracle: &dyn EquivalenceOracle, f: impl FnOnce(&dyn EquivalenceOracle) -> R) -> R {
    if oracle.is_costly() {
        let memo = MemoOracle::new(oracle);
        f(&memo)
    } else {
        f(oracle)
    }
}

/// Zero-based index of the first sample in the first `prefix` samples that is
/// equivalent to `label`.
pub(crate) fn first_acceptable(
    record: &QaRecord,
    label: &str,
    prefix: usize,
    oracle: &dyn EquivalenceOracle,
) -> Result<Option<usize>> {
    for (i, s) in record.samples().iter().take(prefix).enumerate() {
        if oracle.equivalent(record.question(), s, label)? {
            return Ok(Some(i));
        }
    }
    Ok(None)
}

/// Number of samples needed to reach the first response equivalent to the
/// reference, or `Infinite` if none is.
pub fn conformal_score(record: &QaRecord, oracle: &dyn EquivalenceOracle) -> Result<ConformalScore> {
    let label = record.label()?;
    Ok(match first_acceptable(record, label, record.samples().len(), oracle)? {
        Some(i) => Score::Finite(i + 1),
        None => Score::Infinite,
    })
}

/// Rank `⌈(n+1)(1-risk)⌉` of the conformal quantile among `n` scores.
pub fn quantile_rank<T: Scalar>(n: usize, risk: T) -> Result<usize> {
    check_risk(risk)?;
    if n == 0 {
        return Err(Error::EmptyCollection);
    }
    let target = T::from_usize(n + 1).expect("count fits scalar") * (T::one() - risk);
    let rank = target.ceil_to_usize().max(1);
    if rank > n {
        return Err(Error::InfeasibleRiskLevel {
            n,
            risk: risk.as_f64(),
            rank,
            min_feasible: 1.0 / (n as f64 + 1.0),
        });
    }
    Ok(rank)
}

/// The `quantile_rank(len, risk)`-th smallest score. Ties keep input order.
pub fn conformal_quantile<S: PartialOrd + Clone, T: Scalar>(scores: &[S], risk: T) -> Result<S> {
    let rank = quantile_rank(scores.len(), risk)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sorted[rank - 1].clone())
}

/// Sample budget from precomputed conformal scores.
pub fn sample_budget_from_scores<T: Scalar>(scores: &[ConformalScore], alpha: T) -> Result<usize> {
    match conformal_quantile(scores, alpha)? {
        Score::Finite(r) => Ok(r),
        Score::Infinite => Err(Error::UnboundedBudget {
            rank: quantile_rank(scores.len(), alpha)?,
        }),
    }
}

/// Threshold from precomputed nonconformity scores.
pub fn threshold_from_scores<T: Scalar>(scores: &[T], beta: T) -> Result<T> {
    conformal_quantile(scores, beta)
}

fn require_labeled(cal: &[QaRecord]) -> Result<()> {
    if cal.is_empty() {
        return Err(Error::EmptyCollection);
    }
    cal.iter().try_for_each(|r| r.check(true))
}

/// Conformal scores of every calibration record, in input order.
pub fn conformal_scores(cal: &[QaRecord], oracle: &dyn EquivalenceOracle) -> Result<Vec<ConformalScore>> {
    require_labeled(cal)?;
    cal.par_iter()
        .map(|r| with_record_oracle(oracle, |o| conformal_score(r, o)))
        .collect()
}

pub fn calibrate_sampling<T: Scalar>(cal: &[QaRecord], alpha: T, oracle: &dyn EquivalenceOracle) -> Result<usize> {
    quantile_rank(cal.len(), alpha)?;
    sample_budget_from_scores(&conformal_scores(cal, oracle)?, alpha)
}

/// One minus the reliability of the first acceptable response among the first
/// `prefix_len` samples (all samples when `None`, clamped to the record
/// length). Records with no acceptable response in scope score 1.
pub fn nonconformity_score<T: Scalar>(
    record: &QaRecord,
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
    prefix_len: Option<usize>,
) -> Result<T> {
    let label = record.label()?;
    let len = record.samples().len();
    let scope = prefix_len.map_or(len, |p| p.min(len));
    let Some(reference) = first_acceptable(record, label, scope, oracle)? else {
        return Ok(T::one());
    };
    let assignment = cluster::<T>(record, oracle, Some(scope))?;
    let rel = reliabilities(record, &assignment, measure)?;
    Ok(T::one() - rel[reference])
}

/// Nonconformity scores of every calibration record, in input order.
pub fn nonconformity_scores<T: Scalar>(
    cal: &[QaRecord],
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
    prefix_len: Option<usize>,
) -> Result<Vec<T>> {
    require_labeled(cal)?;
    cal.par_iter()
        .map(|r| with_record_oracle(oracle, |o| nonconformity_score(r, o, measure, prefix_len)))
        .collect()
}

pub fn calibrate_threshold<T: Scalar>(
    cal: &[QaRecord],
    beta: T,
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
    prefix_len: Option<usize>,
) -> Result<T> {
    quantile_rank(cal.len(), beta)?;
    threshold_from_scores(&nonconformity_scores(cal, oracle, measure, prefix_len)?, beta)
}

/// Calibration records together with both score lists.
#[derive(Debug, Clone)]
pub struct ScoredCalibrationSet<'a, T> {
    pub records: &'a [QaRecord],
    pub conformal_scores: Vec<ConformalScore>,
    pub nonconformity_scores: Vec<T>,
}

/// Runs both steps. Stage-2 scores are computed over the first `r̂` samples
/// of each calibration record, the same scope prediction uses.
pub fn calibrate<T: Scalar>(
    cal: &[QaRecord],
    budget: RiskBudget<T>,
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
) -> Result<CalibrationResult<T>> {
    Ok(calibrate_scored(cal, budget, oracle, measure)?.0)
}

/// [`calibrate`], also returning the scores it was computed from.
pub fn calibrate_scored<'a, T: Scalar>(
    cal: &'a [QaRecord],
    budget: RiskBudget<T>,
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
) -> Result<(CalibrationResult<T>, ScoredCalibrationSet<'a, T>)> {
    quantile_rank(cal.len(), budget.alpha())?;
    quantile_rank(cal.len(), budget.beta())?;
    let r_scores = conformal_scores(cal, oracle)?;
    let sample_budget = sample_budget_from_scores(&r_scores, budget.alpha())?;
    let s_scores = nonconformity_scores(cal, oracle, measure, Some(sample_budget))?;
    let threshold = threshold_from_scores(&s_scores, budget.beta())?;
    let result = CalibrationResult {
        sample_budget,
        threshold,
        budget,
        calibration_size: cal.len(),
        provenance: Provenance {
            seed: None,
            split_ratio: None,
            measure: measure.name(),
            oracle: oracle.name().to_owned(),
        },
    };
    Ok((
        result,
        ScoredCalibrationSet {
            records: cal,
            conformal_scores: r_scores,
            nonconformity_scores: s_scores,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_oracle, ConstantSimilarity};
    use crate::Rational;
    use proptest::prelude::*;

    /// Record whose first acceptable sample sits at 1-based position `r`
    /// (`None`: never).
    fn with_score(id: usize, r: Option<usize>, m: usize) -> QaRecord {
        let samples = (1..=m)
            .map(|i| {
                if Some(i) == r {
                    "ok".to_string()
                } else {
                    format!("w{i}")
                }
            })
            .collect();
        QaRecord::new(id.to_string(), "q", samples, Some("ok".into()))
    }

    fn labeled(samples: &[&str], label: &str) -> QaRecord {
        QaRecord::new(
            "r",
            "q",
            samples.iter().map(|s| s.to_string()).collect(),
            Some(label.into()),
        )
    }

    /// Independent reference: sort, then index at the ceiling rank.
    fn naive_quantile<S: PartialOrd + Clone>(scores: &[S], risk: Rational) -> Option<S> {
        let n = scores.len() as i64;
        let rank = (Rational::from_integer(n + 1) * (Rational::from_integer(1) - risk))
            .ceil()
            .to_integer();
        if rank > n {
            return None;
        }
        let mut v = scores.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(v[(rank - 1) as usize].clone())
    }

    #[test]
    fn conformal_score_examples() {
        let o = exact_oracle();
        assert_eq!(
            conformal_score(&labeled(&["x", "y", "x"], "y"), &o).unwrap(),
            Score::Finite(2)
        );
        assert_eq!(
            conformal_score(&labeled(&["y", "x"], "y"), &o).unwrap(),
            Score::Finite(1)
        );
        assert_eq!(
            conformal_score(&labeled(&["a", "b", "c", "d", "e"], "y"), &o).unwrap(),
            Score::Infinite
        );
        let unlabeled = QaRecord::new("u", "q", vec!["a".into()], None);
        assert!(matches!(
            conformal_score(&unlabeled, &o),
            Err(Error::MissingLabel { .. })
        ));
    }

    #[test]
    fn quantile_rank_examples() {
        assert_eq!(quantile_rank(9, 0.1).unwrap(), 9);
        assert_eq!(quantile_rank(19, 0.05).unwrap(), 19);
        assert!(matches!(
            quantile_rank(4, 0.1),
            Err(Error::InfeasibleRiskLevel { rank: 5, .. })
        ));
        assert_eq!(quantile_rank(1, 0.6).unwrap(), 1);
        assert!(matches!(quantile_rank(0, 0.5), Err(Error::EmptyCollection)));
        assert!(matches!(quantile_rank(10, 1.0), Err(Error::InvalidRiskLevel(_))));
    }

    #[test]
    fn calibrate_sampling_examples() {
        let o = exact_oracle();
        let scores = [1, 1, 2, 3, 5, 2, 1, 4, 8];
        let cal: Vec<_> = scores
            .iter()
            .enumerate()
            .map(|(i, &r)| with_score(i, Some(r), 10))
            .collect();
        assert_eq!(calibrate_sampling(&cal, 0.1, &o).unwrap(), 8);
        let naive = naive_quantile(&scores, Rational::new(1, 10)).unwrap();
        assert_eq!(naive, 8);

        let flat: Vec<_> = (0..10).map(|i| with_score(i, Some(3), 5)).collect();
        for a in [0.1, 0.3, 0.5, 0.9] {
            assert_eq!(calibrate_sampling(&flat, a, &o).unwrap(), 3);
        }

        let short = vec![
            with_score(0, Some(1), 3),
            with_score(1, Some(2), 3),
            with_score(2, None, 3),
        ];
        assert!(matches!(
            calibrate_sampling(&short, 0.1, &o),
            Err(Error::InfeasibleRiskLevel { .. })
        ));
        assert_eq!(calibrate_sampling(&short, 0.5, &o).unwrap(), 2);
        assert!(matches!(
            calibrate_sampling(&short, 0.25, &o),
            Err(Error::UnboundedBudget { rank: 3 })
        ));
    }

    #[test]
    fn nonconformity_examples() {
        let o = exact_oracle();
        let m = ReliabilityMeasure::Frequency;
        let r = labeled(&["A", "A", "B", "A", "A"], "A");
        let s: f64 = nonconformity_score(&r, &o, &m, None).unwrap();
        assert!((s - 0.2).abs() < 1e-12);
        let r = labeled(&["A", "A", "B", "A", "B"], "A");
        let s: Rational = nonconformity_score(&r, &o, &m, None).unwrap();
        assert_eq!(s, Rational::new(2, 5));
        let all = labeled(&["A"; 6], "A");
        assert_eq!(nonconformity_score::<f64>(&all, &o, &m, None).unwrap(), 0.0);
        let none = labeled(&["B", "C"], "A");
        assert_eq!(nonconformity_score::<f64>(&none, &o, &m, None).unwrap(), 1.0);
    }

    #[test]
    fn nonconformity_respects_prefix() {
        let o = exact_oracle();
        let m = ReliabilityMeasure::Frequency;
        let r = labeled(&["B", "A", "B", "A", "A", "A"], "A");
        // first two samples: A has frequency 1/2
        assert_eq!(
            nonconformity_score::<Rational>(&r, &o, &m, Some(2)).unwrap(),
            Rational::new(1, 2)
        );
        // first sample only: no acceptable response in scope
        assert_eq!(nonconformity_score::<f64>(&r, &o, &m, Some(1)).unwrap(), 1.0);
        // prefix longer than the record is clamped
        assert_eq!(
            nonconformity_score::<Rational>(&r, &o, &m, Some(99)).unwrap(),
            Rational::new(1, 3)
        );
    }

    #[test]
    fn diversity_measure_is_max_normalized() {
        let o = exact_oracle();
        let measure = ReliabilityMeasure::SemanticDiversity(Arc::new(ConstantSimilarity(0.5)));
        // A,A,B: div(A) = 0.5 * 1/3, div(B) = 0.5 * 2/3 * 2 = 2/3 -> max 2/3
        let r = labeled(&["A", "A", "B"], "A");
        let s: Rational = nonconformity_score(&r, &o, &measure, None).unwrap();
        assert_eq!(s, Rational::new(3, 4));
        let r = labeled(&["A", "A", "B"], "B");
        assert_eq!(
            nonconformity_score::<Rational>(&r, &o, &measure, None).unwrap(),
            Rational::from_integer(0)
        );
        // single class: every diversity is zero and maps to zero reliability
        let r = labeled(&["A", "A"], "A");
        assert_eq!(nonconformity_score::<f64>(&r, &o, &measure, None).unwrap(), 1.0);
    }

    #[test]
    fn threshold_examples() {
        let s = [0.0, 0.2, 0.4, 0.5, 0.5, 0.6, 0.7, 0.8, 0.9];
        assert_eq!(threshold_from_scores(&s, 0.1).unwrap(), 0.9);
        assert_eq!(threshold_from_scores(&[0.0; 9], 0.1).unwrap(), 0.0);
        assert_eq!(threshold_from_scores(&[0.3], 0.6).unwrap(), 0.3);

        let o = exact_oracle();
        let cal = vec![labeled(&["A"; 4], "A"), labeled(&["A", "B", "B", "B"], "A")];
        let t: Rational =
            calibrate_threshold(&cal, Rational::new(2, 5), &o, &ReliabilityMeasure::Frequency, None).unwrap();
        assert_eq!(t, Rational::new(3, 4));
    }

    #[test]
    fn calibrate_bundles_both_steps() {
        let o = exact_oracle();
        let cal: Vec<_> = (0..19).map(|i| with_score(i, Some(1 + i % 3), 6)).collect();
        let res = calibrate(
            &cal,
            RiskBudget::new(0.1, 0.1).unwrap(),
            &o,
            &ReliabilityMeasure::Frequency,
        )
        .unwrap();
        assert!((res.budget.epsilon() - 0.19_f64).abs() < 1e-12);
        assert_eq!(res.sample_budget, 3);
        assert_eq!(res.calibration_size, 19);
        assert_eq!(res.provenance.oracle, "exact");
        assert_eq!(res.provenance.measure, "frequency");
        let res = calibrate(
            &cal,
            RiskBudget::new(0.1, 0.2).unwrap(),
            &o,
            &ReliabilityMeasure::Frequency,
        )
        .unwrap();
        assert!((res.budget.epsilon() - 0.28_f64).abs() < 1e-12);
        let tiny = &cal[..4];
        assert!(matches!(
            calibrate(
                tiny,
                RiskBudget::new(0.1, 0.5).unwrap(),
                &o,
                &ReliabilityMeasure::Frequency
            ),
            Err(Error::InfeasibleRiskLevel { .. })
        ));
    }

    fn score_vec() -> impl Strategy<Value = Vec<Option<usize>>> {
        proptest::collection::vec(proptest::option::weighted(0.9, 1usize..12), 1..60)
    }

    proptest! {
        #[test]
        fn conformal_score_marks_first_acceptable_prefix(scores in score_vec()) {
            let o = exact_oracle();
            for (i, r) in scores.iter().enumerate() {
                let rec = with_score(i, *r, 12);
                match conformal_score(&rec, &o).unwrap() {
                    Score::Finite(k) => {
                        prop_assert!(first_acceptable(&rec, "ok", k, &o).unwrap().is_some());
                        prop_assert!(first_acceptable(&rec, "ok", k - 1, &o).unwrap().is_none());
                    }
                    Score::Infinite => prop_assert!(first_acceptable(&rec, "ok", 12, &o).unwrap().is_none()),
                }
            }
        }

        #[test]
        fn budget_monotone_in_alpha(scores in score_vec(), a in 1i64..50, b in 1i64..50) {
            let rs: Vec<ConformalScore> = scores.iter().map(|s| s.map_or(Score::Infinite, Score::Finite)).collect();
            let (lo, hi) = (Rational::new(a.min(b), 50), Rational::new(a.max(b), 50));
            if let (Ok(q_lo), Ok(q_hi)) = (conformal_quantile(&rs, lo), conformal_quantile(&rs, hi)) {
                prop_assert!(q_lo >= q_hi);
            }
        }

        #[test]
        fn threshold_stays_in_observed_multiset(
            s in proptest::collection::vec(0u32..=20, 1..80),
            b in 1i64..100,
        ) {
            let scores: Vec<Rational> = s.iter().map(|&v| Rational::new(v as i64, 20)).collect();
            let beta = Rational::new(b, 100);
            if let Ok(t) = threshold_from_scores(&scores, beta) {
                prop_assert!(scores.contains(&t));
                prop_assert_eq!(Some(t), naive_quantile(&scores, beta));
            }
        }
    }
}

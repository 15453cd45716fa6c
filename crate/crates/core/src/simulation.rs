//! Synthetic exchangeable QA data and Monte Carlo / exact checks of the
//! coverage guarantees.
//!
//! Each synthetic question has a probability `p` of emitting its correct
//! answer on every draw; otherwise one of `distractor_count` wrong answers is
//! drawn uniformly. Answers are distinct opaque strings, so the exact oracle
//! is a perfect equivalence relation on them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, conformal_quantile, quantile_rank, ReliabilityMeasure};
use crate::domain::{QaRecord, RiskBudget};
use crate::error::{Error, Result};
use crate::io::{derive_seed, split};
use crate::metrics::{evaluate, mean_se, SweepRow, TrialReport};
use crate::oracle::EquivalenceOracle;
use crate::scalar::Scalar;
use crate::Rational;

/// Law of the per-question probability of drawing the correct answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbLaw {
    Fixed(f64),
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// `high` with probability `weight_high`, else `low`.
    TwoPoint {
        low: f64,
        high: f64,
        weight_high: f64,
    },
}

impl ProbLaw {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ProbLaw::Fixed(p) => p,
            ProbLaw::Uniform { lo, hi } => {
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
            ProbLaw::TwoPoint { low, high, weight_high } => {
                if rng.gen::<f64>() < weight_high {
                    high
                } else {
                    low
                }
            }
        }
    }

    fn support(&self) -> (f64, f64) {
        match *self {
            ProbLaw::Fixed(p) => (p, p),
            ProbLaw::Uniform { lo, hi } => (lo, hi),
            ProbLaw::TwoPoint { low, high, .. } => (low.min(high), low.max(high)),
        }
    }
}

impl fmt::Display for ProbLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbLaw::Fixed(p) => write!(f, "fixed:{p}"),
            ProbLaw::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
            ProbLaw::TwoPoint { low, high, weight_high } => write!(f, "two-point:{low}:{high}:{weight_high}"),
        }
    }
}

impl FromStr for ProbLaw {
    type Err = Error;

    /// `fixed:P`, `uniform:LO:HI` or `two-point:LOW:HIGH:WEIGHT_HIGH`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let nums = parts
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidSpec(format!("probability law `{s}`: {e}")))?;
        match (kind, nums.as_slice()) {
            ("fixed", [p]) => Ok(ProbLaw::Fixed(*p)),
            ("uniform", [lo, hi]) => Ok(ProbLaw::Uniform { lo: *lo, hi: *hi }),
            ("two-point", [low, high, w]) => Ok(ProbLaw::TwoPoint {
                low: *low,
                high: *high,
                weight_high: *w,
            }),
            _ => Err(Error::InvalidSpec(format!(
                "probability law `{s}`: expected fixed:P, uniform:LO:HI or two-point:LOW:HIGH:W"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_questions: usize,
    /// Samples drawn per record.
    pub max_samples: usize,
    pub correct_prob: ProbLaw,
    pub distractor_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_questions: 200,
            max_samples: 30,
            correct_prob: ProbLaw::Uniform { lo: 0.3, hi: 0.9 },
            distractor_count: 4,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    fn check(&self) -> Result<()> {
        if self.n_questions < 2 {
            return Err(Error::InvalidSpec("n_questions must be at least 2".into()));
        }
        if self.max_samples == 0 {
            return Err(Error::InvalidSpec("max_samples must be at least 1".into()));
        }
        let (lo, hi) = self.correct_prob.support();
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidSpec(format!(
                "probabilities of {} must lie in [0, 1]",
                self.correct_prob
            )));
        }
        if let ProbLaw::TwoPoint { weight_high, .. } = self.correct_prob {
            if !(0.0..=1.0).contains(&weight_high) {
                return Err(Error::InvalidSpec("two-point weight must lie in [0, 1]".into()));
            }
        }
        if self.distractor_count == 0 && lo < 1.0 {
            return Err(Error::InvalidSpec("wrong answers need at least one distractor".into()));
        }
        Ok(())
    }
}

/// Text of answer `k` to question `q`; `k = 0` is the correct one.
pub fn answer_text(q: usize, k: usize) -> String {
    format!("q{q} answer {k}")
}

/// Deterministic in `spec.seed`; every record is labeled.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<QaRecord>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let records = (0..spec.n_questions)
        .map(|q| {
            let p = spec.correct_prob.sample(&mut rng);
            let samples = (0..spec.max_samples)
                .map(|_| {
                    let k = if rng.gen::<f64>() < p {
                        0
                    } else {
                        rng.gen_range(1..=spec.distractor_count)
                    };
                    answer_text(q, k)
                })
                .collect();
            QaRecord::new(
                format!("syn-{q}"),
                format!("synthetic question {q}"),
                samples,
                Some(answer_text(q, 0)),
            )
        })
        .collect();
    Ok(records)
}

/// Seeded split, calibration, prediction and evaluation of one trial.
pub fn run_trial<T: Scalar>(
    records: &[QaRecord],
    budget: RiskBudget<T>,
    split_ratio: f64,
    seed: u64,
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
) -> Result<TrialReport<T>> {
    let (cal, test) = split(records, split_ratio, seed)?;
    let mut calibration = calibrate(&cal, budget, oracle, measure)?;
    calibration.provenance.seed = Some(seed);
    calibration.provenance.split_ratio = Some(split_ratio);
    Ok(evaluate(&test, &calibration, oracle, measure)?.0)
}

/// Aggregated outcome of [`validate_guarantee`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuaranteeVerdict {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub stage1_mean: f64,
    pub stage1_se: f64,
    pub stage2_mean: f64,
    pub stage2_se: f64,
    pub apss_raw_mean: f64,
    pub apss_dedup_mean: f64,
    pub acc_mean: f64,
    /// `1 - ⌈(N+1)(1-α)⌉/(N+1)`: the stage-1 error for continuous scores.
    pub stage1_exact: f64,
    pub stage1_pass: bool,
    pub stage2_pass: bool,
    pub rows: Vec<SweepRow>,
}

impl GuaranteeVerdict {
    pub fn pass(&self) -> bool {
        self.stage1_pass && self.stage2_pass
    }
}

impl fmt::Display for GuaranteeVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = |ok: bool| if ok { "PASS" } else { "FAIL" };
        writeln!(
            f,
            "{} trials, N_cal={} N_test={}, alpha={} beta={} epsilon={:.4}",
            self.trials, self.n_cal, self.n_test, self.alpha, self.beta, self.epsilon
        )?;
        writeln!(
            f,
            "  stage-1 EER {:.4} ± {:.4} (bound {:.4}) {}",
            self.stage1_mean,
            self.stage1_se,
            self.alpha,
            tag(self.stage1_pass)
        )?;
        writeln!(
            f,
            "  stage-2 EER {:.4} ± {:.4} (bound {:.4}) {}",
            self.stage2_mean,
            self.stage2_se,
            self.epsilon,
            tag(self.stage2_pass)
        )?;
        writeln!(
            f,
            "  APSS raw {:.3} dedup {:.3}, ACC {:.3}",
            self.apss_raw_mean, self.apss_dedup_mean, self.acc_mean
        )?;
        write!(f, "verdict: {}", tag(self.pass()))
    }
}

/// Runs `n_trials` trials on fresh synthetic data and compares the mean error
/// rates with their bounds: PASS iff mean stage-1 EER ≤ α + 2·SE and mean
/// stage-2 EER ≤ ε + 2·SE. Trial `t` draws data with seed
/// `derive_seed(spec.seed, t)`.
pub fn validate_guarantee<T: Scalar>(
    spec: &SyntheticSpec,
    budget: RiskBudget<T>,
    split_ratio: f64,
    n_trials: usize,
    oracle: &dyn EquivalenceOracle,
    measure: &ReliabilityMeasure,
) -> Result<GuaranteeVerdict> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    spec.check()?;
    let reports = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let data_seed = derive_seed(spec.seed, t as u64);
            let records = synth_generate(&SyntheticSpec {
                seed: data_seed,
                ..spec.clone()
            })?;
            let report = run_trial(
                &records,
                budget,
                split_ratio,
                derive_seed(data_seed, 1),
                oracle,
                measure,
            )?;
            Ok(report.to_row(t))
        })
        .collect::<Result<Vec<SweepRow>>>()?;

    let col = |f: fn(&SweepRow) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
    let (s1, se1) = mean_se(&col(|r| r.stage1_eer)).unwrap_or_default();
    let (s2, se2) = mean_se(&col(|r| r.stage2_eer)).unwrap_or_default();
    let apss_raw = mean_se(&col(|r| r.apss_raw)).unwrap_or_default().0;
    let apss_dedup = mean_se(&col(|r| r.apss_dedup)).unwrap_or_default().0;
    let acc = mean_se(&col(|r| r.acc)).unwrap_or_default().0;
    let alpha = budget.alpha().as_f64();
    let epsilon = budget.epsilon().as_f64();
    let n_cal = reports[0].n_cal;
    let stage1_exact = 1.0 - quantile_rank(n_cal, budget.alpha())? as f64 / (n_cal as f64 + 1.0);
    Ok(GuaranteeVerdict {
        alpha,
        beta: budget.beta().as_f64(),
        epsilon,
        trials: n_trials,
        n_cal,
        n_test: reports[0].n_test,
        stage1_mean: s1,
        stage1_se: se1,
        stage2_mean: s2,
        stage2_se: se2,
        apss_raw_mean: apss_raw,
        apss_dedup_mean: apss_dedup,
        acc_mean: acc,
        stage1_exact,
        stage1_pass: s1 <= alpha + 2.0 * se1,
        stage2_pass: s2 <= epsilon + 2.0 * se2,
        rows: reports,
    })
}

pub const MAX_ENUMERATION: usize = 12;

/// Exact coverage of the conformal quantile under exchangeability: each of the
/// `n+1` scores takes a turn as the test point, the other `n` calibrate, and
/// the fraction of turns where the test score is at most the quantile is
/// returned.
pub fn exact_coverage_small<S: PartialOrd + Clone, T: Scalar>(scores: &[S], risk: T) -> Result<Rational> {
    let size = scores.len();
    if size > MAX_ENUMERATION {
        return Err(Error::EnumerationTooLarge {
            size,
            max: MAX_ENUMERATION,
        });
    }
    if size < 2 {
        return Err(Error::InvalidArgument("need at least 2 scores to enumerate".into()));
    }
    let mut covered = 0;
    for test in 0..size {
        let cal: Vec<S> = scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != test)
            .map(|(_, s)| s.clone())
            .collect();
        let q = conformal_quantile(&cal, risk)?;
        if scores[test] <= q {
            covered += 1;
        }
    }
    Ok(Rational::new(covered, size as i64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::conformal_scores;
    use crate::domain::Score;
    use crate::oracle::exact_oracle;

    fn spec(p: ProbLaw, n: usize, m: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_questions: n,
            max_samples: m,
            correct_prob: p,
            distractor_count: 4,
            seed,
        }
    }

    #[test]
    fn certain_correct_scores_one() {
        let data = synth_generate(&spec(ProbLaw::Fixed(1.0), 50, 7, 1)).unwrap();
        let s = conformal_scores(&data, &exact_oracle()).unwrap();
        assert!(s.iter().all(|&r| r == Score::Finite(1)));
    }

    #[test]
    fn never_correct_scores_infinite() {
        let data = synth_generate(&spec(ProbLaw::Fixed(0.0), 50, 5, 1)).unwrap();
        let s = conformal_scores(&data, &exact_oracle()).unwrap();
        assert!(s.iter().all(Score::is_infinite));
    }

    #[test]
    fn geometric_mean_score() {
        // P(first hit at k) = 0.5^k, mean 2; truncation at 20 is negligible
        let data = synth_generate(&spec(ProbLaw::Fixed(0.5), 1000, 20, 7)).unwrap();
        let s = conformal_scores(&data, &exact_oracle()).unwrap();
        let finite: Vec<usize> = s.iter().filter_map(|r| r.finite()).collect();
        assert!(finite.len() >= 999);
        let mean = finite.iter().sum::<usize>() as f64 / finite.len() as f64;
        assert!((mean - 2.0).abs() <= 0.1, "mean {mean}");
    }

    #[test]
    fn generation_is_deterministic_and_checked() {
        let s = SyntheticSpec::default();
        assert_eq!(synth_generate(&s).unwrap(), synth_generate(&s).unwrap());
        assert!(synth_generate(&spec(ProbLaw::Fixed(0.5), 1, 5, 0)).is_err());
        assert!(synth_generate(&spec(ProbLaw::Fixed(0.5), 5, 0, 0)).is_err());
        assert!(synth_generate(&spec(ProbLaw::Fixed(1.5), 5, 5, 0)).is_err());
        let no_distractors = SyntheticSpec {
            distractor_count: 0,
            ..spec(ProbLaw::Fixed(0.5), 5, 5, 0)
        };
        assert!(matches!(synth_generate(&no_distractors), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn prob_law_parsing() {
        assert_eq!("fixed:1".parse::<ProbLaw>().unwrap(), ProbLaw::Fixed(1.0));
        assert_eq!(
            "uniform:0.3:0.9".parse::<ProbLaw>().unwrap(),
            ProbLaw::Uniform { lo: 0.3, hi: 0.9 }
        );
        let tp: ProbLaw = "two-point:0.2:0.9:0.25".parse().unwrap();
        assert_eq!(tp.to_string().parse::<ProbLaw>().unwrap(), tp);
        assert!("gauss:1".parse::<ProbLaw>().is_err());
        assert!("uniform:x:1".parse::<ProbLaw>().is_err());
    }

    #[test]
    fn trial_split_sizes_and_determinism() {
        let data = synth_generate(&SyntheticSpec::default()).unwrap();
        let budget = RiskBudget::new(0.1, 0.1).unwrap();
        let o = exact_oracle();
        let m = ReliabilityMeasure::Frequency;
        let a = run_trial(&data, budget, 0.5, 5, &o, &m).unwrap();
        assert_eq!(a.calibration.calibration_size, 100);
        assert_eq!(a.n_test, 100);
        assert_eq!(a, run_trial(&data, budget, 0.5, 5, &o, &m).unwrap());
        for (ratio, n_cal) in [(0.3, 60), (0.1, 20)] {
            let r = run_trial(&data, RiskBudget::new(0.2, 0.2).unwrap(), ratio, 5, &o, &m).unwrap();
            assert_eq!(r.calibration.calibration_size, n_cal);
        }
        let tiny = run_trial(&data, budget, 0.02, 5, &o, &m);
        assert!(matches!(tiny, Err(Error::InfeasibleRiskLevel { .. })));
    }

    #[test]
    fn degenerate_law_has_no_stage1_error() {
        let s = SyntheticSpec {
            correct_prob: ProbLaw::Fixed(1.0),
            ..SyntheticSpec::default()
        };
        let v = validate_guarantee(
            &s,
            RiskBudget::new(0.1, 0.1).unwrap(),
            0.5,
            5,
            &exact_oracle(),
            &ReliabilityMeasure::Frequency,
        )
        .unwrap();
        assert_eq!(v.stage1_mean, 0.0);
        assert!(v.pass());
        let again = validate_guarantee(
            &s,
            RiskBudget::new(0.1, 0.1).unwrap(),
            0.5,
            5,
            &exact_oracle(),
            &ReliabilityMeasure::Frequency,
        )
        .unwrap();
        assert_eq!(v.to_string(), again.to_string());
    }

    #[test]
    fn coverage_enumeration_examples() {
        let distinct: Vec<u32> = (0..10).collect();
        assert_eq!(
            exact_coverage_small(&distinct, Rational::new(1, 10)).unwrap(),
            Rational::new(9, 10)
        );
        let five = [3.0, 1.0, 4.0, 1.5, 9.0];
        assert_eq!(exact_coverage_small(&five, 0.5).unwrap(), Rational::new(3, 5));
        assert_eq!(exact_coverage_small(&[2; 8], 0.3).unwrap(), Rational::from_integer(1));
        assert!(matches!(
            exact_coverage_small(&[0; 13], 0.5),
            Err(Error::EnumerationTooLarge { size: 13, .. })
        ));
        assert!(matches!(
            exact_coverage_small(&[1, 2, 3], 0.1),
            Err(Error::InfeasibleRiskLevel { .. })
        ));
    }
}

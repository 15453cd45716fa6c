//! Semantic-equivalence judges.
//!
//! Two responses are equivalent when each entails the other in the context of
//! the question. Implementations only have to provide directional
//! [`EquivalenceOracle::entails`]; the bidirectional rule is the default
//! [`EquivalenceOracle::equivalent`].

mod remote;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub use remote::{remote_oracle, RemoteConfig, RemoteOracle};

use crate::error::OracleError;

pub type OracleResult<T> = Result<T, OracleError>;

pub trait EquivalenceOracle: Send + Sync {
    fn name(&self) -> &str;

    /// Whether `premise` entails `hypothesis` given `question`.
    fn entails(&self, question: &str, premise: &str, hypothesis: &str) -> OracleResult<bool>;

    fn equivalent(&self, question: &str, a: &str, b: &str) -> OracleResult<bool> {
        Ok(self.entails(question, a, b)? && self.entails(question, b, a)?)
    }

    /// Whether judgments are expensive enough to cache per record.
    fn is_costly(&self) -> bool {
        false
    }
}

impl<O: EquivalenceOracle + ?Sized> EquivalenceOracle for Arc<O> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn entails(&self, question: &str, premise: &str, hypothesis: &str) -> OracleResult<bool> {
        (**self).entails(question, premise, hypothesis)
    }

    fn equivalent(&self, question: &str, a: &str, b: &str) -> OracleResult<bool> {
        (**self).equivalent(question, a, b)
    }

    fn is_costly(&self) -> bool {
        (**self).is_costly()
    }
}

/// Byte-identical responses only.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactOracle;

pub fn exact_oracle() -> ExactOracle {
    ExactOracle
}

impl EquivalenceOracle for ExactOracle {
    fn name(&self) -> &str {
        "exact"
    }

    fn entails(&self, _question: &str, premise: &str, hypothesis: &str) -> OracleResult<bool> {
        Ok(premise == hypothesis)
    }
}

/// Equality after lowercasing, trimming, collapsing whitespace and dropping
/// terminal punctuation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedOracle;

pub fn normalized_oracle() -> NormalizedOracle {
    NormalizedOracle
}

pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

impl EquivalenceOracle for NormalizedOracle {
    fn name(&self) -> &str {
        "normalized"
    }

    fn entails(&self, _question: &str, premise: &str, hypothesis: &str) -> OracleResult<bool> {
        Ok(normalize(premise) == normalize(hypothesis))
    }
}

/// Wraps another judge and flips its verdict on distinct pairs with
/// probability `flip_prob`. Flips are a deterministic function of the seed and
/// the unordered pair, so the result stays symmetric and repeatable but is
/// generally not transitive.
pub struct NoisyOracle<O> {
    inner: O,
    flip_prob: f64,
    seed: u64,
    name: String,
}

impl<O: EquivalenceOracle> NoisyOracle<O> {
    pub fn new(inner: O, flip_prob: f64, seed: u64) -> Self {
        let name = format!("noisy({},{flip_prob})", inner.name());
        Self {
            inner,
            flip_prob,
            seed,
            name,
        }
    }

    fn flipped(&self, question: &str, a: &str, b: &str) -> bool {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut h = DefaultHasher::new();
        (self.seed, question, lo, hi).hash(&mut h);
        let u = (h.finish() >> 11) as f64 / (1u64 << 53) as f64;
        u < self.flip_prob
    }
}

impl<O: EquivalenceOracle> EquivalenceOracle for NoisyOracle<O> {
    fn name(&self) -> &str {
        &self.name
    }

    fn entails(&self, question: &str, premise: &str, hypothesis: &str) -> OracleResult<bool> {
        if premise == hypothesis {
            return Ok(true);
        }
        let base = self.inner.entails(question, premise, hypothesis)?;
        Ok(base ^ self.flipped(question, premise, hypothesis))
    }
}

/// Caches judgments for the lifetime of the wrapper. Scope one instance to a
/// single record so concurrent workers never share a cache.
pub struct MemoOracle<'a> {
    inner: &'a dyn EquivalenceOracle,
    equivalent: Mutex<HashMap<(String, String, String), bool>>,
    entails: Mutex<HashMap<(String, String, String), bool>>,
    misses: AtomicUsize,
}

impl<'a> MemoOracle<'a> {
    pub fn new(inner: &'a dyn EquivalenceOracle) -> Self {
        Self {
            inner,
            equivalent: Mutex::new(HashMap::new()),
            entails: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
        }
    }

    /// Number of judgments forwarded to the wrapped oracle.
    pub fn inner_calls(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

impl EquivalenceOracle for MemoOracle<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn entails(&self, question: &str, premise: &str, hypothesis: &str) -> OracleResult<bool> {
        let key = (question.to_owned(), premise.to_owned(), hypothesis.to_owned());
        if let Some(&v) = self.entails.lock().unwrap().get(&key) {
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.entails(question, premise, hypothesis)?;
        self.entails.lock().unwrap().insert(key, v);
        Ok(v)
    }

    fn equivalent(&self, question: &str, a: &str, b: &str) -> OracleResult<bool> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let key = (question.to_owned(), lo.to_owned(), hi.to_owned());
        if let Some(&v) = self.equivalent.lock().unwrap().get(&key) {
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.equivalent(question, a, b)?;
        self.equivalent.lock().unwrap().insert(key, v);
        Ok(v)
    }
}

/// Graded similarity between two responses, in `[0, 1]`, symmetric, and 1 on
/// identical inputs.
pub trait SimilarityFunction: Send + Sync {
    fn name(&self) -> &str;

    fn similarity(&self, question: &str, a: &str, b: &str) -> OracleResult<f64>;
}

/// 1 for equivalent responses, 0 otherwise.
pub struct IndicatorSimilarity {
    oracle: Arc<dyn EquivalenceOracle>,
}

pub fn indicator_similarity(oracle: Arc<dyn EquivalenceOracle>) -> IndicatorSimilarity {
    IndicatorSimilarity { oracle }
}

impl SimilarityFunction for IndicatorSimilarity {
    fn name(&self) -> &str {
        "indicator"
    }

    fn similarity(&self, question: &str, a: &str, b: &str) -> OracleResult<f64> {
        if a == b {
            return Ok(1.0);
        }
        Ok(if self.oracle.equivalent(question, a, b)? {
            1.0
        } else {
            0.0
        })
    }
}

/// Jaccard overlap of the normalized word sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardSimilarity;

impl SimilarityFunction for JaccardSimilarity {
    fn name(&self) -> &str {
        "jaccard"
    }

    fn similarity(&self, _question: &str, a: &str, b: &str) -> OracleResult<f64> {
        if a == b {
            return Ok(1.0);
        }
        let (na, nb) = (normalize(a), normalize(b));
        let wa: std::collections::BTreeSet<&str> = na.split(' ').filter(|w| !w.is_empty()).collect();
        let wb: std::collections::BTreeSet<&str> = nb.split(' ').filter(|w| !w.is_empty()).collect();
        let union = wa.union(&wb).count();
        if union == 0 {
            return Ok(1.0);
        }
        Ok(wa.intersection(&wb).count() as f64 / union as f64)
    }
}

/// `value` for every pair of distinct strings, 1 for identical ones.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSimilarity(pub f64);

impl SimilarityFunction for ConstantSimilarity {
    fn name(&self) -> &str {
        "constant"
    }

    fn similarity(&self, _question: &str, a: &str, b: &str) -> OracleResult<f64> {
        Ok(if a == b { 1.0 } else { self.0 })
    }
}

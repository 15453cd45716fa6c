//! Semantic clustering of a candidate set, self-consistency frequencies,
//! semantic diversity, and deduplication.
//!
//! Every sample gets its own equivalence list: the sample itself followed by
//! every other sample in the prefix that the oracle judges equivalent to it,
//! in index order. Lists are not merged, so a non-transitive oracle can yield
//! overlapping lists. The frequency of sample `m` is `|list_m| / M` where `M`
//! is the prefix length.

use std::collections::HashMap;

use crate::domain::QaRecord;
use crate::error::{Error, Result};
use crate::oracle::EquivalenceOracle;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment<T> {
    record_id: String,
    equivalents: Vec<Vec<usize>>,
    frequencies: Vec<T>,
}

impl<T: Scalar> ClusterAssignment<T> {
    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    /// Number of samples that were clustered.
    pub fn prefix_len(&self) -> usize {
        self.equivalents.len()
    }

    /// Zero-based indices equivalent to `m`, starting with `m` itself.
    pub fn equivalents(&self, m: usize) -> Result<&[usize]> {
        self.equivalents
            .get(m)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                index: m,
                len: self.prefix_len(),
            })
    }

    pub fn count(&self, m: usize) -> Result<usize> {
        self.equivalents(m).map(<[usize]>::len)
    }

    pub fn frequencies(&self) -> &[T] {
        &self.frequencies
    }

    /// Distinct equivalence lists as sorted index sets, in order of first
    /// appearance. Under a transitive oracle these are the partition classes.
    pub fn classes(&self) -> Vec<Vec<usize>> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for list in &self.equivalents {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            if seen.insert(sorted.clone()) {
                out.push(sorted);
            }
        }
        out
    }
}

/// Pairwise equivalence over a record prefix, judging each unordered pair of
/// distinct texts once.
pub(crate) struct PairTable {
    text_ids: Vec<usize>,
    judged: HashMap<(usize, usize), bool>,
}

impl PairTable {
    pub(crate) fn build(question: &str, samples: &[String], oracle: &dyn EquivalenceOracle) -> Result<Self> {
        let mut interned: HashMap<&str, usize> = HashMap::new();
        let mut uniques: Vec<&str> = Vec::new();
        let text_ids = samples
            .iter()
            .map(|s| {
                *interned.entry(s.as_str()).or_insert_with(|| {
                    uniques.push(s.as_str());
                    uniques.len() - 1
                })
            })
            .collect();
        let mut judged = HashMap::new();
        for i in 0..uniques.len() {
            for j in i..uniques.len() {
                let eq = oracle.equivalent(question, uniques[j], uniques[i])?;
                judged.insert((i, j), eq);
            }
        }
        Ok(Self { text_ids, judged })
    }

    pub(crate) fn equivalent(&self, a: usize, b: usize) -> bool {
        let (x, y) = (self.text_ids[a], self.text_ids[b]);
        self.judged[&(x.min(y), x.max(y))]
    }
}

fn checked_prefix(record: &QaRecord, prefix_len: Option<usize>) -> Result<usize> {
    let len = record.samples().len();
    let m = prefix_len.unwrap_or(len);
    if m == 0 {
        return Err(Error::EmptySamples {
            id: record.id().to_owned(),
        });
    }
    if m > len {
        return Err(Error::InsufficientSamples {
            id: record.id().to_owned(),
            needed: m,
            got: len,
        });
    }
    Ok(m)
}

/// Clusters the first `prefix_len` samples (all samples when `None`).
pub fn cluster<T: Scalar>(
    record: &QaRecord,
    oracle: &dyn EquivalenceOracle,
    prefix_len: Option<usize>,
) -> Result<ClusterAssignment<T>> {
    let m_total = checked_prefix(record, prefix_len)?;
    let samples = &record.samples()[..m_total];
    let table = PairTable::build(record.question(), samples, oracle)?;

    let mut equivalents = Vec::with_capacity(m_total);
    for m in 0..m_total {
        let mut list = vec![m];
        list.extend((0..m_total).filter(|&other| other != m && table.equivalent(other, m)));
        equivalents.push(list);
    }
    let frequencies = equivalents.iter().map(|list| T::ratio(list.len(), m_total)).collect();
    Ok(ClusterAssignment {
        record_id: record.id().to_owned(),
        equivalents,
        frequencies,
    })
}

/// Normalized frequency `f_m / M` of sample `m`.
pub fn frequency<T: Scalar>(assignment: &ClusterAssignment<T>, m: usize) -> Result<T> {
    assignment.frequencies.get(m).copied().ok_or(Error::IndexOutOfRange {
        index: m,
        len: assignment.prefix_len(),
    })
}

/// Similarity-weighted frequency mass of the responses not equivalent to `m`.
pub fn semantic_diversity<T: Scalar>(
    assignment: &ClusterAssignment<T>,
    record: &QaRecord,
    sim: &dyn crate::oracle::SimilarityFunction,
    m: usize,
) -> Result<T> {
    let own = assignment.equivalents(m)?;
    let samples = record.samples();
    let mut total = T::zero();
    for j in 0..assignment.prefix_len() {
        if own.contains(&j) {
            continue;
        }
        let s = sim.similarity(record.question(), &samples[j], &samples[m])?;
        total = total + T::from_real(s) * assignment.frequencies[j];
    }
    Ok(total)
}

/// Greedy left-to-right deduplication: a member survives iff it is not
/// equivalent to any survivor before it. Input order is preserved.
pub fn dedup(members: &[usize], record: &QaRecord, oracle: &dyn EquivalenceOracle) -> Result<Vec<usize>> {
    let samples = record.samples();
    let mut kept: Vec<usize> = Vec::new();
    for &m in members {
        let text = samples.get(m).ok_or(Error::IndexOutOfRange {
            index: m,
            len: samples.len(),
        })?;
        let mut duplicate = false;
        for &k in &kept {
            if oracle.equivalent(record.question(), text, &samples[k])? {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            kept.push(m);
        }
    }
    Ok(kept)
}

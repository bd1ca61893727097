//! Ranking metrics: confusion-based scores, accuracy@k and intra-list diversity.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::FeatureMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("universe of {universe} items cannot hold the given sets")]
    UniverseTooSmall { universe: usize },
    #[error("empty evaluation universe")]
    EmptyUniverse,
    #[error("ranked list has {have} entries, need {need}")]
    ListTooShort { need: usize, have: usize },
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("similarity of zero vectors is undefined")]
    ZeroVectors,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Top-k items against relevant items over a catalog of `universe` items (indices `0..universe`).
pub fn confusion_counts(topk: &BTreeSet<usize>, relevant: &BTreeSet<usize>, universe: usize) -> Result<ConfusionCounts, MetricsError> {
    if topk.iter().chain(relevant).any(|&i| i >= universe) {
        return Err(MetricsError::UniverseTooSmall { universe });
    }
    let tp = topk.intersection(relevant).count() as u64;
    let fp = topk.len() as u64 - tp;
    let fn_ = relevant.len() as u64 - tp;
    Ok(ConfusionCounts { tp, fp, fn_, tn: universe as u64 - tp - fp - fn_ })
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    match c.total() {
        0 => Err(MetricsError::EmptyUniverse),
        t => Ok((c.tp + c.tn) as f64 / t as f64),
    }
}

/// 0 when there are no relevant items.
pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// 0 when nothing was predicted.
pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let (p, r) = (precision(c), recall(c));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores at one cut-off together with flags for the zero-denominator conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

pub fn confusion_scores(c: &ConfusionCounts) -> Result<ConfusionScores, MetricsError> {
    Ok(ConfusionScores {
        accuracy: accuracy(c)?,
        precision: precision(c),
        recall: recall(c),
        f1: f1(c),
        precision_undefined: c.tp + c.fp == 0,
        recall_undefined: c.tp + c.fn_ == 0,
    })
}

/// Items ordered by descending score, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    /// Ranks all items of `scores` not in `exclude` and keeps the first `k`.
    pub fn from_scores(scores: &[f64], exclude: &BTreeSet<usize>, k: usize) -> RankedList {
        let mut entries: Vec<(usize, f64)> = scores.iter().copied().enumerate().filter(|(i, _)| !exclude.contains(i)).collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < entries.len() {
            entries.select_nth_unstable_by(k, cmp);
            entries.truncate(k);
        }
        entries.sort_by(cmp);
        RankedList { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn items(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// Checks ordering and uniqueness.
    pub fn is_valid(&self) -> bool {
        let ordered = self.entries.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        let unique = self.entries.iter().map(|e| e.0).collect::<BTreeSet<_>>().len() == self.entries.len();
        ordered && unique
    }

    fn check(&self, k: usize) -> Result<(), MetricsError> {
        if k == 0 || self.entries.len() < k {
            Err(MetricsError::ListTooShort { need: k.max(1), have: self.entries.len() })
        } else {
            Ok(())
        }
    }
}

/// Fraction of the first `k` entries that are relevant.
pub fn accuracy_at_k(ranked: &RankedList, relevant: &BTreeSet<usize>, k: usize) -> Result<f64, MetricsError> {
    ranked.check(k)?;
    let hits = ranked.entries[..k].iter().filter(|(i, _)| relevant.contains(i)).count();
    Ok(hits as f64 / k as f64)
}

/// Row lookup for item embeddings.
pub trait Embeddings {
    fn embedding(&self, item: usize) -> &[f64];
}

impl Embeddings for FeatureMatrix {
    fn embedding(&self, item: usize) -> &[f64] {
        self.row(item)
    }
}

impl Embeddings for [Vec<f64>] {
    fn embedding(&self, item: usize) -> &[f64] {
        &self[item]
    }
}

impl Embeddings for Vec<Vec<f64>> {
    fn embedding(&self, item: usize) -> &[f64] {
        &self[item]
    }
}

/// Shifted cosine `(1 + cos) / 2`; errors on zero vectors.
pub fn item_similarity_checked(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(MetricsError::ZeroVectors);
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na2 * nb2).sqrt()).clamp(-1.0, 1.0);
    Ok((1.0 + cos) / 2.0)
}

/// As [`item_similarity_checked`] but zero vectors give 0.5.
pub fn item_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    match item_similarity_checked(a, b) {
        Err(MetricsError::ZeroVectors) => Ok(0.5),
        other => other,
    }
}

/// One minus the mean pairwise similarity of the first `k` items; 0 for `k = 1`.
pub fn ild_at_k<E: Embeddings + ?Sized>(ranked: &RankedList, k: usize, embeddings: &E) -> Result<f64, MetricsError> {
    ranked.check(k)?;
    Ok(ild_curve(ranked, k, embeddings)?[k - 1])
}

/// ILD@1..=k_max in one pass over the pairwise similarities of the top `k_max`.
pub fn ild_curve<E: Embeddings + ?Sized>(ranked: &RankedList, k_max: usize, embeddings: &E) -> Result<Vec<f64>, MetricsError> {
    ranked.check(k_max)?;
    let items: Vec<&[f64]> = ranked.entries[..k_max].iter().map(|&(i, _)| embeddings.embedding(i)).collect();
    let mut out = Vec::with_capacity(k_max);
    let mut pair_sum = 0.0;
    for k in 1..=k_max {
        for j in 0..k - 1 {
            pair_sum += item_similarity(items[k - 1], items[j])?;
        }
        out.push(if k == 1 { 0.0 } else { (1.0 - 2.0 * pair_sum / (k * (k - 1)) as f64).clamp(0.0, 1.0) });
    }
    Ok(out)
}

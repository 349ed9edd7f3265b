//! Ranking metrics over multi-label predictions: Precision@k, Recall@k,
//! and F1@k. Aggregation is per-example-then-mean for P and R; F1 is the
//! harmonic mean of the aggregated P and R.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("k = {k} out of range for {l} labels")]
    KOutOfRange { k: usize, l: usize },
    #[error("example {0} has an empty true-label set")]
    EmptyTrueSet(usize),
}

/// One example's label scores and ground-truth label indices.
#[derive(Debug, Clone)]
pub struct RankedPrediction {
    pub scores: Vec<f64>,
    pub true_set: BTreeSet<usize>,
}

impl RankedPrediction {
    pub fn new(scores: Vec<f64>, true_set: BTreeSet<usize>) -> Self {
        RankedPrediction { scores, true_set }
    }
}

/// Indices of the k highest scores, ties broken by ascending label index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn validate(preds: &[RankedPrediction], k: usize) -> Result<(), MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    for (i, p) in preds.iter().enumerate() {
        if p.true_set.is_empty() {
            return Err(MetricsError::EmptyTrueSet(i));
        }
        if k < 1 || k > p.scores.len() {
            return Err(MetricsError::KOutOfRange {
                k,
                l: p.scores.len(),
            });
        }
    }
    Ok(())
}

fn hits_at_k(pred: &RankedPrediction, k: usize) -> usize {
    top_k(&pred.scores, k)
        .iter()
        .filter(|i| pred.true_set.contains(i))
        .count()
}

/// Mean over examples of |top-k ∩ true| / k.
pub fn precision_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64, MetricsError> {
    validate(preds, k)?;
    let total: f64 = preds
        .iter()
        .map(|p| hits_at_k(p, k) as f64 / k as f64)
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean over examples of |top-k ∩ true| / |true|.
pub fn recall_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64, MetricsError> {
    validate(preds, k)?;
    let total: f64 = preds
        .iter()
        .map(|p| hits_at_k(p, k) as f64 / p.true_set.len() as f64)
        .sum();
    Ok(total / preds.len() as f64)
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision/Recall/F1 at each requested k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

impl MetricReport {
    pub fn compute(preds: &[RankedPrediction], ks: &[usize]) -> Result<Self, MetricsError> {
        let mut report = MetricReport {
            ks: ks.to_vec(),
            precision: Vec::new(),
            recall: Vec::new(),
            f1: Vec::new(),
        };
        for &k in ks {
            let p = precision_at_k(preds, k)?;
            let r = recall_at_k(preds, k)?;
            report.precision.push(p);
            report.recall.push(r);
            report.f1.push(f1(p, r));
        }
        Ok(report)
    }

    /// The standard report at k = 1, 2, 3.
    pub fn standard(preds: &[RankedPrediction]) -> Result<Self, MetricsError> {
        Self::compute(preds, &[1, 2, 3])
    }

    pub fn at(&self, k: usize) -> Option<(f64, f64, f64)> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some((self.precision[i], self.recall[i], self.f1[i]))
    }
}

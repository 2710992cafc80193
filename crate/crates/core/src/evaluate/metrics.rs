// SPDX-License-Identifier: Apache-2.0

//! Binary classification and ranking metrics. `Anomalous` is the positive
//! class.

use crate::ingest::Label;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no examples to evaluate")]
    Empty,
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("ranking metrics need both classes in the ground truth")]
    SingleClass,
    #[error("k = {k} out of range 1..={n}")]
    Bounds { k: usize, n: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(preds: &[Label], truth: &[Label]) -> Confusion {
        let mut c = Confusion::default();
        for (p, t) in preds.iter().zip(truth) {
            match (p.is_anomalous(), t.is_anomalous()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
    /// No positive predictions; precision is reported as 0.
    pub degenerate_precision: bool,
    /// No positive ground truth; recall is reported as 0.
    pub degenerate_recall: bool,
}

impl ClassificationMetrics {
    pub fn from_confusion(c: Confusion) -> ClassificationMetrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassificationMetrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1,
            counts: c,
            degenerate_precision: c.tp + c.fp == 0,
            degenerate_recall: c.tp + c.fn_ == 0,
        }
    }
}

pub fn classification_metrics(preds: &[Label], truth: &[Label]) -> Result<ClassificationMetrics, MetricError> {
    if preds.len() != truth.len() {
        return Err(MetricError::LengthMismatch(preds.len(), truth.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(ClassificationMetrics::from_confusion(Confusion::from_labels(
        preds, truth,
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub roc_auc: f64,
    pub average_precision: f64,
    pub precision_at_k: f64,
    pub k: usize,
}

fn check_scores(scores: &[f64], truth: &[Label]) -> Result<(), MetricError> {
    if scores.len() != truth.len() {
        return Err(MetricError::LengthMismatch(scores.len(), truth.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(*s));
    }
    Ok(())
}

fn positives(truth: &[Label]) -> usize {
    truth.iter().filter(|l| l.is_anomalous()).count()
}

/// Indices sorted by descending score, then grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random anomalous item outscores a random normal one,
/// ties counting one half. Computed from mid-ranks.
pub fn roc_auc(scores: &[f64], truth: &[Label]) -> Result<f64, MetricError> {
    check_scores(scores, truth)?;
    let p = positives(truth);
    let n = truth.len() - p;
    if p == 0 || n == 0 {
        return Err(MetricError::SingleClass);
    }
    // Ascending ranks: the lowest score gets rank 1.
    let groups = tie_groups(scores);
    let mut rank_sum = 0.0;
    let mut above = scores.len();
    for g in &groups {
        let lo = above - g.len() + 1;
        let mid = (lo + above) as f64 / 2.0;
        rank_sum += mid * g.iter().filter(|&&i| truth[i].is_anomalous()).count() as f64;
        above -= g.len();
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Step-wise area under the precision-recall curve, one step per distinct
/// score threshold.
pub fn average_precision(scores: &[f64], truth: &[Label]) -> Result<f64, MetricError> {
    check_scores(scores, truth)?;
    let p = positives(truth);
    if p == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| truth[i].is_anomalous()).count();
        seen += g.len();
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of anomalies among the `k` highest scores. Ties straddling the
/// cut contribute their expected share under uniform tie-breaking.
pub fn precision_at_k(scores: &[f64], truth: &[Label], k: usize) -> Result<f64, MetricError> {
    check_scores(scores, truth)?;
    if k == 0 || k > scores.len() {
        return Err(MetricError::Bounds { k, n: scores.len() });
    }
    let mut taken = 0usize;
    let mut hits = 0.0;
    for g in tie_groups(scores) {
        let pos = g.iter().filter(|&&i| truth[i].is_anomalous()).count();
        let room = k - taken;
        if g.len() <= room {
            hits += pos as f64;
            taken += g.len();
        } else {
            hits += room as f64 * pos as f64 / g.len() as f64;
            taken = k;
        }
        if taken == k {
            break;
        }
    }
    Ok(hits / k as f64)
}

/// AUC, AP and precision@k. `k` defaults to the number of true anomalies.
pub fn ranking_metrics(scores: &[f64], truth: &[Label], k: Option<usize>) -> Result<RankingMetrics, MetricError> {
    check_scores(scores, truth)?;
    let k = k.unwrap_or_else(|| positives(truth));
    Ok(RankingMetrics {
        roc_auc: roc_auc(scores, truth)?,
        average_precision: average_precision(scores, truth)?,
        precision_at_k: precision_at_k(scores, truth, k)?,
        k,
    })
}

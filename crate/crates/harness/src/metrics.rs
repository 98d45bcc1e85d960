//! Accuracy, macro-F1 and one-vs-rest ROC AUC from class probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Absent when fewer than two classes occur in the labels.
    pub auc: Option<f64>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `scores[i]` holds the `K` class scores of sample `i`.
pub fn metrics(scores: &[Vec<f64>], labels: &[usize]) -> Result<Metrics> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(HarnessError::Metrics(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores[0].len();
    if k < 2 || scores.iter().any(|r| r.len() != k) || labels.iter().any(|&l| l >= k) {
        return Err(HarnessError::Metrics("ragged scores or label out of range".into()));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(HarnessError::Metrics("non-finite score".into()));
    }
    let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    Ok(Metrics {
        accuracy: accuracy(&preds, labels),
        macro_f1: macro_f1(&preds, labels, k),
        auc: ovr_auc(scores, labels, k),
    })
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1 over the classes that occur in the
/// labels or the predictions.
pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let f1: Vec<f64> = (0..k)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    f1.iter().sum::<f64>() / f1.len() as f64
}

/// Area under the ROC curve of `scores` for the positive mask, by the
/// trapezoidal rule over thresholds at each distinct score.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / p as f64, fp as f64 / n as f64);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        (prev_tpr, prev_fpr) = (tpr, fpr);
    }
    Some(area)
}

/// Macro average of the one-vs-rest AUCs of the classes that occur in the
/// labels; absent when fewer than two do.
pub fn ovr_auc(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Option<f64> {
    let aucs: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&s, &pos)
        })
        .collect();
    if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    }
}

/// Component-wise mean; the AUC mean covers only the entries that have one.
pub fn mean(items: &[Metrics]) -> Metrics {
    let n = items.len().max(1) as f64;
    let aucs: Vec<f64> = items.iter().filter_map(|m| m.auc).collect();
    Metrics {
        accuracy: items.iter().map(|m| m.accuracy).sum::<f64>() / n,
        macro_f1: items.iter().map(|m| m.macro_f1).sum::<f64>() / n,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    }
}

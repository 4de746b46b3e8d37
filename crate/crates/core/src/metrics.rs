//! Binary classification metrics with pMCI as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold applied to the pMCI probability to obtain a hard label.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn check_labels(labels: &[u8], what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::InvalidArgument(format!("{what} must be 0 or 1, found {l}"))),
        None => Ok(()),
    }
}

pub fn confusion_metrics(pred: &[u8], truth: &[u8]) -> Result<ConfusionMetrics> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("confusion_metrics on empty input".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction/label length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    check_labels(pred, "predictions")?;
    check_labels(truth, "labels")?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fn_ += 1,
        }
    }
    let mut warnings = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &str| {
        if den == 0 {
            warnings.push(format!("{name} undefined (zero denominator), reported as 0"));
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let acc = ratio(tp + tn, tp + tn + fp + fn_, "acc");
    let sen = ratio(tp, tp + fn_, "sen");
    let spe = ratio(tn, tn + fp, "spe");
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_, "f1");
    Ok(ConfusionMetrics {
        acc,
        sen,
        spe,
        f1,
        tp,
        tn,
        fp,
        fn_,
        warnings,
    })
}

/// Hard labels from pMCI probabilities.
pub fn threshold(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= DECISION_THRESHOLD)).collect()
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from mid-ranks in
/// `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "score/label length mismatch: {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    check_labels(labels, "labels")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("auc scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "auc needs both classes present (positives: {n_pos}, negatives: {n_neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        let mid2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank2_pos += mid2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    // 2U = 2R − P(P+1)
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

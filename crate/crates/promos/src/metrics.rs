//! Ranking metrics for anomaly detection.

use crate::{Error, Result};

/// Area under the ROC curve via the rank-sum statistic with mid-ranks for
/// ties: the probability a random anomaly outscores a random normal node,
/// counting ties as half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;

    // mid-ranks over groups of exactly equal scores, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// Average precision over the descending-score sweep, with all tied scores
/// entering as one group.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;

    let mut ap = 0.0;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall_prev = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / n_pos;
        let precision = tp / (tp + fp);
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j + 1;
    }
    Ok(ap)
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Invalid("metrics need at least one node".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "metrics" });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Invalid(
            "metrics need both classes present in the labels".into(),
        ));
    }
    Ok(())
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-clip classification metrics at the zero threshold on logit scores.
/// `auroc` is `None` when only one class is present.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub auroc: Option<f64>,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 6] = ["accuracy", "precision", "recall", "macro_f1", "weighted_f1", "auroc"];

    /// Values in [`MetricsReport::NAMES`] order; a missing AUROC is NaN.
    pub fn values(&self) -> [f64; 6] {
        [self.accuracy, self.precision, self.recall, self.macro_f1, self.weighted_f1, self.auroc.unwrap_or(f64::NAN)]
    }
}

/// Decision rule shared by every scorer: a score of exactly zero is positive.
pub fn predict_positive(score: f64) -> bool {
    score >= 0.0
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Area under the ROC curve from the Mann-Whitney rank statistic with
/// average ranks on ties, so a tied positive/negative pair counts one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(format!("AUROC undefined: {pos} positive and {neg} negative labels")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("AUROC: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    Ok(())
}

/// Precision and recall refer to the positive class; F1 is averaged over
/// both classes, unweighted (macro) and by class support (weighted).
pub fn compute_metrics(scores: &[f64], labels: &[bool]) -> Result<MetricsReport> {
    check_lengths(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fne) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (predict_positive(s), l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fne += 1,
        }
    }
    let n = labels.len();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1_pos = f1(precision, recall);
    let f1_neg = f1(ratio(tn, tn + fne), ratio(tn, tn + fp));
    let (n_pos, n_neg) = (tp + fne, tn + fp);
    let auroc = match auroc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        accuracy: ratio(tp + tn, n),
        precision,
        recall,
        macro_f1: (f1_pos + f1_neg) / 2.0,
        weighted_f1: (f1_pos * n_pos as f64 + f1_neg * n_neg as f64) / n as f64,
        auroc,
    })
}

/// Elementwise mean of per-stream logits.
pub fn fuse_streams(per_stream: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_stream.first().ok_or_else(|| Error::Data("no streams to fuse".into()))?;
    if let Some(bad) = per_stream.iter().find(|s| s.len() != first.len()) {
        return Err(Error::Data(format!("stream lengths differ: {} vs {}", first.len(), bad.len())));
    }
    let k = per_stream.len() as f64;
    Ok((0..first.len()).map(|i| per_stream.iter().map(|s| s[i]).sum::<f64>() / k).collect())
}

//! Ranking and threshold metrics for binary scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    Ok(())
}

/// Area under the ROC curve from the Mann-Whitney statistic with midranks
/// for ties. Equals the fraction of positive/negative pairs ordered
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("auc needs both classes, got {pos} positive and {neg} negative")));
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
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Confusion-derived rates at one threshold; a score at or above the
/// threshold counts as positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub accuracy: f64,
    /// None when the split has no positives.
    pub sensitivity: Option<f64>,
    /// None when the split has no negatives.
    pub specificity: Option<f64>,
}

pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ThresholdMetrics> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Validation("cannot score an empty split".into()));
    }
    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(ThresholdMetrics {
        threshold,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        sensitivity: ratio(tp, fneg),
        specificity: ratio(tn, fp),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// None for a single-class split.
    pub auc: Option<f64>,
    #[serde(flatten)]
    pub at: ThresholdMetrics,
    pub sweep: Vec<ThresholdMetrics>,
}

/// Thresholds 0.05, 0.10, ..., 0.95.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    let auc = match auc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        auc,
        at: at_threshold(scores, labels, threshold)?,
        sweep: sweep_thresholds().into_iter().map(|t| at_threshold(scores, labels, t)).collect::<Result<_>>()?,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

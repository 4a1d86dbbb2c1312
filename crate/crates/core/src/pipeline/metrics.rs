use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this many samples `roc_auc` switches from pair counting to ranks.
pub const PAIRWISE_LIMIT: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Samples with score >= threshold are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roc {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Exact Mann-Whitney pair count: wins count 2, ties 1, over 2 * P * N.
fn auc_pairwise(scores: &[f64], labels: &[bool], pos: usize, neg: usize) -> f64 {
    let mut doubled = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            doubled += match si.partial_cmp(&sj).expect("finite scores") {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    doubled as f64 / (2 * pos * neg) as f64
}

/// Rank-sum form with midranks for ties, kept in doubled integer units.
fn auc_ranks(scores: &[f64], labels: &[bool], pos: usize, neg: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let doubled_mid = (i + j + 2) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_mid * tied_pos;
        i = j + 1;
    }
    let p = pos as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    doubled_u as f64 / (2 * pos * neg) as f64
}

/// ROC curve with one point per distinct threshold, starting at (0, 0).
fn roc_points(scores: &[f64], labels: &[bool], pos: usize, neg: usize) -> Vec<RocPoint> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points
}

/// Area under the ROC curve: P(score_pos > score_neg) + P(tie) / 2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    let (pos, neg) = class_counts(scores, labels)?;
    let auc = if scores.len() <= PAIRWISE_LIMIT {
        auc_pairwise(scores, labels, pos, neg)
    } else {
        auc_ranks(scores, labels, pos, neg)
    };
    Ok(Roc {
        auc,
        points: roc_points(scores, labels, pos, neg),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Positive class is true progression; a sample is called positive when its
/// score is at least `threshold`.
pub fn confusion_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMetrics> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok(ConfusionMetrics {
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        sensitivity: tp as f64 / pos as f64,
        specificity: tn as f64 / neg as f64,
    })
}

pub fn soft_vote(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::Contract("soft vote over zero models".into()));
    }
    Ok(probabilities.iter().sum::<f64>() / probabilities.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

//! Permutation feature importance and prefix-size feature selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cv::FoldPlan;
use super::metrics::roc_auc;
use super::model::{FittedModel, PreparedSample};
use super::seeds::sub_seed;
use crate::data::{ClinicalInput, FeatureMatrix};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature: String,
    pub mean_auc_drop: f64,
    pub rank: usize,
}

/// For every feature and fold, shuffles that feature within the fold's
/// validation split `repeats` times and records the AUC drop; entries are
/// ranked by mean drop, descending (ties keep feature order).
///
/// `auc(fold, None)` scores the untouched split; `auc(fold, Some((j, perm)))`
/// scores it with feature `j` of sample `i` taken from sample `perm[i]`.
pub fn permutation_importance<F>(
    features: &[String],
    validation_sizes: &[usize],
    repeats: usize,
    seed: u64,
    mut auc: F,
) -> Result<Vec<ImportanceEntry>>
where
    F: FnMut(usize, Option<(usize, &[usize])>) -> Result<f64>,
{
    if repeats == 0 || validation_sizes.is_empty() {
        return Err(Error::Config("importance needs at least one fold and one repeat".into()));
    }
    let mut drops = vec![0.0; features.len()];
    for (fold, &n) in validation_sizes.iter().enumerate() {
        let base = auc(fold, None)?;
        for (j, drop) in drops.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "permutation", (fold * features.len() + j) as u64));
            for _ in 0..repeats {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                *drop += base - auc(fold, Some((j, &perm)))?;
            }
        }
    }
    let denom = (validation_sizes.len() * repeats) as f64;
    let mut entries: Vec<ImportanceEntry> = features
        .iter()
        .zip(drops)
        .map(|(f, d)| ImportanceEntry {
            feature: f.clone(),
            mean_auc_drop: d / denom,
            rank: 0,
        })
        .collect();
    entries.sort_by(|a, b| b.mean_auc_drop.total_cmp(&a.mean_auc_drop));
    for (r, e) in entries.iter_mut().enumerate() {
        e.rank = r + 1;
    }
    Ok(entries)
}

fn permuted_inputs(inputs: &[ClinicalInput], permutation: Option<(usize, &[usize])>) -> Vec<ClinicalInput> {
    let mut out = inputs.to_vec();
    if let Some((j, perm)) = permutation {
        for (i, &src) in perm.iter().enumerate() {
            out[i].slots[j] = inputs[src].slots[j].clone();
        }
    }
    out
}

/// Permutation importance of the clinical slots of fitted fusion models,
/// each scored on its own validation split.
pub fn fusion_importance<T: Real>(
    models: &[FittedModel<T>],
    validation: &[Vec<PreparedSample<T>>],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ImportanceEntry>> {
    let features = models
        .first()
        .ok_or_else(|| Error::Contract("importance needs fitted models".into()))?
        .spec
        .features
        .clone();
    if models.len() != validation.len() || models.iter().any(|m| m.spec.features != features) {
        return Err(Error::Contract("models and validation splits do not line up".into()));
    }
    // Image tokens do not depend on the clinical permutation.
    let mut tokens: Vec<Vec<Tensor<T>>> = Vec::with_capacity(models.len());
    let mut inputs: Vec<Vec<ClinicalInput>> = Vec::with_capacity(models.len());
    let mut labels: Vec<Vec<bool>> = Vec::with_capacity(models.len());
    for (m, split) in models.iter().zip(validation) {
        tokens.push(split.iter().map(|s| m.image_tokens(s)).collect::<Result<_>>()?);
        inputs.push(
            split
                .iter()
                .map(|s| {
                    s.clinical
                        .clone()
                        .ok_or_else(|| Error::Contract(format!("subject {}: clinical modality missing", s.subject_id)))
                })
                .collect::<Result<_>>()?,
        );
        labels.push(
            split
                .iter()
                .map(|s| s.label.ok_or_else(|| Error::Contract(format!("subject {} has no label", s.subject_id))))
                .collect::<Result<_>>()?,
        );
    }
    let sizes: Vec<usize> = validation.iter().map(Vec::len).collect();
    permutation_importance(&features, &sizes, repeats, seed, |fold, perm| {
        let clinical = permuted_inputs(&inputs[fold], perm);
        let scores = tokens[fold]
            .iter()
            .zip(&clinical)
            .map(|(t, c)| models[fold].predict_with_tokens(t, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(roc_auc(&scores, &labels[fold])?.auc)
    })
}

/// L2-regularized logistic regression fitted by full-batch gradient descent;
/// the lightweight clinical-only model used for ranking and selection.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub const LOGISTIC_RIDGE: f64 = 1e-2;
const LOGISTIC_ITERS: usize = 300;
const LOGISTIC_LR: f64 = 0.5;

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[bool]) -> Self {
        let p = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let mut w = vec![0.0; p];
        let mut b = 0.0;
        for _ in 0..LOGISTIC_ITERS {
            let mut gw = vec![0.0; p];
            let mut gb = 0.0;
            for (row, &label) in x.iter().zip(y) {
                let z: f64 = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - if label { 1.0 } else { 0.0 };
                gb += err / n;
                for (g, a) in gw.iter_mut().zip(row) {
                    *g += err * a / n;
                }
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= LOGISTIC_LR * (g + LOGISTIC_RIDGE * *wi);
            }
            b -= LOGISTIC_LR * gb;
        }
        Self { weights: w, bias: b }
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        self.bias + row.iter().zip(&self.weights).map(|(a, c)| a * c).sum::<f64>()
    }
}

fn flatten(input: &ClinicalInput) -> Vec<f64> {
    input.slots.iter().flatten().copied().collect()
}

fn cv_logistic_auc(inputs: &[ClinicalInput], labels: &[bool], plan: &FoldPlan, fold: usize, perm: Option<(usize, &[usize])>) -> Result<f64> {
    let (train, val) = plan.split(fold);
    let x: Vec<Vec<f64>> = train.iter().map(|&i| flatten(&inputs[i])).collect();
    let y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
    let model = LogisticModel::fit(&x, &y);
    let val_inputs: Vec<ClinicalInput> = val.iter().map(|&i| inputs[i].clone()).collect();
    let val_inputs = permuted_inputs(&val_inputs, perm);
    let scores: Vec<f64> = val_inputs.iter().map(|c| model.score(&flatten(c))).collect();
    let val_labels: Vec<bool> = val.iter().map(|&i| labels[i]).collect();
    Ok(roc_auc(&scores, &val_labels)?.auc)
}

/// Permutation importance of every feature of `matrix` under cross-validated
/// logistic models.
pub fn logistic_importance(
    matrix: &FeatureMatrix,
    labels: &[bool],
    plan: &FoldPlan,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ImportanceEntry>> {
    let features = matrix.features();
    let inputs = matrix.clinical_inputs(&features)?;
    let sizes: Vec<usize> = (0..plan.k).map(|f| plan.split(f).1.len()).collect();
    permutation_importance(&features, &sizes, repeats, seed, |fold, perm| {
        cv_logistic_auc(&inputs, labels, plan, fold, perm)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub features: Vec<String>,
    /// Mean validation AUC for prefix sizes 1, 2, ...
    pub auc_by_size: Vec<f64>,
}

/// Keeps the prefix of `ranked` whose cross-validated logistic model has the
/// highest mean validation AUC; a larger prefix must strictly improve on a
/// smaller one to be chosen.
pub fn select_features(
    ranked: &[String],
    matrix: &FeatureMatrix,
    labels: &[bool],
    plan: &FoldPlan,
    max_features: usize,
) -> Result<Selection> {
    let sizes = ranked.len().min(max_features);
    if sizes == 0 {
        return Err(Error::Config("feature selection needs at least one candidate".into()));
    }
    let mut auc_by_size = Vec::with_capacity(sizes);
    for m in 1..=sizes {
        let inputs = matrix.clinical_inputs(&ranked[..m])?;
        let mut total = 0.0;
        for f in 0..plan.k {
            total += cv_logistic_auc(&inputs, labels, plan, f, None)?;
        }
        auc_by_size.push(total / plan.k as f64);
    }
    let mut best = 0;
    for (m, &a) in auc_by_size.iter().enumerate() {
        if a > auc_by_size[best] {
            best = m;
        }
    }
    Ok(Selection {
        features: ranked[..=best].to_vec(),
        auc_by_size,
    })
}

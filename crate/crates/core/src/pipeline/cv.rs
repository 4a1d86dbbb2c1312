use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-validation fold assignment, stratified by the binary label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub stratified_by: String,
    pub seed: u64,
}

impl FoldPlan {
    /// Indices of (training, validation) subjects for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, &a) in self.assignments.iter().enumerate() {
            if a == f {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }

    /// Per-fold count of subjects with `labels[i] == class`.
    pub fn class_counts(&self, labels: &[bool], class: bool) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for (&a, &l) in self.assignments.iter().zip(labels) {
            if l == class {
                counts[a] += 1;
            }
        }
        counts
    }
}

/// Shuffles each class with `seed` and deals it round-robin into `k` folds.
/// Negatives continue dealing where positives stopped so fold sizes stay
/// within one of each other.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Config(format!(
                "class {} has {} subjects, fewer than k = {k}",
                if class { "TP" } else { "PsP" },
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            assignments[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan {
        k,
        assignments,
        stratified_by: "label".into(),
        seed,
    })
}

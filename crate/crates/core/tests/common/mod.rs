#![allow(dead_code)]

use glioprog::data::{
    encode_clinical, synth_generate, ClinicalStats, Dataset, FeatureColumn, FeatureMatrix, SynthConfig,
};
use glioprog::encoders::PatchConfig;
use glioprog::params::{BindAs, Bound, ParamStore};
use glioprog::pipeline::{FoldPreprocessing, PreparedSample};
use glioprog::tensor::{relative_error, Tape, Var};
use glioprog::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative error between tape gradients and central differences
/// over every coordinate of every tensor in `store`.
pub fn param_gradcheck(
    store: &ParamStore<f64>,
    eps: f64,
    loss: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| BindAs::Trainable);
    let out = loss(&mut tape, &bound).unwrap();
    let grads = bound.gradients(&tape.backward(out).unwrap());
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, |_| BindAs::Frozen);
        let out = loss(&mut tape, &bound).unwrap();
        tape.value(out).item()
    };
    let mut worst = 0.0f64;
    for (name, tensor) in store.iter() {
        let g = &grads[name];
        for i in 0..tensor.len() {
            let mut plus = store.clone();
            let mut minus = store.clone();
            let base = tensor.data()[i];
            let mut t = tensor.clone();
            t.data_mut()[i] = base + eps;
            plus.insert(name, t.clone());
            t.data_mut()[i] = base - eps;
            minus.insert(name, t);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let err = relative_error(g.data()[i], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

pub fn small_patch(extent: usize, patch: usize, dim: usize, depth: usize) -> PatchConfig {
    PatchConfig {
        channels: 2,
        extents: [extent; 3],
        patch,
        dim,
        depth,
        mlp_ratio: 2,
    }
}

pub fn cohort(subjects: usize, tp: usize, extent: usize, signal: f64, seed: u64) -> Dataset {
    synth_generate(
        &SynthConfig {
            subjects,
            true_progression: tp,
            extents: [extent; 3],
            signal,
            folds: 2,
            labeled: true,
        },
        seed,
    )
    .unwrap()
}

/// Fold statistics fitted on `train` keeping every encoded column.
pub fn preprocessing(train: &Dataset, patch: &PatchConfig, features: &[&str]) -> FoldPreprocessing {
    let stats = ClinicalStats::fit(&train.records).unwrap();
    let columns = encode_clinical(&train.records, &stats).column_names();
    let features: Vec<String> = features.iter().map(|s| s.to_string()).collect();
    FoldPreprocessing::fit(train, patch.extents, &columns, &features).unwrap()
}

pub fn prepared(data: &Dataset, patch: &PatchConfig, features: &[&str]) -> (FoldPreprocessing, Vec<PreparedSample<f64>>) {
    let prep = preprocessing(data, patch, features);
    let samples = prep.prepare(data, patch).unwrap();
    (prep, samples)
}

pub fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// A one-column-per-feature matrix; column `j` of row `i` is `columns[j][i]`.
pub fn matrix(features: &[&str], columns: &[Vec<f64>]) -> FeatureMatrix {
    let n = columns[0].len();
    FeatureMatrix {
        columns: features
            .iter()
            .map(|f| FeatureColumn {
                name: f.to_string(),
                feature: f.to_string(),
            })
            .collect(),
        rows: (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect(),
        subject_ids: (0..n).map(|i| format!("S{i:04}")).collect(),
        provenance: "test".into(),
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

//! Feature ranking and prefix selection on constructed clinical tables.

mod common;

use common::{gaussian, matrix, names, rng};
use glioprog::pipeline::{logistic_importance, select_features, stratified_kfold};

/// Labels from a noisy linear score over the first `informative` columns;
/// the remaining columns are pure noise.
fn table(n: usize, informative: usize, noise: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    noisy_table(n, informative, noise, 0.3, seed)
}

fn noisy_table(n: usize, informative: usize, noise: usize, label_noise: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut r = rng(seed);
    let cols: Vec<Vec<f64>> = (0..informative + noise).map(|_| (0..n).map(|_| gaussian(&mut r)).collect()).collect();
    let labels = (0..n)
        .map(|i| (0..informative).map(|j| cols[j][i]).sum::<f64>() + label_noise * gaussian(&mut r) > 0.0)
        .collect();
    (cols, labels)
}

fn feature_names(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("f{j}")).collect()
}

#[test]
fn signal_in_the_top_four_selects_four() {
    let (cols, labels) = table(240, 4, 4, 1);
    let f = feature_names(8);
    let m = matrix(&f.iter().map(String::as_str).collect::<Vec<_>>(), &cols);
    let plan = stratified_kfold(&labels, 5, 3).unwrap();
    let sel = select_features(&f, &m, &labels, &plan, 8).unwrap();
    assert_eq!(sel.features, f[..4].to_vec(), "auc by size {:?}", sel.auc_by_size);
    assert_eq!(sel.auc_by_size.len(), 8);
}

#[test]
fn single_informative_feature_selects_one() {
    // The lone feature separates the classes, so no prefix can beat AUC 1.
    let (cols, labels) = noisy_table(200, 1, 5, 0.0, 2);
    let f = feature_names(6);
    let m = matrix(&f.iter().map(String::as_str).collect::<Vec<_>>(), &cols);
    let plan = stratified_kfold(&labels, 5, 4).unwrap();
    let sel = select_features(&f, &m, &labels, &plan, 6).unwrap();
    assert_eq!(sel.features, names(&["f0"]), "auc by size {:?}", sel.auc_by_size);
}

#[test]
fn equal_auc_keeps_the_smaller_prefix() {
    let (cols, labels) = table(120, 1, 0, 3);
    // An exact copy leaves every validation ranking, hence AUC, unchanged.
    let cols = vec![cols[0].clone(), cols[0].clone()];
    let m = matrix(&["a", "b"], &cols);
    let plan = stratified_kfold(&labels, 4, 1).unwrap();
    let sel = select_features(&names(&["a", "b"]), &m, &labels, &plan, 2).unwrap();
    assert_eq!(sel.auc_by_size[0], sel.auc_by_size[1]);
    assert_eq!(sel.features, names(&["a"]));
}

#[test]
fn noise_features_have_near_zero_importance_and_ranking_is_seeded() {
    let (cols, labels) = table(200, 2, 3, 4);
    let f = feature_names(5);
    let m = matrix(&f.iter().map(String::as_str).collect::<Vec<_>>(), &cols);
    let plan = stratified_kfold(&labels, 5, 2).unwrap();
    let ranking = logistic_importance(&m, &labels, &plan, 5, 7).unwrap();
    assert_eq!(ranking.iter().map(|e| e.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    let top: Vec<&str> = ranking[..2].iter().map(|e| e.feature.as_str()).collect();
    assert!(top.contains(&"f0") && top.contains(&"f1"), "{ranking:?}");
    for e in ranking.iter().filter(|e| !["f0", "f1"].contains(&e.feature.as_str())) {
        assert!(e.mean_auc_drop.abs() <= 0.05, "{e:?}");
    }
    assert_eq!(ranking, logistic_importance(&m, &labels, &plan, 5, 7).unwrap());
}

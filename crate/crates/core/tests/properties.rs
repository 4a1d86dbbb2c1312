//! Property tests of pipeline-level invariants.

use glioprog::encoders::PatchConfig;
use glioprog::pipeline::{roc_auc, soft_vote, stratified_kfold};
use proptest::prelude::*;

proptest! {
    #[test]
    fn soft_vote_keeps_a_unanimous_ranking(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..8)
    ) {
        // Every fold scores sample a strictly above sample b.
        let a: Vec<f64> = pairs.iter().map(|(x, y)| x.max(*y)).collect();
        let b: Vec<f64> = pairs.iter().map(|(x, y)| x.min(*y)).collect();
        prop_assume!(a.iter().zip(&b).all(|(x, y)| x > y));
        prop_assert!(soft_vote(&a).unwrap() > soft_vote(&b).unwrap());
    }

    #[test]
    fn token_count_law(p in 1usize..6, g in prop::array::uniform3(1usize..5)) {
        let cfg = PatchConfig {
            extents: [g[0] * p, g[1] * p, g[2] * p],
            patch: p,
            ..PatchConfig::default()
        };
        prop_assert_eq!(cfg.num_tokens().unwrap(), g[0] * g[1] * g[2]);
        let bad = PatchConfig { extents: [g[0] * p + 1, g[1] * p, g[2] * p], ..cfg };
        prop_assert!(p == 1 || bad.num_tokens().is_err());
    }

    #[test]
    fn fold_quotas_stay_within_one_of_the_share(
        pos in 5usize..40, neg in 5usize..40, k in 1usize..6, seed in any::<u64>()
    ) {
        let labels: Vec<bool> = (0..pos + neg).map(|i| i < pos).collect();
        let plan = stratified_kfold(&labels, k, seed).unwrap();
        for (class, total) in [(true, pos), (false, neg)] {
            for c in plan.class_counts(&labels, class) {
                prop_assert!((c as f64 - total as f64 / k as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_rescaling(
        data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
    ) {
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap().auc, roc_auc(&squashed, &labels).unwrap().auc);
    }
}

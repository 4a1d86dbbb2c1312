//! Training regimes, cross-validation, metrics, importance, orchestration.

pub mod aux;
pub mod cv;
pub mod experiment;
pub mod importance;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod stages;

pub use aux::{pretrain_auxiliary, AuxConfig, AuxRun};
pub use cv::{stratified_kfold, FoldPlan};
pub use experiment::{
    run_experiment, run_experiment_on, write_artifacts, EvalReport, ExperimentConfig, ExperimentOutcome, MetricSet,
};
pub use importance::{
    fusion_importance, logistic_importance, permutation_importance, select_features, ImportanceEntry, LogisticModel,
    Selection,
};
pub use metrics::{confusion_metrics, mean_std, roc_auc, soft_vote, ConfusionMetrics, Roc, RocPoint};
pub use model::{
    init_model, predict, train_fold, FittedModel, FoldPreprocessing, Mode, ModelSpec, PreparedSample, TrainConfig,
};
pub use seeds::sub_seed;

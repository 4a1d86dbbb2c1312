use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::aux::AuxConfig;
use super::cv::{stratified_kfold, FoldPlan};
use super::importance::{fusion_importance, logistic_importance, select_features, ImportanceEntry, Selection};
use super::metrics::{confusion_metrics, mean_std, roc_auc, soft_vote, RocPoint};
use super::model::{predict, train_fold, FittedModel, FoldPreprocessing, Mode, ModelSpec, PreparedSample, TrainConfig};
use super::seeds::sub_seed;
use crate::data::clinical::DroppedColumn;
use crate::data::{drop_collinear, encode_clinical, ClinicalStats, Dataset, SynthConfig};
use crate::encoders::checkpoint::{load_checkpoint, save_checkpoint};
use crate::encoders::PatchConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ssl::SslConfig;
use crate::tensor::Real;

pub const SCHEMA_VERSION: u32 = 1;
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Explicit clinical features in slot order; `None` selects them.
    pub names: Option<Vec<String>>,
    pub max_features: usize,
    pub collinearity_threshold: f64,
    /// Permutation repeats when ranking candidates for selection.
    pub selection_repeats: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            names: None,
            max_features: 9,
            collinearity_threshold: 0.95,
            selection_repeats: 5,
        }
    }
}

/// Everything one experiment needs. Sub-commands read the sections they use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_data: PathBuf,
    /// Held-out set scored by every fold model and by the soft-vote ensemble.
    pub test_data: Option<PathBuf>,
    /// Volumes for `pretrain-ssl`; defaults to `train_data`.
    pub ssl_data: Option<PathBuf>,
    /// Dataset with auxiliary targets for `pretrain-aux`; defaults to
    /// `train_data`.
    pub aux_data: Option<PathBuf>,
    pub folds: usize,
    pub patch: PatchConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    /// Permutation repeats for the importance report; 0 skips it.
    pub importance_repeats: usize,
    pub ssl: SslConfig,
    pub aux: AuxConfig,
    pub synth: SynthConfig,
    pub synth_test_subjects: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_data: PathBuf::from("data/train"),
            test_data: Some(PathBuf::from("data/test")),
            ssl_data: None,
            aux_data: None,
            folds: 5,
            patch: PatchConfig::default(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            importance_repeats: 5,
            ssl: SslConfig::default(),
            aux: AuxConfig::default(),
            synth: SynthConfig::default(),
            synth_test_subjects: 30,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl MetricSet {
    pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<(Self, Vec<RocPoint>)> {
        let roc = roc_auc(scores, labels)?;
        let c = confusion_metrics(scores, labels, THRESHOLD)?;
        Ok((
            Self {
                auc: roc.auc,
                accuracy: c.accuracy,
                sensitivity: c.sensitivity,
                specificity: c.specificity,
            },
            roc.points,
        ))
    }

    fn values(&self) -> [f64; 4] {
        [self.auc, self.accuracy, self.sensitivity, self.specificity]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            auc: v[0],
            accuracy: v[1],
            sensitivity: v[2],
            specificity: v[3],
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["auc", "accuracy", "sensitivity", "specificity"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: MetricSet,
    pub std: MetricSet,
}

impl Summary {
    fn of(sets: &[MetricSet]) -> Self {
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for k in 0..4 {
            let column: Vec<f64> = sets.iter().map(|s| s.values()[k]).collect();
            (mean[k], std[k]) = mean_std(&column);
        }
        Self {
            mean: MetricSet::from_values(mean),
            std: MetricSet::from_values(std),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub final_train_loss: f64,
    pub validation: MetricSet,
    pub test: Option<MetricSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub scope: String,
    pub points: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub fold: String,
    pub probability: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub features: Vec<String>,
    pub dropped_columns: Vec<DroppedColumn>,
    pub feature_selection: Option<Selection>,
    pub folds: Vec<FoldReport>,
    pub validation_summary: Summary,
    pub test_summary: Option<Summary>,
    /// `"test"` when a held-out set was scored by the soft-vote ensemble,
    /// otherwise `"out_of_fold"` (each subject scored by its one fold model).
    pub ensemble_scope: String,
    pub ensemble: MetricSet,
    /// "mean ± std (ensemble)" per metric, three decimals.
    pub table: BTreeMap<String, String>,
    #[serde(skip)]
    pub roc: Vec<RocCurve>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

pub struct ExperimentOutcome<T: Real> {
    pub report: EvalReport,
    pub plan: FoldPlan,
    pub models: Vec<FittedModel<T>>,
    pub preprocessing: Vec<FoldPreprocessing>,
    pub validation: Vec<Vec<PreparedSample<T>>>,
    pub importance: Vec<ImportanceEntry>,
}

/// Fold assignment used by every stage of an experiment.
pub fn experiment_plan(cfg: &ExperimentConfig, labels: &[bool]) -> Result<FoldPlan> {
    stratified_kfold(labels, cfg.folds, sub_seed(cfg.seed, "folds", 0))
}

/// Chosen features, kept columns, pruned columns and the selection trace.
pub type FeatureChoice = (Vec<String>, Vec<String>, Vec<DroppedColumn>, Option<Selection>);

/// Features and kept columns: collinearity pruning on the training set, then
/// either the configured names or importance-ranked prefix selection.
pub fn choose_features(
    cfg: &ExperimentConfig,
    train: &Dataset,
    labels: &[bool],
    plan: &FoldPlan,
) -> Result<FeatureChoice> {
    let stats = ClinicalStats::fit(&train.records)?;
    let (pruned, dropped) = drop_collinear(&encode_clinical(&train.records, &stats), cfg.features.collinearity_threshold)?;
    let columns = pruned.column_names();
    match &cfg.features.names {
        Some(names) => {
            pruned.clinical_inputs(names)?;
            Ok((names.clone(), columns, dropped, None))
        }
        None => {
            let ranking = logistic_importance(
                &pruned,
                labels,
                plan,
                cfg.features.selection_repeats,
                sub_seed(cfg.seed, "selection", 0),
            )?;
            let ranked: Vec<String> = ranking.into_iter().map(|e| e.feature).collect();
            let selection = select_features(&ranked, &pruned, labels, plan, cfg.features.max_features)?;
            Ok((selection.features.clone(), columns, dropped, Some(selection)))
        }
    }
}

/// Loads the encoder checkpoint the training mode needs, checking that it
/// was produced for the configured patch geometry.
pub fn load_encoder<T: Real>(cfg: &ExperimentConfig) -> Result<Option<ParamStore<T>>> {
    if !cfg.train.mode.needs_checkpoint() {
        return Ok(None);
    }
    let path = cfg.train.encoder_checkpoint.as_ref().ok_or_else(|| {
        Error::Config(format!("mode {} requires train.encoder_checkpoint", cfg.train.mode.name()))
    })?;
    let (store, meta) = load_checkpoint::<T>(path)?;
    let patch: PatchConfig = serde_json::from_value(meta.get("patch").cloned().unwrap_or_default())
        .map_err(|e| Error::Config(format!("checkpoint {} has no patch config: {e}", path.display())))?;
    if patch != cfg.patch {
        return Err(Error::Config(format!(
            "checkpoint {} was trained for {patch:?}, experiment uses {:?}",
            path.display(),
            cfg.patch
        )));
    }
    Ok(Some(store.subset("vit.")))
}

struct FoldResult<T: Real> {
    model: FittedModel<T>,
    preprocessing: FoldPreprocessing,
    validation: Vec<PreparedSample<T>>,
    validation_probs: Vec<f64>,
    test_probs: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn run_fold<T: Real>(
    cfg: &ExperimentConfig,
    fold: usize,
    plan: &FoldPlan,
    train: &Dataset,
    test: Option<&Dataset>,
    features: &[String],
    columns: &[String],
    encoder: Option<&ParamStore<T>>,
) -> Result<FoldResult<T>> {
    let (tr, va) = plan.split(fold);
    let (train_ds, val_ds) = (train.subset(&tr), train.subset(&va));
    let prep = FoldPreprocessing::fit(&train_ds, cfg.patch.extents, columns, features)?;
    let train_samples = prep.prepare::<T>(&train_ds, &cfg.patch)?;
    let validation = prep.prepare::<T>(&val_ds, &cfg.patch)?;
    let tcfg = TrainConfig {
        seed: sub_seed(cfg.seed, "init", fold as u64),
        ..cfg.train.clone()
    };
    let model = train_fold(&train_samples, &cfg.patch, features, &tcfg, encoder)?;
    drop(train_samples);
    let validation_probs = validation.iter().map(|s| predict(&model, s)).collect::<Result<Vec<_>>>()?;
    let test_probs = match test {
        Some(t) => Some(
            prep.prepare::<T>(t, &cfg.patch)?
                .iter()
                .map(|s| predict(&model, s))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(FoldResult {
        model,
        preprocessing: prep,
        validation,
        validation_probs,
        test_probs,
    })
}

fn label_code(l: bool) -> String {
    if l { "TP" } else { "PsP" }.to_string()
}

fn table_entry(summary: &Summary, ensemble: &MetricSet, k: usize) -> String {
    format!(
        "{:.3} ± {:.3} ({:.3})",
        summary.mean.values()[k],
        summary.std.values()[k],
        ensemble.values()[k]
    )
}

/// Stratified cross-validation on `train`; each fold model is scored on its
/// validation split and on `test`, and the fold models are soft-voted.
/// Folds train concurrently on scoped threads and are joined in order.
pub fn run_experiment_on<T: Real>(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    encoder: Option<&ParamStore<T>>,
) -> Result<ExperimentOutcome<T>> {
    cfg.patch.validate().map_err(|e| e.in_stage("config", None))?;
    let labels = train.labels().map_err(|e| e.in_stage("load", None))?;
    let test_labels = test
        .map(Dataset::labels)
        .transpose()
        .map_err(|e| e.in_stage("load", None))?;
    let plan = experiment_plan(cfg, &labels).map_err(|e| e.in_stage("folds", None))?;
    let (features, columns, dropped, selection) =
        choose_features(cfg, train, &labels, &plan).map_err(|e| e.in_stage("features", None))?;
    log::info!("features: {features:?}");

    let results: Vec<Result<FoldResult<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..plan.k)
            .map(|f| {
                let (plan, features, columns) = (&plan, &features, &columns);
                scope.spawn(move || run_fold(cfg, f, plan, train, test, features, columns, encoder))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("fold worker panicked".into()))))
            .collect()
    });
    let mut folds = Vec::with_capacity(plan.k);
    for (f, r) in results.into_iter().enumerate() {
        folds.push(r.map_err(|e| e.in_stage("train", Some(f)))?);
    }

    let mut reports = Vec::with_capacity(plan.k);
    let mut roc = Vec::new();
    let mut predictions = Vec::new();
    let mut oof = vec![0.0; train.len()];
    for (f, r) in folds.iter().enumerate() {
        let (_, va) = plan.split(f);
        let val_labels: Vec<bool> = va.iter().map(|&i| labels[i]).collect();
        let (validation, points) =
            MetricSet::evaluate(&r.validation_probs, &val_labels).map_err(|e| e.in_stage("evaluate", Some(f)))?;
        roc.push(RocCurve {
            scope: format!("fold{f}/validation"),
            points,
        });
        for (&i, &p) in va.iter().zip(&r.validation_probs) {
            oof[i] = p;
        }
        let test_metrics = match (&r.test_probs, &test_labels) {
            (Some(probs), Some(tl)) => {
                let (m, points) = MetricSet::evaluate(probs, tl).map_err(|e| e.in_stage("evaluate", Some(f)))?;
                roc.push(RocCurve {
                    scope: format!("fold{f}/test"),
                    points,
                });
                Some(m)
            }
            _ => None,
        };
        reports.push(FoldReport {
            fold: f,
            train_size: train.len() - va.len(),
            validation_size: va.len(),
            final_train_loss: r.model.log.last().map_or(f64::NAN, |l| l.loss),
            validation,
            test: test_metrics,
        });
    }

    let validation_summary = Summary::of(&reports.iter().map(|r| r.validation).collect::<Vec<_>>());
    let (ensemble_scope, ensemble, test_summary) = match (test, &test_labels) {
        (Some(t), Some(tl)) => {
            let mut voted = Vec::with_capacity(t.len());
            for (i, rec) in t.records.iter().enumerate() {
                let per_fold: Vec<f64> = folds
                    .iter()
                    .map(|r| r.test_probs.as_ref().expect("test predictions")[i])
                    .collect();
                let p = soft_vote(&per_fold).map_err(|e| e.in_stage("ensemble", None))?;
                for (f, &q) in per_fold.iter().enumerate() {
                    predictions.push(Prediction {
                        subject_id: rec.subject_id.clone(),
                        fold: f.to_string(),
                        probability: q,
                        label: label_code(tl[i]),
                    });
                }
                predictions.push(Prediction {
                    subject_id: rec.subject_id.clone(),
                    fold: "ensemble".into(),
                    probability: p,
                    label: label_code(tl[i]),
                });
                voted.push(p);
            }
            let (m, points) = MetricSet::evaluate(&voted, tl).map_err(|e| e.in_stage("ensemble", None))?;
            roc.push(RocCurve {
                scope: "ensemble/test".into(),
                points,
            });
            let ts = Summary::of(&reports.iter().filter_map(|r| r.test).collect::<Vec<_>>());
            ("test".to_string(), m, Some(ts))
        }
        _ => {
            for (i, rec) in train.records.iter().enumerate() {
                predictions.push(Prediction {
                    subject_id: rec.subject_id.clone(),
                    fold: plan.assignments[i].to_string(),
                    probability: oof[i],
                    label: label_code(labels[i]),
                });
            }
            let (m, points) = MetricSet::evaluate(&oof, &labels).map_err(|e| e.in_stage("ensemble", None))?;
            roc.push(RocCurve {
                scope: "ensemble/out_of_fold".into(),
                points,
            });
            ("out_of_fold".to_string(), m, None)
        }
    };
    let headline = test_summary.as_ref().unwrap_or(&validation_summary);
    let table = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| (name.to_string(), table_entry(headline, &ensemble, k)))
        .collect();

    let mut models = Vec::with_capacity(plan.k);
    let mut preprocessing = Vec::with_capacity(plan.k);
    let mut validation = Vec::with_capacity(plan.k);
    for r in folds {
        models.push(r.model);
        preprocessing.push(r.preprocessing);
        validation.push(r.validation);
    }
    let importance = if cfg.importance_repeats > 0 {
        fusion_importance(&models, &validation, cfg.importance_repeats, sub_seed(cfg.seed, "importance", 0))
            .map_err(|e| e.in_stage("importance", None))?
    } else {
        Vec::new()
    };
    Ok(ExperimentOutcome {
        report: EvalReport {
            schema_version: SCHEMA_VERSION,
            mode: cfg.train.mode,
            seed: cfg.seed,
            features,
            dropped_columns: dropped,
            feature_selection: selection,
            folds: reports,
            validation_summary,
            test_summary,
            ensemble_scope,
            ensemble,
            table,
            roc,
            predictions,
        },
        plan,
        models,
        preprocessing,
        validation,
        importance,
    })
}

#[derive(Serialize)]
struct RocRow<'a> {
    scope: &'a str,
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

pub fn write_importance(path: &Path, entries: &[ImportanceEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves(path: &Path, curves: &[RocCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for curve in curves {
        for p in &curve.points {
            w.serialize(RocRow {
                scope: &curve.scope,
                threshold: p.threshold,
                fpr: p.fpr,
                tpr: p.tpr,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in predictions {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Checkpoint metadata of a fold model: enough to rebuild it for scoring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldCheckpointMeta {
    pub mode: Mode,
    pub spec: ModelSpec,
    pub preprocessing: FoldPreprocessing,
}

pub fn fold_checkpoint_path(out: &Path, fold: usize) -> PathBuf {
    out.join("checkpoints").join(format!("fold{fold}"))
}

/// Writes `metrics.json`, `roc_points.csv`, `predictions.csv`,
/// `importance.csv` and one checkpoint per fold under `out`.
pub fn write_artifacts<T: Real>(outcome: &ExperimentOutcome<T>, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let report = &outcome.report;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    fs::write(out.join("metrics.json"), json)?;
    write_curves(&out.join("roc_points.csv"), &report.roc)?;
    write_predictions(&out.join("predictions.csv"), &report.predictions)?;
    if !outcome.importance.is_empty() {
        write_importance(&out.join("importance.csv"), &outcome.importance)?;
    }
    for (f, (m, prep)) in outcome.models.iter().zip(&outcome.preprocessing).enumerate() {
        let meta = serde_json::to_value(FoldCheckpointMeta {
            mode: m.mode,
            spec: m.spec.clone(),
            preprocessing: prep.clone(),
        })?;
        save_checkpoint(&m.params, &fold_checkpoint_path(out, f), &meta)?;
    }
    Ok(())
}

/// Loads the configured datasets and encoder, runs the cross-validated
/// experiment, and writes its artifacts when `out` is given.
pub fn run_experiment<T: Real>(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome<T>> {
    let train = Dataset::load(&cfg.train_data).map_err(|e| e.in_stage("load", None))?;
    let test = cfg
        .test_data
        .as_ref()
        .map(|p| Dataset::load(p))
        .transpose()
        .map_err(|e| e.in_stage("load", None))?;
    let encoder = load_encoder::<T>(cfg).map_err(|e| e.in_stage("encoder", None))?;
    let outcome = run_experiment_on(cfg, &train, test.as_ref(), encoder.as_ref())?;
    if let Some(out) = out {
        write_artifacts(&outcome, out).map_err(|e| e.in_stage("write", None))?;
    }
    Ok(outcome)
}

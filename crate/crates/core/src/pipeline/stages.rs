//! Stand-alone stages behind the command-line sub-commands: encoder
//! pretraining, feature selection, and scoring of saved fold models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::aux::{pretrain_auxiliary, AuxRun, AuxStep};
use super::experiment::{
    choose_features, experiment_plan, fold_checkpoint_path, write_importance, ExperimentConfig, FoldCheckpointMeta,
    MetricSet, Prediction, RocCurve,
};
use super::importance::{fusion_importance, logistic_importance, ImportanceEntry, Selection};
use super::metrics::soft_vote;
use super::model::{predict, FittedModel};
use super::seeds::sub_seed;
use crate::data::{drop_collinear, encode_clinical, synth_generate, ClinicalStats, Dataset, Preprocessor, SynthConfig};
use crate::encoders::checkpoint::{load_checkpoint, save_checkpoint};
use crate::encoders::{patchify, PatchConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ssl::{pretrain_ssl, write_loss_curve, SslRun};
use crate::tensor::Real;

/// Metadata stored with encoder-only checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderMeta {
    /// `"ssl"` or `"auxiliary"`.
    pub kind: String,
    pub patch: PatchConfig,
    pub seed: u64,
}

pub fn save_encoder<T: Real>(encoder: &ParamStore<T>, base: &Path, meta: &EncoderMeta) -> Result<()> {
    save_checkpoint(encoder, base, &serde_json::to_value(meta)?)
}

fn preprocessed(data: &Dataset, patch: &PatchConfig) -> Result<Vec<crate::data::VolumeSample>> {
    let pre = Preprocessor::fit(&data.volumes, patch.extents)?;
    data.volumes.iter().map(|v| pre.apply(v)).collect()
}

/// Self-supervised pretraining on every volume of `data` (labels unused).
pub fn ssl_stage<T: Real>(cfg: &ExperimentConfig, data: &Dataset) -> Result<SslRun<T>> {
    let volumes = preprocessed(data, &cfg.patch)?;
    pretrain_ssl(&volumes, &cfg.patch, &cfg.ssl, sub_seed(cfg.seed, "ssl", 0))
}

/// Auxiliary regression pretraining on the continuous targets of `data`.
pub fn aux_stage<T: Real>(cfg: &ExperimentConfig, data: &Dataset) -> Result<AuxRun<T>> {
    if data.aux_targets.len() != data.len() {
        return Err(Error::Contract(format!(
            "auxiliary pretraining needs one target per subject, found {} for {}",
            data.aux_targets.len(),
            data.len()
        )));
    }
    let patches = preprocessed(data, &cfg.patch)?
        .iter()
        .map(|v| patchify(v, &cfg.patch))
        .collect::<Result<Vec<_>>>()?;
    pretrain_auxiliary(&patches, &data.aux_targets, &cfg.patch, &cfg.aux, sub_seed(cfg.seed, "aux", 0))
}

/// Runs SSL pretraining and writes `encoder.{json,bin}` and
/// `ssl_loss.csv` under `out`.
pub fn write_ssl_stage<T: Real>(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<SslRun<T>> {
    let run = ssl_stage::<T>(cfg, data)?;
    fs::create_dir_all(out)?;
    let meta = EncoderMeta {
        kind: "ssl".into(),
        patch: cfg.patch.clone(),
        seed: cfg.seed,
    };
    save_encoder(&run.encoder(), &out.join("encoder"), &meta)?;
    write_loss_curve(&out.join("ssl_loss.csv"), &run.curve)?;
    Ok(run)
}

/// Runs auxiliary pretraining and writes `encoder.{json,bin}` and
/// `aux_loss.csv` under `out`.
pub fn write_aux_stage<T: Real>(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<AuxRun<T>> {
    let run = aux_stage::<T>(cfg, data)?;
    fs::create_dir_all(out)?;
    let meta = EncoderMeta {
        kind: "auxiliary".into(),
        patch: cfg.patch.clone(),
        seed: cfg.seed,
    };
    save_encoder(&run.encoder(), &out.join("encoder"), &meta)?;
    let mut w = csv::Writer::from_path(out.join("aux_loss.csv"))?;
    for row in &run.curve {
        w.serialize::<&AuxStep>(row)?;
    }
    w.flush()?;
    Ok(run)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionReport {
    pub ranking: Vec<ImportanceEntry>,
    pub selection: Selection,
}

/// Ranks every clinical column with the cross-validated logistic model and
/// picks the best prefix, as `run_experiment` does when no names are given.
pub fn selection_stage(cfg: &ExperimentConfig, data: &Dataset) -> Result<SelectionReport> {
    let labels = data.labels()?;
    let plan = experiment_plan(cfg, &labels)?;
    let stats = ClinicalStats::fit(&data.records)?;
    let (pruned, _) = drop_collinear(&encode_clinical(&data.records, &stats), cfg.features.collinearity_threshold)?;
    let ranking = logistic_importance(
        &pruned,
        &labels,
        &plan,
        cfg.features.selection_repeats,
        sub_seed(cfg.seed, "selection", 0),
    )?;
    let auto = ExperimentConfig {
        features: super::experiment::FeatureConfig {
            names: None,
            ..cfg.features.clone()
        },
        ..cfg.clone()
    };
    let (_, _, _, selection) = choose_features(&auto, data, &labels, &plan)?;
    Ok(SelectionReport {
        ranking,
        selection: selection.expect("automatic selection"),
    })
}

/// Rebuilds the fold models saved by a training run.
pub fn load_fold_models<T: Real>(run: &Path, folds: usize) -> Result<Vec<(FittedModel<T>, FoldCheckpointMeta)>> {
    (0..folds)
        .map(|f| {
            let (params, meta) = load_checkpoint::<T>(&fold_checkpoint_path(run, f))?;
            let meta: FoldCheckpointMeta = serde_json::from_value(meta)
                .map_err(|e| Error::Format(format!("fold {f} checkpoint metadata: {e}")))?;
            let model = FittedModel {
                spec: meta.spec.clone(),
                mode: meta.mode,
                params,
                provenance: meta.preprocessing.fingerprint.clone(),
                trainable: Vec::new(),
                log: Vec::new(),
            };
            Ok((model, meta))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub schema_version: u32,
    pub folds: Vec<MetricSet>,
    pub ensemble: MetricSet,
    #[serde(skip)]
    pub roc: Vec<RocCurve>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

/// Scores a labeled dataset with every saved fold model and their soft vote.
pub fn evaluate_stage<T: Real>(run: &Path, folds: usize, data: &Dataset) -> Result<Evaluation> {
    let labels = data.labels()?;
    let models = load_fold_models::<T>(run, folds)?;
    let mut per_fold = Vec::with_capacity(folds);
    let mut fold_metrics = Vec::with_capacity(folds);
    let mut roc = Vec::new();
    for (f, (model, meta)) in models.iter().enumerate() {
        let samples = meta.preprocessing.prepare::<T>(data, &model.spec.patch)?;
        let probs = samples.iter().map(|s| predict(model, s)).collect::<Result<Vec<_>>>()?;
        let (m, points) = MetricSet::evaluate(&probs, &labels)?;
        roc.push(RocCurve {
            scope: format!("fold{f}/test"),
            points,
        });
        fold_metrics.push(m);
        per_fold.push(probs);
    }
    let mut predictions = Vec::new();
    let mut voted = Vec::with_capacity(data.len());
    for (i, rec) in data.records.iter().enumerate() {
        let ps: Vec<f64> = per_fold.iter().map(|p| p[i]).collect();
        let label = if labels[i] { "TP" } else { "PsP" };
        for (f, &p) in ps.iter().enumerate() {
            predictions.push(Prediction {
                subject_id: rec.subject_id.clone(),
                fold: f.to_string(),
                probability: p,
                label: label.into(),
            });
        }
        let v = soft_vote(&ps)?;
        predictions.push(Prediction {
            subject_id: rec.subject_id.clone(),
            fold: "ensemble".into(),
            probability: v,
            label: label.into(),
        });
        voted.push(v);
    }
    let (ensemble, points) = MetricSet::evaluate(&voted, &labels)?;
    roc.push(RocCurve {
        scope: "ensemble/test".into(),
        points,
    });
    Ok(Evaluation {
        schema_version: super::experiment::SCHEMA_VERSION,
        folds: fold_metrics,
        ensemble,
        roc,
        predictions,
    })
}

/// Permutation importance of the saved fold models on their validation
/// splits, re-derived from the experiment seed.
pub fn importance_stage<T: Real>(cfg: &ExperimentConfig, run: &Path, data: &Dataset) -> Result<Vec<ImportanceEntry>> {
    let labels = data.labels()?;
    let plan = experiment_plan(cfg, &labels)?;
    let loaded = load_fold_models::<T>(run, plan.k)?;
    let mut models = Vec::with_capacity(plan.k);
    let mut validation = Vec::with_capacity(plan.k);
    for (f, (model, meta)) in loaded.into_iter().enumerate() {
        let (_, va) = plan.split(f);
        validation.push(meta.preprocessing.prepare::<T>(&data.subset(&va), &model.spec.patch)?);
        models.push(model);
    }
    let repeats = cfg.importance_repeats.max(1);
    fusion_importance(&models, &validation, repeats, sub_seed(cfg.seed, "importance", 0))
}

pub fn write_evaluation(eval: &Evaluation, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut json = serde_json::to_vec_pretty(eval)?;
    json.push(b'\n');
    fs::write(out.join("metrics.json"), json)?;
    super::experiment::write_curves(&out.join("roc_points.csv"), &eval.roc)?;
    super::experiment::write_predictions(&out.join("predictions.csv"), &eval.predictions)?;
    Ok(())
}

pub fn write_importance_stage(entries: &[ImportanceEntry], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_importance(&out.join("importance.csv"), entries)
}

/// Synthetic training cohort from `cfg.synth` plus, when
/// `synth_test_subjects > 0`, a held-out cohort with the same class balance.
pub fn synth_stage(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let train = synth_generate(&cfg.synth, sub_seed(cfg.seed, "synth", 0))?;
    if cfg.synth_test_subjects == 0 {
        return Ok((train, None));
    }
    let n = cfg.synth_test_subjects;
    let tp = (n as f64 * cfg.synth.true_progression as f64 / cfg.synth.subjects as f64).round() as usize;
    let test_cfg = SynthConfig {
        subjects: n,
        true_progression: tp,
        folds: 1,
        ..cfg.synth.clone()
    };
    let mut test = synth_generate(&test_cfg, sub_seed(cfg.seed, "synth", 1))?;
    for r in &mut test.records {
        r.subject_id = format!("T{}", &r.subject_id[1..]);
    }
    for v in &mut test.volumes {
        v.subject_id = format!("T{}", &v.subject_id[1..]);
    }
    Ok((train, Some(test)))
}

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{fusion_forward, FusionParams, TokenSequence};
use crate::data::{encode_clinical, ClinicalInput, ClinicalStats, Dataset, Preprocessor};
use crate::encoders::{clinical_encode, encode_patches, patchify, vit_forward, ClinicalEncoderParams, PatchConfig, VitParams};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, BindAs, Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Probabilities are kept strictly inside (0, 1).
pub const PROBABILITY_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Self-supervised encoder loaded and frozen; fusion and clinical
    /// encoder trained.
    SslFrozen,
    /// Encoder from the auxiliary survival task, everything fine-tuned.
    Transfer,
    /// Random initialization, everything trained.
    EndToEnd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SslFrozen => "ssl_frozen",
            Mode::Transfer => "transfer",
            Mode::EndToEnd => "end_to_end",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        !matches!(self, Mode::EndToEnd)
    }

    pub fn encoder_frozen(self) -> bool {
        matches!(self, Mode::SslFrozen)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Required for `ssl_frozen` and `transfer`.
    pub encoder_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SslFrozen,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            encoder_checkpoint: None,
        }
    }
}

/// Architecture of one fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub patch: PatchConfig,
    pub features: Vec<String>,
    pub slot_widths: Vec<usize>,
}

/// Statistics of one training split: volume preprocessing, clinical
/// normalization, and the encoded columns kept for the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPreprocessing {
    pub preprocessor: Preprocessor,
    pub clinical: ClinicalStats,
    pub columns: Vec<String>,
    pub features: Vec<String>,
    pub fingerprint: String,
}

/// A subject ready for the model. Either modality may be missing, in which
/// case prediction refuses it.
#[derive(Clone, Debug)]
pub struct PreparedSample<T: Real> {
    pub subject_id: String,
    pub patches: Option<Tensor<T>>,
    pub clinical: Option<ClinicalInput>,
    pub label: Option<bool>,
    pub provenance: String,
}

impl FoldPreprocessing {
    /// `columns` are the encoded clinical columns to keep (e.g. after
    /// collinearity pruning on the training data).
    pub fn fit(train: &Dataset, extents: [usize; 3], columns: &[String], features: &[String]) -> Result<Self> {
        let preprocessor = Preprocessor::fit(&train.volumes, extents)?;
        let clinical = ClinicalStats::fit(&train.records)?;
        let mut h = Sha256::new();
        for row in &preprocessor.landmarks.reference {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        h.update(clinical.fingerprint.as_bytes());
        for c in columns.iter().chain(features) {
            h.update(c.as_bytes());
            h.update([0u8]);
        }
        let fingerprint = h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            preprocessor,
            clinical,
            columns: columns.to_vec(),
            features: features.to_vec(),
            fingerprint,
        })
    }

    pub fn prepare<T: Real>(&self, data: &Dataset, patch: &PatchConfig) -> Result<Vec<PreparedSample<T>>> {
        let matrix = encode_clinical(&data.records, &self.clinical).retain_columns(&self.columns);
        let inputs = matrix.clinical_inputs(&self.features)?;
        data.volumes
            .iter()
            .zip(&data.records)
            .zip(inputs)
            .map(|((v, r), clinical)| {
                Ok(PreparedSample {
                    subject_id: r.subject_id.clone(),
                    patches: Some(patchify(&self.preprocessor.apply(v)?, patch)?),
                    clinical: Some(clinical),
                    label: r.label.map(|l| l.is_positive()),
                    provenance: self.fingerprint.clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub running_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FittedModel<T: Real> {
    pub spec: ModelSpec,
    pub mode: Mode,
    pub params: ParamStore<T>,
    pub provenance: String,
    /// Parameter tensors the optimizer updated.
    pub trainable: Vec<String>,
    pub log: Vec<EpochLog>,
}

/// Fresh parameters for every component; `encoder` replaces the random
/// image encoder when given. The random stream is consumed identically in
/// every mode, so equal seeds give equal fusion initializations.
pub fn init_model<T: Real>(spec: &ModelSpec, encoder: Option<&ParamStore<T>>, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    VitParams::init(&mut store, &spec.patch, &mut rng)?;
    if let Some(enc) = encoder {
        store.merge(enc)?;
    }
    ClinicalEncoderParams::init(&mut store, &spec.slot_widths, spec.patch.dim, &mut rng);
    FusionParams::init(&mut store, spec.patch.dim, &mut rng);
    Ok(store)
}

fn is_encoder(name: &str) -> bool {
    name.starts_with("vit.")
}

/// Image tokens for a sample: either pre-computed (frozen encoder) or built
/// on the tape from its patches.
enum ImageInput<'a, T: Real> {
    Tokens(&'a Tensor<T>),
    Patches(&'a Tensor<T>),
}

fn forward_logit<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    spec: &ModelSpec,
    image: ImageInput<'_, T>,
    clinical: &ClinicalInput,
) -> Result<Var> {
    let e_i = match image {
        ImageInput::Tokens(t) => TokenSequence::image(tape.constant(t.clone())),
        ImageInput::Patches(p) => {
            let vit = VitParams::bind(bound, &spec.patch)?;
            let x = tape.constant(p.clone());
            vit_forward(tape, x, &vit)?
        }
    };
    let enc = ClinicalEncoderParams::bind(bound, spec.slot_widths.len())?;
    let e_c = clinical_encode(tape, clinical, &enc)?;
    let fusion = FusionParams::bind(bound)?;
    Ok(fusion_forward(tape, &e_i, &e_c, &fusion)?.logit)
}

fn modalities<T: Real>(s: &PreparedSample<T>) -> Result<(&Tensor<T>, &ClinicalInput)> {
    match (&s.patches, &s.clinical) {
        (Some(p), Some(c)) => Ok((p, c)),
        (None, _) => Err(Error::Contract(format!("subject {}: image modality missing", s.subject_id))),
        (_, None) => Err(Error::Contract(format!("subject {}: clinical modality missing", s.subject_id))),
    }
}

fn spec_for<T: Real>(train: &[PreparedSample<T>], patch: &PatchConfig, features: &[String]) -> Result<ModelSpec> {
    let first = train.first().ok_or_else(|| Error::Contract("empty training split".into()))?;
    let (_, clinical) = modalities(first)?;
    if clinical.slots.len() != features.len() {
        return Err(Error::Contract(format!(
            "{} feature names for {} clinical slots",
            features.len(),
            clinical.slots.len()
        )));
    }
    Ok(ModelSpec {
        patch: patch.clone(),
        features: features.to_vec(),
        slot_widths: clinical.slot_widths(),
    })
}

/// Fits the fusion model on one training split by minimizing binary
/// cross-entropy with Adam.
pub fn train_fold<T: Real>(
    train: &[PreparedSample<T>],
    patch: &PatchConfig,
    features: &[String],
    cfg: &TrainConfig,
    encoder: Option<&ParamStore<T>>,
) -> Result<FittedModel<T>> {
    let labels: Vec<bool> = train
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Contract(format!("subject {} has no label", s.subject_id))))
        .collect::<Result<_>>()?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Contract(format!(
            "training split needs both classes ({positives} of {} positive)",
            labels.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if cfg.mode.needs_checkpoint() && encoder.is_none() {
        return Err(Error::Config(format!("mode {} needs a pretrained encoder", cfg.mode.name())));
    }
    let provenance = train[0].provenance.clone();
    if let Some(s) = train.iter().find(|s| s.provenance != provenance) {
        return Err(Error::Contract(format!(
            "subject {} was prepared with different statistics",
            s.subject_id
        )));
    }
    let spec = spec_for(train, patch, features)?;
    let mut params = init_model(&spec, if cfg.mode.needs_checkpoint() { encoder } else { None }, cfg.seed)?;
    let frozen = cfg.mode.encoder_frozen();
    let trainable: Vec<String> = params
        .names()
        .filter(|n| !(frozen && is_encoder(n)))
        .map(str::to_string)
        .collect();
    let cached: Option<Vec<Tensor<T>>> = if frozen {
        Some(
            train
                .iter()
                .map(|s| encode_patches(modalities(s)?.0, &spec.patch, &params))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        trainable.clone(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba7c);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |n| {
                if !is_encoder(n) {
                    BindAs::Trainable
                } else if frozen {
                    BindAs::Skip
                } else {
                    BindAs::Trainable
                }
            });
            let mut logits = Vec::with_capacity(batch.len());
            for &i in batch {
                let (patches, clinical) = modalities(&train[i])?;
                let image = match &cached {
                    Some(tokens) => ImageInput::Tokens(&tokens[i]),
                    None => ImageInput::Patches(patches),
                };
                logits.push(forward_logit(&mut tape, &bound, &spec, image, clinical)?);
            }
            let stacked = tape.concat_rows(&logits)?;
            let targets: Vec<f64> = batch.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect();
            let loss = tape.bce_with_logits(stacked, &targets)?;
            let value = tape.value(loss).item().to_f64();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("loss is {value}"),
                });
            }
            for (k, &i) in batch.iter().enumerate() {
                if (tape.value(stacked).data()[k].to_f64() >= 0.0) == labels[i] {
                    correct += 1;
                }
            }
            loss_sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam.step(&mut params, &bound.gradients(&grads))?;
            step += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / train.len() as f64,
            running_accuracy: correct as f64 / train.len() as f64,
        };
        log::debug!("epoch {epoch}: loss {:.4} accuracy {:.3}", entry.loss, entry.running_accuracy);
        log.push(entry);
    }
    Ok(FittedModel {
        spec,
        mode: cfg.mode,
        params,
        provenance,
        trainable,
        log,
    })
}

impl<T: Real> FittedModel<T> {
    fn check(&self, sample: &PreparedSample<T>) -> Result<()> {
        if sample.provenance != self.provenance {
            return Err(Error::Provenance(format!(
                "subject {} was preprocessed with statistics {} but the model expects {}",
                sample.subject_id, sample.provenance, self.provenance
            )));
        }
        Ok(())
    }

    /// Image tokens of a sample under this model's encoder.
    pub fn image_tokens(&self, sample: &PreparedSample<T>) -> Result<Tensor<T>> {
        self.check(sample)?;
        encode_patches(modalities(sample)?.0, &self.spec.patch, &self.params)
    }

    /// Probability of true progression given pre-computed image tokens.
    pub fn predict_with_tokens(&self, tokens: &Tensor<T>, clinical: &ClinicalInput) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self
            .params
            .bind(&mut tape, |n| if is_encoder(n) { BindAs::Skip } else { BindAs::Frozen });
        let logit = forward_logit(&mut tape, &bound, &self.spec, ImageInput::Tokens(tokens), clinical)?;
        let z = tape.value(logit).item().to_f64();
        let p = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            z.exp() / (1.0 + z.exp())
        };
        Ok(p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP))
    }
}

/// Probability of true progression. Both modalities must be present and
/// the sample must carry this model's preprocessing fingerprint.
pub fn predict<T: Real>(model: &FittedModel<T>, sample: &PreparedSample<T>) -> Result<f64> {
    let (_, clinical) = modalities(sample)?;
    let tokens = model.image_tokens(sample)?;
    model.predict_with_tokens(&tokens, clinical)
}

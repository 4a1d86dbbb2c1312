//! Supervised auxiliary pretraining of the image encoder on a continuous
//! target (survival stand-in), producing the encoder for transfer mode.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{vit_forward, PatchConfig, VitParams};
use crate::error::{Error, Result};
use crate::params::{glorot, Adam, AdamConfig, BindAs, ParamStore};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxStep {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct AuxRun<T: Real> {
    pub params: ParamStore<T>,
    pub curve: Vec<AuxStep>,
}

impl<T: Real> AuxRun<T> {
    pub fn encoder(&self) -> ParamStore<T> {
        self.params.subset("vit.")
    }
}

/// Trains encoder + mean-pool linear head on squared error. `patches` are
/// preprocessed, patchified volumes. The head bias starts at the target
/// mean so training fits the residual.
pub fn pretrain_auxiliary<T: Real>(
    patches: &[Tensor<T>],
    targets: &[f64],
    patch: &PatchConfig,
    cfg: &AuxConfig,
    seed: u64,
) -> Result<AuxRun<T>> {
    if patches.len() != targets.len() || patches.is_empty() {
        return Err(Error::Contract(format!(
            "{} volumes for {} auxiliary targets",
            patches.len(),
            targets.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    VitParams::init(&mut params, patch, &mut rng)?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    params.insert("aux.head.w", glorot(&mut rng, patch.dim, 1));
    params.insert("aux.head.b", Tensor::filled(&[1, 1], T::from_f64(mean)));
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        params.names().map(str::to_string).collect::<Vec<_>>(),
    );
    let n_tokens = patch.num_tokens()?;
    let pool = Tensor::filled(&[1, n_tokens], T::from_f64(1.0 / n_tokens as f64));
    let batch_size = cfg.batch_size.min(patches.len());
    let mut order = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < batch_size {
            let mut fresh: Vec<usize> = (0..patches.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<usize> = order.drain(..batch_size).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| BindAs::Trainable);
        let vit = VitParams::bind(&bound, patch)?;
        let (w, b) = (bound.var("aux.head.w")?, bound.var("aux.head.b")?);
        let mut preds = Vec::with_capacity(batch.len());
        for &i in &batch {
            let x = tape.constant(patches[i].clone());
            let tokens = vit_forward(&mut tape, x, &vit)?.tokens;
            let p = tape.constant(pool.clone());
            let pooled = tape.matmul(p, tokens)?;
            let y = tape.matmul(pooled, w)?;
            preds.push(tape.add(y, b)?);
        }
        let preds = tape.concat_rows(&preds)?;
        let target = tape.constant(Tensor::new(
            vec![batch.len(), 1],
            batch.iter().map(|&i| T::from_f64(targets[i])).collect(),
        )?);
        let diff = tape.sub(preds, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        let value = tape.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("auxiliary loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut params, &bound.gradients(&grads))?;
        curve.push(AuxStep { step, loss: value });
    }
    Ok(AuxRun { params, curve })
}

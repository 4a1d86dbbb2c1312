use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_views, AugmentConfig};
use super::corrupt::{corrupt_context, restoration_loss_tape, CorruptionPlan};
use crate::data::VolumeSample;
use crate::encoders::{patchify, vit_forward, PatchConfig, VitParams};
use crate::error::{Error, Result};
use crate::params::{glorot, Adam, AdamConfig, BindAs, Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    /// Fraction of patches moved by the context-restoration corruption.
    pub ratio: f64,
    pub temperature: f64,
    pub lambda_restore: f64,
    pub lambda_contrast: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment: AugmentConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            ratio: 0.3,
            temperature: 0.1,
            lambda_restore: 1.0,
            lambda_contrast: 1.0,
            steps: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            augment: AugmentConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let (r, c) = (self.lambda_restore, self.lambda_contrast);
        if !(r >= 0.0 && c >= 0.0) || r + c == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not both zero (restore {r}, contrast {c})"
            )));
        }
        if c > 0.0 && self.batch_size < 2 {
            return Err(Error::Config("contrastive learning needs batch_size >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub restoration_loss: f64,
    pub contrastive_loss: f64,
    pub total: f64,
}

/// Encoder plus the two pretext heads: a linear patch decoder and a
/// two-layer projection head for the contrastive space.
pub fn init_ssl_params<T: Real>(store: &mut ParamStore<T>, cfg: &PatchConfig, rng: &mut impl Rng) -> Result<()> {
    VitParams::init(store, cfg, rng)?;
    let d = cfg.dim;
    store.insert("ssl.decoder.w", glorot(rng, d, cfg.patch_len()));
    store.insert("ssl.decoder.b", Tensor::zeros(&[1, cfg.patch_len()]));
    store.insert("ssl.proj.w1", glorot(rng, d, d));
    store.insert("ssl.proj.b1", Tensor::zeros(&[1, d]));
    store.insert("ssl.proj.w2", glorot(rng, d, d));
    store.insert("ssl.proj.b2", Tensor::zeros(&[1, d]));
    Ok(())
}

/// Pre-computed inputs for one volume of a pretraining batch.
#[derive(Clone, Debug)]
pub struct SslItem<T: Real> {
    pub original: Tensor<T>,
    pub corrupted: Tensor<T>,
    pub plan: CorruptionPlan,
    pub view_a: Tensor<T>,
    pub view_b: Tensor<T>,
}

pub fn prepare_item<T: Real>(
    volume: &VolumeSample,
    patch_cfg: &PatchConfig,
    cfg: &SslConfig,
    seed: u64,
) -> Result<SslItem<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (corrupted, plan) = corrupt_context(volume, patch_cfg.patch, cfg.ratio, rng.random())?;
    let views = augment_views(volume, rng.random(), &cfg.augment);
    Ok(SslItem {
        original: patchify(volume, patch_cfg)?,
        corrupted: patchify(&corrupted, patch_cfg)?,
        plan,
        view_a: patchify(&views.a, patch_cfg)?,
        view_b: patchify(&views.b, patch_cfg)?,
    })
}

/// NT-Xent over the 2B rows of `[z_a; z_b]` after L2 normalization.
pub fn contrastive_loss<T: Real>(tape: &mut Tape<T>, z_a: Var, z_b: Var, tau: f64) -> Result<Var> {
    let (sa, sb) = (tape.value(z_a).shape().to_vec(), tape.value(z_b).shape().to_vec());
    if sa != sb {
        return Err(Error::Shape(format!("contrastive views {sa:?} vs {sb:?}")));
    }
    let z = tape.concat_rows(&[z_a, z_b])?;
    let z = tape.l2_normalize_rows(z)?;
    let sim = tape.matmul_nt(z, z)?;
    tape.nt_xent(sim, tau)
}

#[derive(Clone, Copy, Debug)]
pub struct SslLoss {
    pub restoration: Option<Var>,
    pub contrastive: Option<Var>,
    pub total: Var,
}

fn mean_pool<T: Real>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    let n = tape.value(tokens).rows();
    let w = tape.constant(Tensor::filled(&[1, n], T::from_f64(1.0 / n as f64)));
    tape.matmul(w, tokens)
}

fn project<T: Real>(tape: &mut Tape<T>, bound: &Bound, z: Var) -> Result<Var> {
    let h = tape.matmul(z, bound.var("ssl.proj.w1")?)?;
    let h = tape.add_row(h, bound.var("ssl.proj.b1")?)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, bound.var("ssl.proj.w2")?)?;
    tape.add_row(o, bound.var("ssl.proj.b2")?)
}

/// Weighted sum of the batch-mean restoration loss and the batch NT-Xent
/// loss. A branch with zero weight is not built at all.
pub fn ssl_objective<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    patch_cfg: &PatchConfig,
    cfg: &SslConfig,
    batch: &[SslItem<T>],
) -> Result<SslLoss> {
    let vit = VitParams::bind(bound, patch_cfg)?;
    let mut restoration = None;
    if cfg.lambda_restore > 0.0 {
        let mut parts = Vec::with_capacity(batch.len());
        for item in batch {
            let x = tape.constant(item.corrupted.clone());
            let tokens = vit_forward(tape, x, &vit)?.tokens;
            let rec = tape.matmul(tokens, bound.var("ssl.decoder.w")?)?;
            let rec = tape.add_row(rec, bound.var("ssl.decoder.b")?)?;
            parts.push(restoration_loss_tape(tape, rec, &item.original, &item.plan)?);
        }
        let stacked = tape.concat_rows(&parts)?;
        restoration = Some(tape.mean(stacked)?);
    }
    let mut contrastive = None;
    if cfg.lambda_contrast > 0.0 {
        let mut za = Vec::with_capacity(batch.len());
        let mut zb = Vec::with_capacity(batch.len());
        for item in batch {
            for (view, out) in [(&item.view_a, &mut za), (&item.view_b, &mut zb)] {
                let x = tape.constant(view.clone());
                let tokens = vit_forward(tape, x, &vit)?.tokens;
                let pooled = mean_pool(tape, tokens)?;
                out.push(project(tape, bound, pooled)?);
            }
        }
        let (a, b) = (tape.concat_rows(&za)?, tape.concat_rows(&zb)?);
        contrastive = Some(contrastive_loss(tape, a, b, cfg.temperature)?);
    }
    let total = match (restoration, contrastive) {
        (Some(r), Some(c)) => {
            let r = tape.scale(r, cfg.lambda_restore)?;
            let c = tape.scale(c, cfg.lambda_contrast)?;
            tape.add(r, c)?
        }
        (Some(r), None) => tape.scale(r, cfg.lambda_restore)?,
        (None, Some(c)) => tape.scale(c, cfg.lambda_contrast)?,
        (None, None) => unreachable!("validated weights"),
    };
    Ok(SslLoss {
        restoration,
        contrastive,
        total,
    })
}

/// One joint gradient step on both pretext losses.
pub fn pretrain_step<T: Real>(
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: &[SslItem<T>],
    patch_cfg: &PatchConfig,
    cfg: &SslConfig,
    step: usize,
) -> Result<StepLosses> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| BindAs::Trainable);
    let loss = ssl_objective(&mut tape, &bound, patch_cfg, cfg, batch)?;
    let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64());
    let losses = StepLosses {
        step,
        restoration_loss: read(loss.restoration),
        contrastive_loss: read(loss.contrastive),
        total: tape.value(loss.total).item().to_f64(),
    };
    if !losses.total.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("pretraining loss is {}", losses.total),
        });
    }
    let grads = tape.backward(loss.total)?;
    adam.step(store, &bound.gradients(&grads))?;
    Ok(losses)
}

#[derive(Clone, Debug)]
pub struct SslRun<T: Real> {
    pub params: ParamStore<T>,
    pub curve: Vec<StepLosses>,
}

impl<T: Real> SslRun<T> {
    /// The encoder alone, as consumed by the supervised stage.
    pub fn encoder(&self) -> ParamStore<T> {
        self.params.subset("vit.")
    }
}

/// Runs `cfg.steps` joint steps over `volumes`, drawing batches from a
/// reshuffled cycle.
pub fn pretrain_ssl<T: Real>(
    volumes: &[VolumeSample],
    patch_cfg: &PatchConfig,
    cfg: &SslConfig,
    seed: u64,
) -> Result<SslRun<T>> {
    cfg.validate()?;
    patch_cfg.validate()?;
    if volumes.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} volumes cannot fill a batch of {}",
            volumes.len(),
            cfg.batch_size
        )));
    }
    if cfg.lambda_restore > 0.0 {
        let n = patch_cfg.num_tokens()?;
        if (cfg.ratio * n as f64 / 2.0).round() < 1.0 {
            return Err(Error::Config(format!(
                "ratio {} corrupts no patch pair out of {n} patches",
                cfg.ratio
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    init_ssl_params(&mut params, patch_cfg, &mut rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        params.names().map(str::to_string).collect::<Vec<_>>(),
    );
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..volumes.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picks: Vec<usize> = order.drain(..cfg.batch_size).collect();
        let batch = picks
            .iter()
            .map(|&i| prepare_item(&volumes[i], patch_cfg, cfg, rng.random()))
            .collect::<Result<Vec<_>>>()?;
        let losses = pretrain_step(&mut params, &mut adam, &batch, patch_cfg, cfg, step)?;
        log::debug!(
            "ssl step {step}: restoration {:.4} contrastive {:.4}",
            losses.restoration_loss,
            losses.contrastive_loss
        );
        curve.push(losses);
    }
    Ok(SslRun { params, curve })
}

pub fn write_loss_curve(path: &Path, curve: &[StepLosses]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_similarity_gives_ln_2b_minus_1() {
        for b in 2..6 {
            let mut tape: Tape = Tape::new();
            let z = tape.constant(Tensor::filled(&[b, 3], 0.7));
            let l = contrastive_loss(&mut tape, z, z, 1.0).unwrap();
            assert!((tape.value(l).item() - ((2 * b - 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_pairs_with_opposed_negatives_approach_zero() {
        // Pairs along +e1/-e1: each negative pair that shares an axis is
        // anti-aligned, the other axis is orthogonal; small tau drives the
        // loss towards 0.
        let mut tape: Tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]));
        let l = contrastive_loss(&mut tape, a, a, 0.01).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn symmetric_in_views() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.2, -0.3, 0.9, 0.5, 0.5]));
        let b = tape.constant(Tensor::matrix(3, 2, vec![0.8, 0.1, 0.1, 1.0, -0.4, 0.6]));
        let ab = contrastive_loss(&mut tape, a, b, 0.5).unwrap();
        let ba = contrastive_loss(&mut tape, b, a, 0.5).unwrap();
        assert!((tape.value(ab).item() - tape.value(ba).item()).abs() < 1e-12);
    }

    #[test]
    fn single_pair_has_no_negatives() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        assert!(matches!(contrastive_loss(&mut tape, a, a, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn weights_must_not_both_vanish() {
        let cfg = SslConfig {
            lambda_restore: 0.0,
            lambda_contrast: 0.0,
            ..SslConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

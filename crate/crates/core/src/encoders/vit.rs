use rand::Rng;

use super::patch::{patchify, PatchConfig};
use crate::attention::{attend, AttentionParams, TokenSequence};
use crate::data::VolumeSample;
use crate::error::Result;
use crate::params::{glorot, normal, BindAs, Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Ledger label for encoder self-attention scores.
pub const VIT_SCORES: &str = "vit.self_attention.scores";
pub const VIT_PREFIX: &str = "vit.";

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn: AttentionParams,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct VitParams {
    pub proj: Var,
    pub proj_bias: Var,
    pub pos: Var,
    pub blocks: Vec<BlockParams>,
}

impl VitParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, cfg: &PatchConfig, rng: &mut impl Rng) -> Result<()> {
        cfg.validate()?;
        let (d, h) = (cfg.dim, cfg.dim * cfg.mlp_ratio);
        store.insert("vit.proj", glorot(rng, cfg.patch_len(), d));
        store.insert("vit.proj_bias", Tensor::zeros(&[1, d]));
        store.insert("vit.pos", position_table(rng, cfg.num_tokens()?, d, cfg.patch_len()));
        for l in 0..cfg.depth {
            let b = format!("vit.block{l}");
            for ln in ["ln1", "ln2"] {
                store.insert(format!("{b}.{ln}.gamma"), Tensor::filled(&[1, d], T::one()));
                store.insert(format!("{b}.{ln}.beta"), Tensor::zeros(&[1, d]));
            }
            AttentionParams::init(store, &format!("{b}.attn"), d, rng);
            store.insert(format!("{b}.mlp.w1"), glorot(rng, d, h));
            store.insert(format!("{b}.mlp.b1"), Tensor::zeros(&[1, h]));
            store.insert(format!("{b}.mlp.w2"), glorot(rng, h, d));
            store.insert(format!("{b}.mlp.b2"), Tensor::zeros(&[1, d]));
        }
        Ok(())
    }

    pub fn bind(bound: &Bound, cfg: &PatchConfig) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|l| {
                let b = format!("vit.block{l}");
                Ok(BlockParams {
                    ln1_gamma: bound.var(&format!("{b}.ln1.gamma"))?,
                    ln1_beta: bound.var(&format!("{b}.ln1.beta"))?,
                    attn: AttentionParams::bind(bound, &format!("{b}.attn"))?,
                    ln2_gamma: bound.var(&format!("{b}.ln2.gamma"))?,
                    ln2_beta: bound.var(&format!("{b}.ln2.beta"))?,
                    w1: bound.var(&format!("{b}.mlp.w1"))?,
                    b1: bound.var(&format!("{b}.mlp.b1"))?,
                    w2: bound.var(&format!("{b}.mlp.w2"))?,
                    b2: bound.var(&format!("{b}.mlp.b2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            proj: bound.var("vit.proj")?,
            proj_bias: bound.var("vit.proj_bias")?,
            pos: bound.var("vit.pos")?,
            blocks,
        })
    }
}

/// Learned position table at the scale of a Glorot-projected unit-variance
/// patch, so positions are not drowned by content. Columns are centered:
/// mean pooling over tokens then starts free of a shared positional offset.
fn position_table<T: Real>(rng: &mut impl Rng, n: usize, d: usize, patch_len: usize) -> Tensor<T> {
    let std = (2.0 * patch_len as f64 / (patch_len + d) as f64).sqrt();
    let mut t: Tensor<f64> = normal(rng, &[n, d], std);
    for c in 0..d {
        let mean = (0..n).map(|r| t.at(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            t.data_mut()[r * d + c] -= mean;
        }
    }
    t.cast()
}

fn block<T: Real>(tape: &mut Tape<T>, x: Var, p: &BlockParams) -> Result<Var> {
    let n1 = tape.layer_norm_rows(x, p.ln1_gamma, p.ln1_beta)?;
    let (a, _) = attend(tape, n1, n1, &p.attn, VIT_SCORES)?;
    let x = tape.add(x, a)?;
    let n2 = tape.layer_norm_rows(x, p.ln2_gamma, p.ln2_beta)?;
    let h = tape.matmul(n2, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, p.w2)?;
    let h = tape.add_row(h, p.b2)?;
    tape.add(x, h)
}

/// Patch rows (N x C p^3) to image tokens E_i (N x d): projection, learned
/// positions, then pre-norm blocks with residual connections.
pub fn vit_forward<T: Real>(tape: &mut Tape<T>, patches: Var, params: &VitParams) -> Result<TokenSequence> {
    let x = tape.matmul(patches, params.proj)?;
    let x = tape.add_row(x, params.proj_bias)?;
    let mut x = tape.add(x, params.pos)?;
    for b in &params.blocks {
        x = block(tape, x, b)?;
    }
    Ok(TokenSequence::image(x))
}

/// Inference-only encoding with every parameter held constant.
pub fn vit_encode<T: Real>(volume: &VolumeSample, cfg: &PatchConfig, store: &ParamStore<T>) -> Result<Tensor<T>> {
    encode_patches(&patchify(volume, cfg)?, cfg, store)
}

pub fn encode_patches<T: Real>(patches: &Tensor<T>, cfg: &PatchConfig, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |n| {
        if n.starts_with(VIT_PREFIX) {
            BindAs::Frozen
        } else {
            BindAs::Skip
        }
    });
    let params = VitParams::bind(&bound, cfg)?;
    let x = tape.constant(patches.clone());
    let out = vit_forward(&mut tape, x, &params)?;
    Ok(tape.value(out.tokens).clone())
}

//! Single-head scaled dot-product attention in three roles: clinical-guided
//! cross-attention over image tokens, self-attention over the fused
//! sequence, and learned-query pooling; plus the two-layer prediction head.
//!
//! Row convention: tokens are rows, so `Q = E_c W_q`, `K = E_i W_k`,
//! `V = E_i W_v` and the output is `softmax(Q K^T / sqrt(d)) V`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Ledger label of the guided cross-attention score product.
pub const CROSS_SCORES: &str = "cross_attention.scores";
/// Ledger label of the post-fusion self-attention score product.
pub const FUSED_SELF_SCORES: &str = "fused_self_attention.scores";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Image,
    Clinical,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub provenance: Provenance,
}

impl TokenSequence {
    pub fn image(tokens: Var) -> Self {
        Self {
            tokens,
            provenance: Provenance::Image,
        }
    }

    pub fn clinical(tokens: Var) -> Self {
        Self {
            tokens,
            provenance: Provenance::Clinical,
        }
    }

    pub fn fused(tokens: Var) -> Self {
        Self {
            tokens,
            provenance: Provenance::Fused,
        }
    }

    pub fn len<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.value(self.tokens).rows()
    }
}

/// Query, key and value projections, each d x d.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl AttentionParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: bound.var(&format!("{prefix}.wq"))?,
            wk: bound.var(&format!("{prefix}.wk"))?,
            wv: bound.var(&format!("{prefix}.wv"))?,
        })
    }

    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) {
        for w in ["wq", "wk", "wv"] {
            store.insert(format!("{prefix}.{w}"), glorot(rng, d, d));
        }
    }

    fn dim<T: Real>(&self, tape: &Tape<T>) -> Result<usize> {
        let d = tape.value(self.wq).rows();
        for (name, w) in [("W_q", self.wq), ("W_k", self.wk), ("W_v", self.wv)] {
            let s = tape.value(w).shape();
            if s != [d, d] {
                return Err(Error::Shape(format!("{name} is {s:?}, expected [{d}, {d}]")));
            }
        }
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub tokens: TokenSequence,
    /// Row-stochastic attention matrix, queries x keys.
    pub weights: Var,
}

fn check_width<T: Real>(tape: &Tape<T>, what: &str, x: Var, d: usize) -> Result<()> {
    let v = tape.value(x);
    if v.shape().len() != 2 || v.cols() != d || v.rows() == 0 {
        return Err(Error::Shape(format!(
            "{what} tokens are {:?}, expected [T, {d}] with T >= 1",
            v.shape()
        )));
    }
    Ok(())
}

/// `softmax(queries W_q (keys W_k)^T / sqrt(d)) keys W_v`, recording the
/// score multiply-accumulates under `label`.
pub fn attend<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: Var,
    params: &AttentionParams,
    label: &str,
) -> Result<(Var, Var)> {
    let d = params.dim(tape)?;
    check_width(tape, "query", queries, d)?;
    check_width(tape, "key", keys, d)?;
    let (tq, tk) = (tape.value(queries).rows(), tape.value(keys).rows());
    let q = tape.matmul(queries, params.wq)?;
    let k = tape.matmul(keys, params.wk)?;
    let v = tape.matmul(keys, params.wv)?;
    let scores = tape.matmul_nt(q, k)?;
    tape.record_flops(label, (tq * tk * d) as u64);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

fn expect(seq: &TokenSequence, want: Provenance, role: &str) -> Result<()> {
    if seq.provenance != want {
        return Err(Error::Contract(format!(
            "{role} must carry {want:?} tokens, got {:?}",
            seq.provenance
        )));
    }
    Ok(())
}

/// Clinical tokens query the image tokens; the output has one row per
/// clinical token.
pub fn guided_cross_attention<T: Real>(
    tape: &mut Tape<T>,
    e_c: &TokenSequence,
    e_i: &TokenSequence,
    params: &AttentionParams,
) -> Result<Attended> {
    expect(e_c, Provenance::Clinical, "cross-attention queries")?;
    expect(e_i, Provenance::Image, "cross-attention keys")?;
    let (out, weights) = attend(tape, e_c.tokens, e_i.tokens, params, CROSS_SCORES)?;
    Ok(Attended {
        tokens: TokenSequence::fused(out),
        weights,
    })
}

pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    x: &TokenSequence,
    params: &AttentionParams,
    label: &str,
) -> Result<Attended> {
    let (out, weights) = attend(tape, x.tokens, x.tokens, params, label)?;
    Ok(Attended {
        tokens: TokenSequence {
            tokens: out,
            provenance: x.provenance,
        },
        weights,
    })
}

/// Softmax over tokens of `<query, x_t> / sqrt(d)`; returns the 1 x d pooled
/// vector and the 1 x T weights.
pub fn attention_pooling<T: Real>(tape: &mut Tape<T>, x: Var, query: Var) -> Result<(Var, Var)> {
    let d = tape.value(x).cols();
    check_width(tape, "pooled", x, d)?;
    if tape.value(query).shape() != [d, 1] {
        return Err(Error::Shape(format!(
            "pooling query is {:?}, expected [{d}, 1]",
            tape.value(query).shape()
        )));
    }
    let scores = tape.matmul(x, query)?;
    let scores = tape.transpose(scores)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    let pooled = tape.matmul(weights, x)?;
    Ok((pooled, weights))
}

/// d -> d/2 (GELU) -> 1.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: bound.var(&format!("{prefix}.w1"))?,
            b1: bound.var(&format!("{prefix}.b1"))?,
            w2: bound.var(&format!("{prefix}.w2"))?,
            b2: bound.var(&format!("{prefix}.b2"))?,
        })
    }

    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) {
        let h = (d / 2).max(1);
        store.insert(format!("{prefix}.w1"), glorot(rng, d, h));
        store.insert(format!("{prefix}.b1"), Tensor::zeros(&[1, h]));
        store.insert(format!("{prefix}.w2"), glorot(rng, h, 1));
        store.insert(format!("{prefix}.b2"), Tensor::zeros(&[1, 1]));
    }
}

/// Logit of the true-progression class for a 1 x d input.
pub fn classify_logit<T: Real>(tape: &mut Tape<T>, z: Var, head: &HeadParams) -> Result<Var> {
    let h = tape.matmul(z, head.w1)?;
    let h = tape.add_row(h, head.b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, head.w2)?;
    tape.add_row(o, head.b2)
}

pub fn classify<T: Real>(tape: &mut Tape<T>, z: Var, head: &HeadParams) -> Result<Var> {
    let logit = classify_logit(tape, z, head)?;
    tape.sigmoid(logit)
}

/// Every parameter of the fusion block.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub cross: AttentionParams,
    pub fused: AttentionParams,
    pub pool_query: Var,
    pub head: HeadParams,
}

impl FusionParams {
    pub const PREFIX: &'static str = "fusion";

    pub fn bind(bound: &Bound) -> Result<Self> {
        Ok(Self {
            cross: AttentionParams::bind(bound, "fusion.cross")?,
            fused: AttentionParams::bind(bound, "fusion.self")?,
            pool_query: bound.var("fusion.pool.query")?,
            head: HeadParams::bind(bound, "fusion.head")?,
        })
    }

    pub fn init<T: Real>(store: &mut ParamStore<T>, d: usize, rng: &mut impl Rng) {
        AttentionParams::init(store, "fusion.cross", d, rng);
        AttentionParams::init(store, "fusion.self", d, rng);
        store.insert("fusion.pool.query", glorot(rng, d, 1));
        HeadParams::init(store, "fusion.head", d, rng);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub logit: Var,
    pub probability: Var,
    pub cross_weights: Var,
    pub self_weights: Var,
    pub pool_weights: Var,
}

/// Cross-attention, self-attention over `[E_i->c ; E_c]`, attention pooling,
/// then the head.
pub fn fusion_forward<T: Real>(
    tape: &mut Tape<T>,
    e_i: &TokenSequence,
    e_c: &TokenSequence,
    params: &FusionParams,
) -> Result<FusionOutput> {
    let cross = guided_cross_attention(tape, e_c, e_i, &params.cross)?;
    let joined = tape.concat_rows(&[cross.tokens.tokens, e_c.tokens])?;
    let fused = self_attention(tape, &TokenSequence::fused(joined), &params.fused, FUSED_SELF_SCORES)?;
    let (pooled, pool_weights) = attention_pooling(tape, fused.tokens.tokens, params.pool_query)?;
    let logit = classify_logit(tape, pooled, &params.head)?;
    let probability = tape.sigmoid(logit)?;
    Ok(FusionOutput {
        logit,
        probability,
        cross_weights: cross.weights,
        self_weights: fused.weights,
        pool_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::BindAs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn bind_eye(tape: &mut Tape, d: usize) -> AttentionParams {
        AttentionParams {
            wq: tape.constant(Tensor::eye(d)),
            wk: tape.constant(Tensor::eye(d)),
            wv: tape.constant(Tensor::eye(d)),
        }
    }

    #[test]
    fn single_token_cross_attention_returns_that_token() {
        let mut tape = Tape::new();
        let p = bind_eye(&mut tape, 3);
        let c = tape.constant(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]));
        let i = tape.constant(Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]));
        let out = guided_cross_attention(&mut tape, &TokenSequence::clinical(c), &TokenSequence::image(i), &p).unwrap();
        assert_eq!(tape.value(out.tokens.tokens).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(out.tokens.provenance, Provenance::Fused);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut tape = Tape::new();
        let p = bind_eye(&mut tape, 4);
        let c = tape.constant(Tensor::zeros(&[2, 3]));
        let i = tape.constant(Tensor::zeros(&[5, 4]));
        let r = guided_cross_attention(&mut tape, &TokenSequence::clinical(c), &TokenSequence::image(i), &p);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn swapped_roles_are_rejected() {
        let mut tape = Tape::new();
        let p = bind_eye(&mut tape, 2);
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let r = guided_cross_attention(&mut tape, &TokenSequence::image(a), &TokenSequence::clinical(a), &p);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn single_token_self_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let (x, wv) = (random(&mut rng, 1, 4), random(&mut rng, 4, 4));
        let expected = {
            let mut t = Tape::new();
            let (a, b) = (t.constant(x.clone()), t.constant(wv.clone()));
            let m = t.matmul(a, b).unwrap();
            t.value(m).clone()
        };
        let p = AttentionParams {
            wq: tape.constant(random(&mut rng, 4, 4)),
            wk: tape.constant(random(&mut rng, 4, 4)),
            wv: tape.constant(wv),
        };
        let xv = tape.constant(x);
        let out = self_attention(&mut tape, &TokenSequence::fused(xv), &p, "t").unwrap();
        assert_eq!(tape.value(out.tokens.tokens), &expected);
        assert_eq!(tape.value(out.weights).data(), &[1.0]);
    }

    #[test]
    fn pooling_of_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![0.5, -2.0, 0.5, -2.0, 0.5, -2.0]));
        let q = tape.constant(random(&mut rng, 2, 1));
        let (z, _) = attention_pooling(&mut tape, x, q).unwrap();
        assert!(tape.value(z).max_abs_diff(&Tensor::matrix(1, 2, vec![0.5, -2.0])) < 1e-15);
    }

    #[test]
    fn pooling_matches_hand_weighted_mean() {
        // x = [[1,0],[0,1],[1,1]], q = [ln 2 * sqrt 2, 0]: scores / sqrt 2 = [ln 2, 0, ln 2]
        // -> weights [2,1,2]/5 -> pooled [4/5, 3/5].
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let q = tape.constant(Tensor::matrix(2, 1, vec![2f64.ln() * 2f64.sqrt(), 0.0]));
        let (z, w) = attention_pooling(&mut tape, x, q).unwrap();
        assert!(tape.value(w).max_abs_diff(&Tensor::matrix(1, 3, vec![0.4, 0.2, 0.4])) < 1e-15);
        assert!(tape.value(z).max_abs_diff(&Tensor::matrix(1, 2, vec![0.8, 0.6])) < 1e-15);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut tape = Tape::new();
        let head = HeadParams {
            w1: tape.constant(Tensor::zeros(&[4, 2])),
            b1: tape.constant(Tensor::zeros(&[1, 2])),
            w2: tape.constant(Tensor::zeros(&[2, 1])),
            b2: tape.constant(Tensor::zeros(&[1, 1])),
        };
        let z = tape.constant(Tensor::matrix(1, 4, vec![1.0, -2.0, 3.0, 0.5]));
        let p = classify(&mut tape, z, &head).unwrap();
        assert_eq!(tape.value(p).item(), 0.5);
    }

    #[test]
    fn head_matches_hand_composition() {
        // z = [1, 2], w1 = [[0.1],[0.2]] -> h = 0.5, b1 = 0.1 -> 0.6,
        // gelu(0.6) = 0.3 (1 + tanh(sqrt(2/pi)(0.6 + 0.044715 * 0.216))), w2 = 2, b2 = -0.3.
        let mut tape = Tape::new();
        let head = HeadParams {
            w1: tape.constant(Tensor::matrix(2, 1, vec![0.1, 0.2])),
            b1: tape.constant(Tensor::matrix(1, 1, vec![0.1])),
            w2: tape.constant(Tensor::matrix(1, 1, vec![2.0])),
            b2: tape.constant(Tensor::matrix(1, 1, vec![-0.3])),
        };
        let z = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let p = classify(&mut tape, z, &head).unwrap();
        let g = 0.3 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (0.6 + 0.044715 * 0.216)).tanh());
        let expected = 1.0 / (1.0 + (-(2.0 * g - 0.3)).exp());
        assert!((tape.value(p).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn large_logit_pushes_probability_up() {
        let mut last = 0.0;
        for scale in [0.0, 1.0, 4.0, 16.0] {
            let mut tape = Tape::new();
            let head = HeadParams {
                w1: tape.constant(Tensor::filled(&[2, 1], scale)),
                b1: tape.constant(Tensor::zeros(&[1, 1])),
                w2: tape.constant(Tensor::filled(&[1, 1], scale)),
                b2: tape.constant(Tensor::zeros(&[1, 1])),
            };
            let z = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]));
            let pv = classify(&mut tape, z, &head).unwrap();
            let p = tape.value(pv).item();
            assert!(p >= last);
            last = p;
        }
        assert!(last > 0.999);
    }

    #[test]
    fn fusion_shape_trace() {
        let (m, n, d) = (4, 512, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        FusionParams::init(&mut store, d, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| BindAs::Frozen);
        let params = FusionParams::bind(&bound).unwrap();
        let e_i = tape.constant(random(&mut rng, n, d));
        let e_c = tape.constant(random(&mut rng, m, d));
        let out = fusion_forward(&mut tape, &TokenSequence::image(e_i), &TokenSequence::clinical(e_c), &params).unwrap();
        assert_eq!(tape.value(out.cross_weights).shape(), &[m, n]);
        assert_eq!(tape.value(out.self_weights).shape(), &[2 * m, 2 * m]);
        assert_eq!(tape.value(out.pool_weights).shape(), &[1, 2 * m]);
        let p = tape.value(out.probability).item();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(tape.flops().get(CROSS_SCORES), (m * n * d) as u64);
        assert_eq!(tape.flops().get(FUSED_SELF_SCORES), (4 * m * m * d) as u64);
    }
}

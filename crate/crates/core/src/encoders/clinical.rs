use rand::Rng;

use crate::attention::TokenSequence;
use crate::data::ClinicalInput;
use crate::error::{Error, Result};
use crate::params::{glorot, normal, Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// One affine lift per feature slot: token_j = x_j W_j + e_j, where x_j is
/// the slot's value vector (a scalar, or a one-hot block for categoricals).
#[derive(Clone, Debug)]
pub struct ClinicalEncoderParams {
    pub slots: Vec<(Var, Var)>,
}

impl ClinicalEncoderParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, widths: &[usize], d: usize, rng: &mut impl Rng) {
        for (j, &k) in widths.iter().enumerate() {
            store.insert(format!("clinical.slot{j}.w"), glorot(rng, k, d));
            store.insert(format!("clinical.slot{j}.e"), normal(rng, &[1, d], 0.1));
        }
    }

    pub fn bind(bound: &Bound, slots: usize) -> Result<Self> {
        let slots = (0..slots)
            .map(|j| {
                Ok((
                    bound.var(&format!("clinical.slot{j}.w"))?,
                    bound.var(&format!("clinical.slot{j}.e"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { slots })
    }
}

/// Lifts M feature slots to M tokens (E_c, M x d).
pub fn clinical_encode<T: Real>(
    tape: &mut Tape<T>,
    input: &ClinicalInput,
    params: &ClinicalEncoderParams,
) -> Result<TokenSequence> {
    if input.slots.len() != params.slots.len() {
        return Err(Error::Contract(format!(
            "clinical encoder has {} slots, got {} features",
            params.slots.len(),
            input.slots.len()
        )));
    }
    let mut tokens = Vec::with_capacity(input.slots.len());
    for (values, &(w, e)) in input.slots.iter().zip(&params.slots) {
        let x = tape.constant(Tensor::new(
            vec![1, values.len()],
            values.iter().map(|&v| T::from_f64(v)).collect(),
        )?);
        let lifted = tape.matmul(x, w)?;
        tokens.push(tape.add(lifted, e)?);
    }
    Ok(TokenSequence::clinical(tape.concat_rows(&tokens)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::BindAs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encode(store: &ParamStore, input: &ClinicalInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| BindAs::Frozen);
        let params = ClinicalEncoderParams::bind(&bound, store.len() / 2)?;
        let out = clinical_encode(&mut tape, input, &params)?;
        Ok(tape.value(out.tokens).clone())
    }

    fn scalar_input(v: &[f64]) -> ClinicalInput {
        ClinicalInput {
            slots: v.iter().map(|&x| vec![x]).collect(),
        }
    }

    #[test]
    fn four_features_give_four_tokens() {
        let mut store = ParamStore::new();
        ClinicalEncoderParams::init(&mut store, &[1, 1, 3, 1], 16, &mut ChaCha8Rng::seed_from_u64(0));
        let input = ClinicalInput {
            slots: vec![vec![0.3], vec![-1.2], vec![0.0, 1.0, 0.0], vec![2.0]],
        };
        assert_eq!(encode(&store, &input).unwrap().shape(), &[4, 16]);
    }

    #[test]
    fn zero_weights_leave_embeddings() {
        let mut store = ParamStore::new();
        ClinicalEncoderParams::init(&mut store, &[1, 1], 4, &mut ChaCha8Rng::seed_from_u64(1));
        for j in 0..2 {
            store.insert(format!("clinical.slot{j}.w"), Tensor::zeros(&[1, 4]));
        }
        let out = encode(&store, &scalar_input(&[5.0, -7.0])).unwrap();
        for j in 0..2 {
            assert_eq!(out.row(j), store.get(&format!("clinical.slot{j}.e")).unwrap().data());
        }
    }

    #[test]
    fn slots_are_not_interchangeable() {
        let mut store = ParamStore::new();
        ClinicalEncoderParams::init(&mut store, &[1, 1, 1], 4, &mut ChaCha8Rng::seed_from_u64(2));
        let a = encode(&store, &scalar_input(&[1.0, 2.0, 3.0])).unwrap();
        let b = encode(&store, &scalar_input(&[3.0, 2.0, 1.0])).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn wrong_feature_count() {
        let mut store = ParamStore::new();
        ClinicalEncoderParams::init(&mut store, &[1, 1], 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(matches!(encode(&store, &scalar_input(&[1.0])), Err(Error::Contract(_))));
    }
}

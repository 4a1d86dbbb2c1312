//! Finite-difference checks of composed models, every parameter included.

mod common;

use common::{param_gradcheck, rng, small_patch};
use glioprog::attention::{fusion_forward, FusionParams, TokenSequence};
use glioprog::data::ClinicalInput;
use glioprog::encoders::{clinical_encode, vit_forward, ClinicalEncoderParams, VitParams};
use glioprog::params::{normal, ParamStore};
use glioprog::ssl::{init_ssl_params, prepare_item, ssl_objective, SslConfig};
use glioprog::tensor::Tensor;

const COMPOSED_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn clinical_input() -> ClinicalInput {
    ClinicalInput {
        slots: vec![vec![0.7], vec![0.0, 1.0, 0.0], vec![-1.2]],
    }
}

#[test]
fn fusion_forward_matches_finite_differences() {
    let mut r = rng(21);
    let d = 8;
    let mut store = ParamStore::<f64>::new();
    FusionParams::init(&mut store, d, &mut r);
    ClinicalEncoderParams::init(&mut store, &[1, 3, 1], d, &mut r);
    store.insert("input.image_tokens", normal(&mut r, &[6, d], 1.0));
    let err = param_gradcheck(&store, EPS, |tape, bound| {
        let e_i = TokenSequence::image(bound.var("input.image_tokens")?);
        let e_c = clinical_encode(tape, &clinical_input(), &ClinicalEncoderParams::bind(bound, 3)?)?;
        let out = fusion_forward(tape, &e_i, &e_c, &FusionParams::bind(bound)?)?;
        tape.bce_with_logits(out.logit, &[1.0])
    });
    assert!(err < COMPOSED_TOL, "fusion relative error {err}");
}

#[test]
fn vit_encoder_matches_finite_differences() {
    let mut r = rng(22);
    let cfg = small_patch(8, 4, 8, 2);
    let mut store = ParamStore::<f64>::new();
    VitParams::init(&mut store, &cfg, &mut r).unwrap();
    let patches: Tensor = normal(&mut r, &[8, cfg.patch_len()], 1.0);
    let probe: Tensor = normal(&mut r, &[8, 8], 1.0);
    let err = param_gradcheck(&store, EPS, |tape, bound| {
        let x = tape.constant(patches.clone());
        let tokens = vit_forward(tape, x, &VitParams::bind(bound, &cfg)?)?.tokens;
        let w = tape.constant(probe.clone());
        let y = tape.mul(tokens, w)?;
        tape.sum(y)
    });
    assert!(err < COMPOSED_TOL, "vit relative error {err}");
}

#[test]
fn full_classifier_matches_finite_differences() {
    let mut r = rng(23);
    let cfg = small_patch(8, 4, 8, 1);
    let mut store = ParamStore::<f64>::new();
    VitParams::init(&mut store, &cfg, &mut r).unwrap();
    ClinicalEncoderParams::init(&mut store, &[1, 3, 1], cfg.dim, &mut r);
    FusionParams::init(&mut store, cfg.dim, &mut r);
    let patches: Tensor = normal(&mut r, &[8, cfg.patch_len()], 1.0);
    let err = param_gradcheck(&store, EPS, |tape, bound| {
        let x = tape.constant(patches.clone());
        let e_i = vit_forward(tape, x, &VitParams::bind(bound, &cfg)?)?;
        let e_c = clinical_encode(tape, &clinical_input(), &ClinicalEncoderParams::bind(bound, 3)?)?;
        let out = fusion_forward(tape, &e_i, &e_c, &FusionParams::bind(bound)?)?;
        tape.bce_with_logits(out.logit, &[0.0])
    });
    assert!(err < COMPOSED_TOL, "classifier relative error {err}");
}

#[test]
fn joint_pretext_objective_matches_finite_differences() {
    let mut r = rng(24);
    let cfg = small_patch(8, 4, 8, 1);
    let ssl = SslConfig {
        ratio: 0.5,
        temperature: 0.5,
        batch_size: 2,
        ..SslConfig::default()
    };
    let volumes = common::cohort(4, 2, 8, 1.0, 3).volumes;
    let batch: Vec<_> = volumes[..2]
        .iter()
        .enumerate()
        .map(|(i, v)| prepare_item::<f64>(v, &cfg, &ssl, i as u64).unwrap())
        .collect();
    let mut store = ParamStore::<f64>::new();
    init_ssl_params(&mut store, &cfg, &mut r).unwrap();
    let err = param_gradcheck(&store, EPS, |tape, bound| {
        Ok(ssl_objective(tape, bound, &cfg, &ssl, &batch)?.total)
    });
    assert!(err < COMPOSED_TOL, "ssl relative error {err}");
}

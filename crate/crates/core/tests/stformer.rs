mod common;

use common::{config, input, live_model, objective};
use difflight::datapipe::SLOT;
use difflight::model::{NoiseModel, NoiseModelKind};
use difflight::trainer::{TrainConfig, TrainedModel};
use numcore::{grad_check, GradCheckOptions, Precision};
use proptest::prelude::*;
use trafficsim::NetworkSpec;

#[test]
fn stformer_gradients_match_finite_differences() {
    let (f, params) = objective(NoiseModelKind::Stformer);
    // a 1e-4 step keeps the 64-bit difference quotient clear of roundoff
    for (precision, tol) in [(Precision::F64, 1e-6), (Precision::F32, 1e-3)] {
        let opts = GradCheckOptions { eps: 1e-4, coordinates: 50, precision, seed: 4 };
        let rep = grad_check(&f, &params, &opts).unwrap();
        assert!(rep.max_rel_error <= tol, "{precision:?}: {}", rep.max_rel_error);
    }
}

#[test]
fn unet_stub_gradients_match_finite_differences() {
    let (f, params) = objective(NoiseModelKind::UnetStub);
    let opts = GradCheckOptions { eps: 1e-4, coordinates: 30, precision: Precision::F64, seed: 5 };
    let rep = grad_check(&f, &params, &opts).unwrap();
    assert!(rep.max_rel_error <= 1e-6, "{}", rep.max_rel_error);
}

#[test]
fn fresh_model_predicts_zero_noise() {
    let m = NoiseModel::new(config(8, NoiseModelKind::Stformer), 1).unwrap();
    let out = m.predict(&[input(8, 1, true)]).unwrap();
    assert!(out[0].iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_input_shape_is_a_contract_error() {
    let m = NoiseModel::new(config(8, NoiseModelKind::Stformer), 1).unwrap();
    let mut bad = input(8, 1, true);
    bad.feed.pop();
    assert!(m.predict(&[bad]).is_err());
    let mut bad = input(8, 1, true);
    bad.k = 0;
    assert!(m.predict(&[bad]).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let net = NetworkSpec::grid(1, 1);
    let cfg = TrainConfig { model: config(8, NoiseModelKind::Stformer), invdyn_hidden: 8, ..TrainConfig::default() };
    let mut m = TrainedModel::untrained(&net, &cfg).unwrap();
    m.noise = live_model(cfg.model, 2);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = TrainedModel::load(dir.path()).unwrap();
    let batch = [input(8, 5, true), input(8, 6, false)];
    assert_eq!(m.noise.predict(&batch).unwrap(), back.noise.predict(&batch).unwrap());
    assert_eq!(back.noise.config, m.noise.config);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prediction_ignores_batch_companions(seed in 0u64..10_000) {
        let m = live_model(config(8, NoiseModelKind::Stformer), 7);
        let a = input(8, seed, true);
        let b = input(8, seed + 1, false);
        let alone = m.predict(std::slice::from_ref(&a)).unwrap();
        let paired = m.predict(&[b, a]).unwrap();
        prop_assert_eq!(&alone[0], &paired[1]);
    }

    #[test]
    fn output_is_finite(seed in 0u64..10_000, reward in any::<bool>()) {
        let m = live_model(config(8, NoiseModelKind::Stformer), seed);
        let out = m.predict(&[input(8, seed, reward)]).unwrap();
        prop_assert!(out[0].iter().all(|v| v.is_finite()));
        prop_assert_eq!(out[0].len(), 8 * SLOT);
    }
}


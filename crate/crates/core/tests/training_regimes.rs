//! Training-regime contracts: the joint regimes degenerate bitwise to
//! standard training when their knobs are zero, the summed loss is
//! gradient-additive, and frozen parameter groups never move.

mod common;

use advlab_core::attack::AttackSpec;
use advlab_core::data::LabeledDataset;
use advlab_core::nn::{builders, compose_aec, Classifier, EncoderClassifier, Model};
use advlab_core::train::{
    train_joint_alternative, train_joint_regularized, train_pgd_adversarial, train_standard,
    train_standard_ec, TrainConfig,
};
use advlab_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const IMG: [usize; 3] = [1, 4, 4];
const CLASSES: usize = 4;

fn tiny_dataset(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::rand_uniform(&[n, IMG[0], IMG[1], IMG[2]], 0.0, 1.0, &mut rng);
    let labels = (0..n).map(|i| i % CLASSES).collect();
    LabeledDataset::from_parts(images, labels, CLASSES).unwrap()
}

fn tiny_ec(seed: u64) -> EncoderClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    builders::build_encoder_classifier(&IMG, CLASSES, &mut rng).unwrap()
}

fn params_of(m: &Model) -> Vec<Tensor> {
    m.params().into_iter().map(|(_, t)| t.clone()).collect()
}

fn assert_models_bitwise_eq(a: &Model, b: &Model, what: &str) {
    for ((name, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(pa, pb, "{what}: parameter {name} differs");
    }
}

#[test]
fn lambda_zero_is_bitwise_standard_training() {
    let data = tiny_dataset(24, 1);
    let mut ec_joint = tiny_ec(7);
    let mut ec_std = tiny_ec(7);
    let cfg_joint = TrainConfig::standard(2, 8, 42).with_lambda(0.0);
    let cfg_std = TrainConfig::standard(2, 8, 42);
    train_joint_regularized(&mut ec_joint, &data, None, &cfg_joint).unwrap();
    train_standard_ec(&mut ec_std, &data, None, &cfg_std).unwrap();
    assert_models_bitwise_eq(&ec_joint.encoder, &ec_std.encoder, "lambda=0 encoder");
    assert_models_bitwise_eq(&ec_joint.head, &ec_std.head, "lambda=0 head");
    // decoder received only zero gradients
    assert_models_bitwise_eq(&ec_joint.decoder, &tiny_ec(7).decoder, "lambda=0 decoder");
}

#[test]
fn gamma_zero_is_bitwise_standard_training() {
    let data = tiny_dataset(24, 2);
    let mut ec_alt = tiny_ec(9);
    let mut ec_std = tiny_ec(9);
    let cfg_alt = TrainConfig::standard(2, 8, 43).with_gamma(0);
    let cfg_std = TrainConfig::standard(2, 8, 43);
    train_joint_alternative(&mut ec_alt, &data, None, &cfg_alt).unwrap();
    train_standard_ec(&mut ec_std, &data, None, &cfg_std).unwrap();
    assert_models_bitwise_eq(&ec_alt.encoder, &ec_std.encoder, "gamma=0 encoder");
    assert_models_bitwise_eq(&ec_alt.head, &ec_std.head, "gamma=0 head");
    assert_models_bitwise_eq(&ec_alt.decoder, &tiny_ec(9).decoder, "gamma=0 decoder");
}

#[test]
fn joint_regimes_are_deterministic() {
    let data = tiny_dataset(24, 3);
    let cfg = TrainConfig::standard(2, 8, 44).with_gamma(2);
    let mut a = tiny_ec(11);
    let mut b = tiny_ec(11);
    train_joint_alternative(&mut a, &data, None, &cfg).unwrap();
    train_joint_alternative(&mut b, &data, None, &cfg).unwrap();
    assert_models_bitwise_eq(&a.encoder, &b.encoder, "determinism encoder");
    assert_models_bitwise_eq(&a.decoder, &b.decoder, "determinism decoder");
    assert_models_bitwise_eq(&a.head, &b.head, "determinism head");
}

/// d(L_ce + lambda L_rec)/dtheta == d(L_ce)/dtheta + lambda d(L_rec)/dtheta
/// for the shared encoder parameters, within 1e-10.
#[test]
fn joint_loss_gradient_additivity() {
    let data = tiny_dataset(16, 4);
    let ec = tiny_ec(13);
    let (x, y) = data.batch(0, 16).unwrap();
    let lambda = 2.5;

    // combined backward
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let joint = ec.forward_joint(&tape, xv).unwrap();
    let ce = joint.logits.cross_entropy(&y, 1.0).unwrap();
    let rec = joint.reconstruction.mse(xv).unwrap();
    let loss = ce.add(rec.scale(lambda).unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let combined: Vec<Tensor> = joint
        .encoder_params
        .iter()
        .map(|v| grads.expect(*v).unwrap().clone())
        .collect();

    // separate backwards
    let tape_ce = Tape::new();
    let xv_ce = tape_ce.constant(x.clone());
    let (latent, enc_vars_ce) = ec.encoder.forward_bound(&tape_ce, xv_ce).unwrap();
    let (logits, _) = ec.head.forward_bound(&tape_ce, latent).unwrap();
    let ce_only = logits.cross_entropy(&y, 1.0).unwrap();
    let g_ce = tape_ce.backward(ce_only).unwrap();

    let tape_rec = Tape::new();
    let xv_rec = tape_rec.constant(x);
    let (latent, enc_vars_rec) = ec.encoder.forward_bound(&tape_rec, xv_rec).unwrap();
    let (recon, _) = ec.decoder.forward_bound(&tape_rec, latent).unwrap();
    let rec_only = recon.mse(xv_rec).unwrap();
    let g_rec = tape_rec.backward(rec_only).unwrap();

    for ((cg, ce_var), rec_var) in combined.iter().zip(&enc_vars_ce).zip(&enc_vars_rec) {
        let a = g_ce.expect(*ce_var).unwrap();
        let b = g_rec.expect(*rec_var).unwrap();
        let expected = a.add(&b.scale(lambda).unwrap()).unwrap();
        let delta = common::max_abs_diff(cg, &expected);
        assert!(delta < 1e-10, "additivity violated: |delta| = {delta}");
    }
}

#[test]
fn pgd_training_with_eps_zero_is_standard_training() {
    let data = tiny_dataset(24, 5);
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        Model::new(
            &IMG,
            vec![
                advlab_core::nn::LayerSpec::Flatten,
                advlab_core::nn::LayerSpec::Dense { input: 16, output: CLASSES },
            ],
            &mut rng,
        )
        .unwrap()
    };
    let mut plain = build();
    let mut adv = build();
    let cfg_std = TrainConfig::standard(2, 8, 50);
    let mut pgd_zero = AttackSpec::pgd(0);
    pgd_zero.step_size = 0.0;
    let cfg_adv = TrainConfig::standard(2, 8, 50).with_attack(pgd_zero);
    train_standard(&mut plain, &data, None, &cfg_std).unwrap();
    train_pgd_adversarial(&mut adv, &data, None, &cfg_adv).unwrap();
    assert_models_bitwise_eq(&plain, &adv, "pgd eps=0");
}

#[test]
fn frozen_autoencoder_is_bitwise_invariant_under_composed_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ae = builders::build_autoencoder(&IMG, &mut rng).unwrap();
    ae.set_frozen(true);
    let classifier = Model::new(
        &IMG,
        vec![
            advlab_core::nn::LayerSpec::Flatten,
            advlab_core::nn::LayerSpec::Dense { input: 16, output: CLASSES },
        ],
        &mut rng,
    )
    .unwrap();
    let frozen_before = params_of(&ae);
    let mut aec = compose_aec(ae, classifier).unwrap();
    let data = tiny_dataset(16, 6);
    let cls_before = params_of(&aec.classifier);

    // a few manual joint steps through the composition
    let mut adam = advlab_core::train::Adam::new(1e-3);
    for _ in 0..4 {
        let (x, y) = data.batch(0, 16).unwrap();
        let tape = Tape::new();
        let xv = tape.constant(x);
        let (recon, ae_vars) = aec.autoencoder.forward_bound(&tape, xv).unwrap();
        let (logits, c_vars) = aec.classifier.forward_bound(&tape, recon).unwrap();
        let loss = logits.cross_entropy(&y, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(ae_vars.iter().all(|v| grads.get(*v).is_none()), "frozen params got gradients");
        for (i, (var, (_, param))) in
            c_vars.iter().zip(aec.classifier.params_mut().into_iter()).enumerate()
        {
            if let Some(g) = grads.get(*var) {
                adam.step(i, param, g).unwrap();
            }
        }
    }

    for (before, (_, after)) in frozen_before.iter().zip(aec.autoencoder.params()) {
        assert_eq!(before, after, "frozen AE parameter changed");
    }
    let changed = cls_before
        .iter()
        .zip(aec.classifier.params())
        .any(|(b, (_, a))| b != a);
    assert!(changed, "classifier should have trained");
}

#[test]
fn identity_autoencoder_composition_is_prediction_neutral() {
    // an empty layer list is the identity map, standing in for a
    // pass-through autoencoder
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let identity_ae = Model::new(&IMG, vec![], &mut rng).unwrap();
    let classifier = Model::new(
        &IMG,
        vec![
            advlab_core::nn::LayerSpec::Flatten,
            advlab_core::nn::LayerSpec::Dense { input: 16, output: CLASSES },
        ],
        &mut rng,
    )
    .unwrap();
    let aec = compose_aec(identity_ae, classifier.clone()).unwrap();
    let data = tiny_dataset(32, 7);
    let (x, _) = data.batch(0, 32).unwrap();
    assert_eq!(aec.predict(&x).unwrap(), classifier.predict(&x).unwrap());
    let (_, acc_aec) = advlab_core::train::evaluate(&aec, &data, 16, 1.0).unwrap();
    let (_, acc_c) = advlab_core::train::evaluate(&classifier, &data, 16, 1.0).unwrap();
    assert_eq!(acc_aec, acc_c);
}

#[test]
fn composed_aec_input_gradient_is_nonzero() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let ae = builders::build_autoencoder(&IMG, &mut rng).unwrap();
    let classifier = Model::new(
        &IMG,
        vec![
            advlab_core::nn::LayerSpec::Flatten,
            advlab_core::nn::LayerSpec::Dense { input: 16, output: CLASSES },
        ],
        &mut rng,
    )
    .unwrap();
    let aec = compose_aec(ae, classifier).unwrap();
    let data = tiny_dataset(8, 8);
    let (x, y) = data.batch(0, 8).unwrap();
    let handle = advlab_core::attack::AttackHandle::new(&aec);
    let (_, grad) = handle.loss_input_grad(&x, &y).unwrap();
    let l1: f64 = grad.data().iter().map(|v| v.abs()).sum();
    assert!(l1 > 0.0, "gradient does not reach the raw input through the AE");
}

//! Attack invariant battery, shared between the property suite and the
//! acceptance gate. Each function runs a configured number of sampled
//! cases over small randomized models and panics on the first violation;
//! it returns the number of cases exercised so the acceptance criterion
//! can assert the total.

use advlab_core::attack::{
    blackbox_attack, cw, deepfool, fgsm, pgd, run_attack, AttackHandle, AttackSpec,
};
use advlab_core::nn::{Activation, Classifier, LayerSpec, Model};
use advlab_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 4;
pub const CLASSES: usize = 3;

/// Small dense classifier over a DIM-pixel "image" in [0,1].
pub fn tiny_model(rng: &mut ChaCha8Rng) -> Model {
    Model::new(
        &[DIM],
        vec![
            LayerSpec::Dense { input: DIM, output: 8 },
            LayerSpec::Activation { function: Activation::Relu },
            LayerSpec::Dense { input: 8, output: CLASSES },
        ],
        rng,
    )
    .expect("tiny model")
}

fn batch(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Vec<usize>) {
    let x = Tensor::rand_uniform(&[n, DIM], 0.0, 1.0, rng);
    let y = (0..n).map(|_| rng.random_range(0..CLASSES)).collect();
    (x, y)
}

/// eps = 0 is the bitwise identity for every family.
pub fn eps_zero_identity(runs: usize, batch_size: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for run in 0..runs {
        let model = tiny_model(&mut rng);
        let handle = AttackHandle::new(&model);
        let (x, y) = batch(&mut rng, batch_size);
        let specs = [
            AttackSpec::fgsm(0),
            AttackSpec::pgd(0).with_seed(run as u64),
            {
                let mut s = AttackSpec::cw(0.0).with_steps(5);
                s.epsilon = 0;
                s
            },
            {
                let mut s = AttackSpec::deepfool().with_steps(5);
                s.epsilon = 0;
                s
            },
        ];
        for spec in specs {
            let b = run_attack(&handle, &x, &y, &spec).expect("attack run");
            assert_eq!(
                b.perturbed, x,
                "eps=0 not identity for {:?} on run {run}",
                spec.family
            );
            cases += batch_size;
        }
    }
    cases
}

/// FGSM/PGD never leave the L-infinity ball after clipping.
pub fn linf_ball_containment(runs: usize, batch_size: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for run in 0..runs {
        let model = tiny_model(&mut rng);
        let handle = AttackHandle::new(&model);
        let (x, y) = batch(&mut rng, batch_size);
        let eps: u32 = rng.random_range(1..=120);
        for spec in [
            AttackSpec::fgsm(eps),
            AttackSpec::pgd(eps).with_steps(rng.random_range(1..8usize)).with_seed(run as u64),
        ] {
            let b = run_attack(&handle, &x, &y, &spec).expect("attack run");
            let bound = spec.eps_unit() + 1e-12;
            for (i, &d) in b.linf.iter().enumerate() {
                assert!(
                    d <= bound,
                    "sample {i} run {run} family {:?}: linf {d} > {bound}",
                    spec.family
                );
            }
            assert!(b.perturbed.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            cases += batch_size;
        }
    }
    cases
}

/// PGD with one step of size eps and no random start is exactly FGSM.
pub fn pgd_single_step_is_fgsm(runs: usize, batch_size: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for run in 0..runs {
        let model = tiny_model(&mut rng);
        let handle = AttackHandle::new(&model);
        let (x, y) = batch(&mut rng, batch_size);
        let eps: u32 = rng.random_range(0..=100);
        let mut spec = AttackSpec::pgd(eps).with_steps(1);
        spec.random_start = false;
        spec.step_size = eps as f64 / 255.0;
        let a = fgsm(&handle, &x, &y, &AttackSpec::fgsm(eps)).expect("fgsm");
        let b = pgd(&handle, &x, &y, &spec).expect("pgd");
        assert_eq!(a.perturbed, b.perturbed, "run {run}: pgd(1, eps) != fgsm");
        cases += batch_size;
    }
    cases
}

/// A DeepFool success flag implies the predicted label changed.
pub fn deepfool_success_implies_flip(runs: usize, batch_size: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for run in 0..runs {
        let model = tiny_model(&mut rng);
        let handle = AttackHandle::new(&model);
        let (x, _) = batch(&mut rng, batch_size);
        let spec = AttackSpec::deepfool().with_steps(10);
        let b = deepfool(&handle, &x, &spec).expect("deepfool");
        for i in 0..b.len() {
            if b.success[i] {
                assert_ne!(
                    b.original_predictions[i], b.adversarial_predictions[i],
                    "run {run} sample {i}: success without label change"
                );
            }
        }
        cases += batch_size;
    }
    cases
}

/// A CW success implies margin >= c at the returned point; failures return
/// the original pixels.
pub fn cw_success_implies_margin(runs: usize, batch_size: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for run in 0..runs {
        let model = tiny_model(&mut rng);
        let handle = AttackHandle::new(&model);
        let (x, y) = batch(&mut rng, batch_size);
        let c = [0.0, 0.2][run % 2];
        let spec = AttackSpec::cw(c).with_steps(40).with_search_steps(3);
        let b = cw(&handle, &x, &y, &spec).expect("cw");
        let logits = handle.logits(&b.perturbed).expect("logits");
        let m = logits.shape()[1];
        for i in 0..b.len() {
            let moved = b.l2[i] > 0.0;
            if moved {
                // a returned adversarial point must flip the label and
                // honor the confidence margin
                let row = &logits.data()[i * m..(i + 1) * m];
                let zy = row[y[i]];
                let zo = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != y[i])
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_ne!(
                    b.adversarial_predictions[i], y[i],
                    "run {run} sample {i}: moved but label kept"
                );
                assert!(
                    zo - zy >= c,
                    "run {run} sample {i}: margin {} < c {c}",
                    zo - zy
                );
            } else {
                // untouched sample: failure is data, pixels stay original
                let s = &b.perturbed.data()[i * DIM..(i + 1) * DIM];
                let o = &x.data()[i * DIM..(i + 1) * DIM];
                assert_eq!(s, o);
            }
        }
        cases += batch_size;
    }
    cases
}

/// Temperature rescaling never changes the argmax.
pub fn temperature_argmax_invariance(cases_wanted: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    while cases < cases_wanted {
        let n = 50;
        let logits = Tensor::rand_uniform(&[n, CLASSES], -5.0, 5.0, &mut rng);
        let t: f64 = 10f64.powf(rng.random_range(-2.0..2.0));
        let plain = logits.argmax_rows().expect("argmax");
        let scaled = logits.scale(1.0 / t).expect("scale").softmax_rows().expect("softmax");
        let rescaled = scaled.argmax_rows().expect("argmax");
        assert_eq!(plain, rescaled, "temperature {t} changed the argmax");
        cases += n;
    }
    cases
}

/// The black-box target's gradient counter reads zero for every run, and
/// self-transfer (substitute == target model) reproduces white-box outputs.
pub fn blackbox_counter_and_self_transfer(runs: usize, batch_size: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for run in 0..runs {
        let target_model = tiny_model(&mut rng);
        let sub_model = tiny_model(&mut rng);
        let (x, y) = batch(&mut rng, batch_size);
        let spec = if run % 2 == 0 {
            AttackSpec::fgsm(60)
        } else {
            AttackSpec::pgd(60).with_steps(5).with_seed(run as u64)
        };

        let sub = AttackHandle::new(&sub_model);
        let tgt = AttackHandle::new(&target_model);
        let (_, _) = blackbox_attack(&sub, &tgt, &x, &y, &spec).expect("blackbox");
        assert_eq!(tgt.grad_evals(), 0, "run {run}: target gradient counter nonzero");

        // self-transfer degenerates to the white-box attack
        let sub_same = AttackHandle::new(&target_model);
        let tgt_same = AttackHandle::new(&target_model);
        let (bb, _) = blackbox_attack(&sub_same, &tgt_same, &x, &y, &spec).expect("self transfer");
        let white = run_attack(&AttackHandle::new(&target_model), &x, &y, &spec).expect("white");
        assert_eq!(bb.perturbed, white.perturbed, "run {run}: self-transfer != white-box");
        assert_eq!(tgt_same.grad_evals(), 0);
        cases += 2 * batch_size;
    }
    cases
}

/// Run the whole battery; returns total sampled cases.
pub fn run_all(seed: u64) -> usize {
    let mut total = 0;
    total += eps_zero_identity(7, 100, seed);
    total += linf_ball_containment(13, 100, seed ^ 1);
    total += pgd_single_step_is_fgsm(15, 100, seed ^ 2);
    total += deepfool_success_implies_flip(10, 100, seed ^ 3);
    total += cw_success_implies_margin(6, 50, seed ^ 4);
    total += temperature_argmax_invariance(1500, seed ^ 5);
    total += blackbox_counter_and_self_transfer(5, 100, seed ^ 6);
    total
}

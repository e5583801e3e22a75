// Scratch calibration driver (not part of the deliverable surface):
// trains the MNIST models with candidate hyperparameters and prints the
// table cells the acceptance bands care about.

use advlab_core::analysis::{adversarial_accuracy, blackbox_accuracy, clean_accuracy, Setting};
use advlab_core::attack::AttackSpec;
use advlab_core::checkpoint;
use advlab_core::data::{load_mnist_idx, LabeledDataset};
use advlab_core::nn::{builders, compose_aec, Classifier, Model};
use advlab_core::train::{
    evaluate, reconstruction_mse, train_autoencoder, train_standard, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

fn cache_dir() -> PathBuf {
    PathBuf::from("/tmp/advlab-calibration")
}

fn load_or_train(
    name: &str,
    build: impl FnOnce() -> Model,
    train: impl FnOnce(&mut Model),
) -> Model {
    let dir = cache_dir().join(name);
    if let Ok((model, _)) = checkpoint::load_model(&dir) {
        eprintln!("[cache] {name}");
        return model;
    }
    let mut model = build();
    let t = Instant::now();
    train(&mut model);
    eprintln!("[train] {name}: {:.1}s", t.elapsed().as_secs_f64());
    checkpoint::save_model(&dir, &model, name, 0, BTreeMap::new()).unwrap();
    model
}

fn subset(data: &LabeledDataset, n: usize) -> LabeledDataset {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    let (images, labels) = data.gather(&idx).unwrap();
    LabeledDataset::from_parts(images, labels, data.num_classes).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let stage = args.first().map(String::as_str).unwrap_or("all");

    let dir = PathBuf::from("data/mnist");
    let train_ds = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let test_ds = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    eprintln!("mnist loaded: {} train / {} test", train_ds.len(), test_ds.len());

    let c_epochs: usize = std::env::var("C_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(6);
    let ae_epochs: usize =
        std::env::var("AE_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(4);

    let c = load_or_train(
        &format!("lenet5-e{c_epochs}"),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            builders::build_lenet5(10, &[1, 28, 28], &mut rng).unwrap()
        },
        |m| {
            let cfg = TrainConfig::standard(c_epochs, 64, 100);
            let rep = train_standard(m, &train_ds, Some(&test_ds), &cfg).unwrap();
            for e in &rep.history {
                eprintln!("  C epoch {} {}: loss {:.4} acc {:.2}", e.epoch, e.split, e.loss, e.accuracy);
            }
        },
    );
    let (_, c_clean) = evaluate(&c, &test_ds, 256, 1.0).unwrap();
    println!("C clean: {c_clean:.2}");

    let ae = load_or_train(
        &format!("ae-e{ae_epochs}"),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(200);
            builders::build_autoencoder(&[1, 28, 28], &mut rng).unwrap()
        },
        |m| {
            let cfg = TrainConfig::standard(ae_epochs, 64, 200);
            let rep = train_autoencoder(m, &train_ds, Some(&test_ds), &cfg).unwrap();
            for e in &rep.history {
                eprintln!("  AE epoch {} {}: mse {:.5}", e.epoch, e.split, e.loss);
            }
        },
    );
    let mse = reconstruction_mse(&ae, &test_ds, 256).unwrap();
    println!("AE test mse: {mse:.5}");

    let mut frozen_ae = ae.clone();
    frozen_ae.set_frozen(true);
    let aec = compose_aec(frozen_ae, c.clone()).unwrap();
    let (_, aec_clean) = evaluate(&aec, &test_ds, 256, 1.0).unwrap();
    println!("AE-C clean: {aec_clean:.2} (delta {:.2})", (c_clean - aec_clean).abs());

    if stage == "clean" {
        return;
    }

    let quick = subset(&test_ds, 1000);
    let t = Instant::now();
    for eps in [20u32, 80] {
        let row_c = adversarial_accuracy(&c, "c", &quick, &AttackSpec::fgsm(eps)).unwrap();
        let row_a = adversarial_accuracy(&aec, "aec", &quick, &AttackSpec::fgsm(eps)).unwrap();
        println!("FGSM eps={eps}: C {:.2}  AE-C {:.2}", row_c.accuracy, row_a.accuracy);
    }
    eprintln!("  fgsm time {:.1}s", t.elapsed().as_secs_f64());

    if stage == "fgsm" {
        return;
    }

    let t = Instant::now();
    for eps in [20u32, 80] {
        let row_c =
            adversarial_accuracy(&c, "c", &quick, &AttackSpec::pgd(eps).with_seed(1)).unwrap();
        let row_a =
            adversarial_accuracy(&aec, "aec", &quick, &AttackSpec::pgd(eps).with_seed(1)).unwrap();
        println!("PGD eps={eps}: C {:.2}  AE-C {:.2}", row_c.accuracy, row_a.accuracy);
    }
    eprintln!("  pgd time {:.1}s", t.elapsed().as_secs_f64());

    if stage == "pgd" {
        return;
    }

    if stage == "df" || stage == "all" {
        let dfq = subset(&test_ds, 500);
        let t = Instant::now();
        let row_c = adversarial_accuracy(&c, "c", &dfq, &AttackSpec::deepfool()).unwrap();
        let row_a = adversarial_accuracy(&aec, "aec", &dfq, &AttackSpec::deepfool()).unwrap();
        println!("DF: C {:.2}  AE-C {:.2}", row_c.accuracy, row_a.accuracy);
        eprintln!("  df time {:.1}s", t.elapsed().as_secs_f64());
    }

    if stage == "cw" || stage == "all" {
        let cwq = subset(&test_ds, 300);
        let spec = AttackSpec::cw(0.0).with_steps(120).with_search_steps(4);
        let t = Instant::now();
        let row_c = adversarial_accuracy(&c, "c", &cwq, &spec).unwrap();
        eprintln!("  cw C time {:.1}s", t.elapsed().as_secs_f64());
        let t = Instant::now();
        let row_a = adversarial_accuracy(&aec, "aec", &cwq, &spec).unwrap();
        eprintln!("  cw AE-C time {:.1}s", t.elapsed().as_secs_f64());
        println!("CW c=0: C {:.2}  AE-C {:.2}", row_c.accuracy, row_a.accuracy);
    }

    if stage == "blackbox" || stage == "all" {
        // same-architecture substitutes, independent seeds
        let c2 = load_or_train(
            &format!("lenet5b-e{c_epochs}"),
            || {
                let mut rng = ChaCha8Rng::seed_from_u64(300);
                builders::build_lenet5(10, &[1, 28, 28], &mut rng).unwrap()
            },
            |m| {
                let cfg = TrainConfig::standard(c_epochs, 64, 300);
                train_standard(m, &train_ds, None, &cfg).unwrap();
            },
        );
        let ae2 = load_or_train(
            &format!("ae2-e{ae_epochs}"),
            || {
                let mut rng = ChaCha8Rng::seed_from_u64(400);
                builders::build_autoencoder(&[1, 28, 28], &mut rng).unwrap()
            },
            |m| {
                let cfg = TrainConfig::standard(ae_epochs, 64, 400);
                train_autoencoder(m, &train_ds, None, &cfg).unwrap();
            },
        );
        let mut ae2f = ae2.clone();
        ae2f.set_frozen(true);
        let aec2 = compose_aec(ae2f, c2.clone()).unwrap();
        let t = Instant::now();
        for eps in [20u32, 80] {
            for (fam, name) in [(AttackSpec::fgsm(eps), "fgsm"), (AttackSpec::pgd(eps).with_seed(2), "pgd")]
            {
                let row_c =
                    blackbox_accuracy(&c2, &c, "c", Setting::BlackB, &quick, &fam).unwrap();
                let row_a =
                    blackbox_accuracy(&aec2, &aec, "aec", Setting::BlackB, &quick, &fam).unwrap();
                println!(
                    "BB-b {name} eps={eps}: C {:.2}  AE-C {:.2}",
                    row_c.accuracy, row_a.accuracy
                );
            }
        }
        eprintln!("  blackbox time {:.1}s", t.elapsed().as_secs_f64());
    }

    let ga_c =
        advlab_core::analysis::gradient_amplitude(&c, "c", &subset(&test_ds, 1000), None).unwrap();
    let ga_a =
        advlab_core::analysis::gradient_amplitude(&aec, "aec", &subset(&test_ds, 1000), None)
            .unwrap();
    println!("G: C {:.3e}  AE-C {:.3e}", ga_c.g, ga_a.g);
}

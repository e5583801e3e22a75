//! Optimizer and training regimes.
//!
//! Four regimes: standard classification, joint training with the summed
//! loss `L = L_ce + lambda * L_rec`, the alternative schedule (one
//! cross-entropy step, then `gamma` reconstruction-only steps per batch),
//! and PGD adversarial training. Every regime is bitwise deterministic
//! under a fixed seed: batch order comes from one seeded shuffle stream and
//! all kernels reduce in fixed order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackHandle, AttackSpec};
use crate::data::LabeledDataset;
use crate::error::{CoreError, Result};
use crate::nn::{Classifier, EncoderClassifier, Model};
use crate::{Tape, Tensor, Var};

/// Adaptive-moment optimizer; one state slot per parameter, created lazily.
/// Each slot's step counter increases by exactly one per update.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    slots: Vec<Option<AdamSlot>>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, slots: Vec::new() }
    }

    /// Apply one update to the parameter at `index`.
    pub fn step(&mut self, index: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "adam_step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        if self.slots.len() <= index {
            self.slots.resize(index + 1, None);
        }
        let slot = self.slots[index].get_or_insert_with(|| AdamSlot {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            step: 0,
        });
        if slot.m.shape() != param.shape() {
            return Err(CoreError::contract(format!(
                "optimizer slot {index} holds shape {:?}, parameter is {:?}",
                slot.m.shape(),
                param.shape()
            )));
        }
        slot.step += 1;
        let t = slot.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        let p = param.data_mut();
        for ((pv, mv), (vv, &gv)) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(grad.data()))
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Standard,
    /// Joint loss `L_ce + lambda * L_rec` (single combined step).
    JointRegularized,
    /// One cross-entropy step, then `gamma` reconstruction-only steps.
    JointAlternative,
    /// Each batch replaced by PGD examples against current weights.
    PgdAdversarial,
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub regime: Regime,
    /// Reconstruction weight; meaningful only for `JointRegularized`.
    pub lambda: f64,
    /// Reconstruction-step count; meaningful only for `JointAlternative`.
    pub gamma: usize,
    /// Attack used by `PgdAdversarial`.
    pub attack: Option<AttackSpec>,
    /// Softmax temperature inside the cross-entropy loss.
    pub temperature: f64,
}

impl TrainConfig {
    pub fn standard(epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            seed,
            learning_rate: 1e-3,
            regime: Regime::Standard,
            lambda: 0.0,
            gamma: 0,
            attack: None,
            temperature: 1.0,
        }
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self.regime = Regime::JointRegularized;
        self
    }

    pub fn with_gamma(mut self, gamma: usize) -> Self {
        self.gamma = gamma;
        self.regime = Regime::JointAlternative;
        self
    }

    pub fn with_attack(mut self, attack: AttackSpec) -> Self {
        self.attack = Some(attack);
        self.regime = Regime::PgdAdversarial;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::contract("batch_size must be positive"));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::contract("learning rate must be positive"));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::contract("temperature must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(CoreError::contract("lambda must be >= 0"));
        }
        if self.lambda != 0.0 && self.regime != Regime::JointRegularized {
            return Err(CoreError::contract("lambda is only meaningful in the joint regularized regime"));
        }
        if self.gamma != 0 && self.regime != Regime::JointAlternative {
            return Err(CoreError::contract("gamma is only meaningful in the joint alternative regime"));
        }
        if self.regime == Regime::PgdAdversarial && self.attack.is_none() {
            return Err(CoreError::contract("pgd-adversarial training needs an attack spec"));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss/accuracy history of a run.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
}

impl TrainReport {
    /// `epoch,split,loss,accuracy` CSV, one row per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for m in &self.history {
            out.push_str(&format!("{},{},{},{}\n", m.epoch, m.split, m.loss, m.accuracy));
        }
        out
    }
}

/// Forward-only loss/accuracy of a classifier over a dataset.
pub fn evaluate(
    model: &dyn Classifier,
    data: &LabeledDataset,
    batch_size: usize,
    temperature: f64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(CoreError::Training("cannot evaluate on an empty dataset".into()));
    }
    let n = data.len();
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let (x, y) = data.batch(start, end)?;
        let logits = model.logits(&x)?;
        total_loss += batch_ce_loss(&logits, &y, temperature)? * (end - start) as f64;
        for (p, &t) in logits.argmax_rows()?.iter().zip(&y) {
            if *p == t {
                correct += 1;
            }
        }
        start = end;
    }
    Ok((total_loss / n as f64, 100.0 * correct as f64 / n as f64))
}

/// Stable mean cross-entropy from plain logit values.
fn batch_ce_loss(logits: &Tensor, labels: &[usize], temperature: f64) -> Result<f64> {
    let m = logits.shape()[1];
    let scaled = logits.scale(1.0 / temperature)?;
    let mut total = 0.0;
    for (row, &y) in scaled.data().chunks_exact(m).zip(labels) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        total += mx + lse.ln() - row[y];
    }
    Ok(total / labels.len() as f64)
}

struct EpochAccumulator {
    loss_sum: f64,
    correct: usize,
    seen: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator { loss_sum: 0.0, correct: 0, seen: 0 }
    }

    fn add(&mut self, loss: f64, logits: &Tensor, labels: &[usize]) -> Result<()> {
        self.loss_sum += loss * labels.len() as f64;
        for (p, &t) in logits.argmax_rows()?.iter().zip(labels) {
            if *p == t {
                self.correct += 1;
            }
        }
        self.seen += labels.len();
        Ok(())
    }

    fn metrics(&self, epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            split: "train".into(),
            loss: self.loss_sum / self.seen.max(1) as f64,
            accuracy: 100.0 * self.correct as f64 / self.seen.max(1) as f64,
        }
    }
}

fn abort_if_not_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(CoreError::Training(format!(
            "non-finite loss {loss} at epoch {epoch}, batch {batch}; aborting instead of \
             training on garbage"
        )));
    }
    Ok(())
}

fn check_dataset(data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(CoreError::Training("empty training dataset".into()));
    }
    Ok(())
}

/// Apply gradients to one bound parameter group via Adam. Slot indices are
/// offset so disjoint groups never share moments.
fn apply_group(
    adam: &mut Adam,
    grads: &crate::tape::Gradients<f64>,
    vars: &[Var<'_>],
    params: &mut [(String, &mut Tensor)],
    slot_offset: usize,
) -> Result<()> {
    for (i, (var, (_, param))) in vars.iter().zip(params.iter_mut()).enumerate() {
        if !var.requires_grad() {
            continue;
        }
        if let Some(g) = grads.get(*var) {
            adam.step(slot_offset + i, param, g)?;
        }
    }
    Ok(())
}

/// Standard cross-entropy training of a plain model.
pub fn train_standard(
    model: &mut Model,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let n = train.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.gather(chunk)?;
            let tape = Tape::new();
            let xv = tape.constant(x);
            let (logits, vars) = model.forward_bound(&tape, xv)?;
            let loss = logits.cross_entropy(&y, cfg.temperature)?;
            let loss_val = loss.value().item()?;
            abort_if_not_finite(loss_val, epoch, bi)?;
            let grads = tape.backward(loss)?;
            apply_group(&mut adam, &grads, &vars, &mut model.params_mut(), 0)?;
            acc.add(loss_val, &logits.value(), &y)?;
        }
        push_epoch(&mut report, acc, epoch, model as &dyn Classifier, eval, cfg)?;
    }
    Ok(report)
}

/// Standard training of the encoder-classifier path (cross-entropy only);
/// the joint regimes degenerate to this bitwise when lambda or gamma is 0.
pub fn train_standard_ec(
    ec: &mut EncoderClassifier,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let n = train.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.gather(chunk)?;
            let tape = Tape::new();
            let xv = tape.constant(x);
            let (latent, enc_vars) = ec.encoder.forward_bound(&tape, xv)?;
            let (logits, head_vars) = ec.head.forward_bound(&tape, latent)?;
            let loss = logits.cross_entropy(&y, cfg.temperature)?;
            let loss_val = loss.value().item()?;
            abort_if_not_finite(loss_val, epoch, bi)?;
            let grads = tape.backward(loss)?;
            let enc_count = enc_vars.len();
            apply_group(&mut adam, &grads, &enc_vars, &mut ec.encoder.params_mut(), 0)?;
            apply_group(&mut adam, &grads, &head_vars, &mut ec.head.params_mut(), enc_count)?;
            acc.add(loss_val, &logits.value(), &y)?;
        }
        push_epoch(&mut report, acc, epoch, ec as &dyn Classifier, eval, cfg)?;
    }
    Ok(report)
}

/// Joint training minimizing `L_ce + lambda * L_rec` in one combined step.
pub fn train_joint_regularized(
    ec: &mut EncoderClassifier,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.regime != Regime::JointRegularized {
        return Err(CoreError::contract("config regime must be joint-regularized"));
    }
    check_dataset(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let n = train.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.gather(chunk)?;
            let tape = Tape::new();
            let xv = tape.constant(x);
            let joint = ec.forward_joint(&tape, xv)?;
            let ce = joint.logits.cross_entropy(&y, cfg.temperature)?;
            let rec = joint.reconstruction.mse(xv)?;
            let loss = ce.add(rec.scale(cfg.lambda)?)?;
            let loss_val = loss.value().item()?;
            abort_if_not_finite(loss_val, epoch, bi)?;
            let grads = tape.backward(loss)?;
            let enc_count = joint.encoder_params.len();
            let head_count = joint.head_params.len();
            apply_group(&mut adam, &grads, &joint.encoder_params, &mut ec.encoder.params_mut(), 0)?;
            apply_group(&mut adam, &grads, &joint.head_params, &mut ec.head.params_mut(), enc_count)?;
            apply_group(
                &mut adam,
                &grads,
                &joint.decoder_params,
                &mut ec.decoder.params_mut(),
                enc_count + head_count,
            )?;
            acc.add(loss_val, &joint.logits.value(), &y)?;
        }
        push_epoch(&mut report, acc, epoch, ec as &dyn Classifier, eval, cfg)?;
    }
    Ok(report)
}

/// Alternative joint schedule: per batch, one cross-entropy step on the
/// classification path, then `gamma` reconstruction-only steps on the
/// encoder/decoder path.
pub fn train_joint_alternative(
    ec: &mut EncoderClassifier,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.regime != Regime::JointAlternative {
        return Err(CoreError::contract("config regime must be joint-alternative"));
    }
    check_dataset(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let n = train.len();

    // Slot layout: [encoder | head | decoder], fixed across both step kinds.
    let enc_count = ec.encoder.params().len();
    let head_count = ec.head.params().len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.gather(chunk)?;

            // cross-entropy step
            {
                let tape = Tape::new();
                let xv = tape.constant(x.clone());
                let (latent, enc_vars) = ec.encoder.forward_bound(&tape, xv)?;
                let (logits, head_vars) = ec.head.forward_bound(&tape, latent)?;
                let loss = logits.cross_entropy(&y, cfg.temperature)?;
                let loss_val = loss.value().item()?;
                abort_if_not_finite(loss_val, epoch, bi)?;
                let grads = tape.backward(loss)?;
                apply_group(&mut adam, &grads, &enc_vars, &mut ec.encoder.params_mut(), 0)?;
                apply_group(&mut adam, &grads, &head_vars, &mut ec.head.params_mut(), enc_count)?;
                acc.add(loss_val, &logits.value(), &y)?;
            }

            // gamma reconstruction-only steps
            for _ in 0..cfg.gamma {
                let tape = Tape::new();
                let xv = tape.constant(x.clone());
                let (latent, enc_vars) = ec.encoder.forward_bound(&tape, xv)?;
                let (recon, dec_vars) = ec.decoder.forward_bound(&tape, latent)?;
                let loss = recon.mse(xv)?;
                let loss_val = loss.value().item()?;
                abort_if_not_finite(loss_val, epoch, bi)?;
                let grads = tape.backward(loss)?;
                apply_group(&mut adam, &grads, &enc_vars, &mut ec.encoder.params_mut(), 0)?;
                apply_group(
                    &mut adam,
                    &grads,
                    &dec_vars,
                    &mut ec.decoder.params_mut(),
                    enc_count + head_count,
                )?;
            }
        }
        push_epoch(&mut report, acc, epoch, ec as &dyn Classifier, eval, cfg)?;
    }
    Ok(report)
}

/// Autoencoder pretraining on the L2 reconstruction objective.
pub fn train_autoencoder(
    model: &mut Model,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let n = train.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, _) = train.gather(chunk)?;
            let tape = Tape::new();
            let xv = tape.constant(x);
            let (recon, vars) = model.forward_bound(&tape, xv)?;
            let loss = recon.mse(xv)?;
            let loss_val = loss.value().item()?;
            abort_if_not_finite(loss_val, epoch, bi)?;
            let grads = tape.backward(loss)?;
            apply_group(&mut adam, &grads, &vars, &mut model.params_mut(), 0)?;
            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
        }
        report.history.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen as f64,
            accuracy: f64::NAN,
        });
        if let Some(ev) = eval {
            let mse = reconstruction_mse(model, ev, cfg.batch_size.max(256))?;
            report.history.push(EpochMetrics {
                epoch,
                split: "test".into(),
                loss: mse,
                accuracy: f64::NAN,
            });
        }
    }
    Ok(report)
}

/// Mean per-pixel squared reconstruction error over a dataset.
pub fn reconstruction_mse(model: &Model, data: &LabeledDataset, batch: usize) -> Result<f64> {
    let n = data.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let (x, _) = data.batch(start, end)?;
        let recon = model.forward_value(&x)?;
        let diff = recon.sub(&x)?;
        let sq = diff.mul(&diff)?;
        total += sq.data().iter().sum::<f64>() / (sq.numel() / (end - start)) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// PGD adversarial training: every batch is replaced by adversarial
/// examples generated against the current weights before the update.
pub fn train_pgd_adversarial(
    model: &mut Model,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.regime != Regime::PgdAdversarial {
        return Err(CoreError::contract("config regime must be pgd-adversarial"));
    }
    let attack = cfg.attack.clone().expect("validated above");
    check_dataset(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let n = train.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.gather(chunk)?;
            // generation against frozen current weights; per-batch seed
            // derived deterministically from the config seed
            let adv = {
                let handle = AttackHandle::new(model as &dyn Classifier);
                let spec = attack
                    .clone()
                    .with_seed(mix_seed(cfg.seed, epoch as u64, bi as u64));
                pgd(&handle, &x, &y, &spec)?.perturbed
            };
            let tape = Tape::new();
            let xv = tape.constant(adv);
            let (logits, vars) = model.forward_bound(&tape, xv)?;
            let loss = logits.cross_entropy(&y, cfg.temperature)?;
            let loss_val = loss.value().item()?;
            abort_if_not_finite(loss_val, epoch, bi)?;
            let grads = tape.backward(loss)?;
            apply_group(&mut adam, &grads, &vars, &mut model.params_mut(), 0)?;
            acc.add(loss_val, &logits.value(), &y)?;
        }
        push_epoch(&mut report, acc, epoch, model as &dyn Classifier, eval, cfg)?;
    }
    Ok(report)
}

/// SplitMix-style mixing for per-batch attack seeds.
fn mix_seed(seed: u64, epoch: u64, batch: u64) -> u64 {
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(batch.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn push_epoch(
    report: &mut TrainReport,
    acc: EpochAccumulator,
    epoch: usize,
    model: &dyn Classifier,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<()> {
    report.history.push(acc.metrics(epoch));
    if let Some(ev) = eval {
        let (loss, accuracy) = evaluate(model, ev, cfg.batch_size.max(256), cfg.temperature)?;
        report.history.push(EpochMetrics { epoch, split: "test".into(), loss, accuracy });
    }
    Ok(())
}

//! Adversarial attacks: FGSM, PGD, Carlini-Wagner (L2), DeepFool, and the
//! black-box substitute protocol.
//!
//! Every attack works through an [`AttackHandle`], which wraps a
//! [`Classifier`] and counts gradient-capable forward passes. The black-box
//! protocol uses that counter to *prove* the target's gradient path was
//! never invoked: examples are crafted purely from substitute gradients and
//! the target only answers forward queries.

mod cw;
mod deepfool;

pub use cw::cw;
pub use deepfool::deepfool;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::Classifier;
use crate::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Cw,
    Deepfool,
}

impl AttackFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::Cw => "cw",
            AttackFamily::Deepfool => "deepfool",
        }
    }
}

/// Attack family plus hyperparameters. Fields irrelevant to a family are
/// ignored by it but kept in the record (they end up in reports).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// Perturbation budget on the 0-255 scale (converted to eps/255).
    /// A zero budget degenerates every family to the identity. CW and
    /// DeepFool otherwise ignore the value (recorded only); their default
    /// of 255 states the trivial bound — the whole pixel range.
    pub epsilon: u32,
    /// Iteration count: PGD steps, CW inner iterations, DeepFool max iters.
    pub steps: usize,
    /// PGD step size in [0,1] pixel units; CW inner learning rate.
    pub step_size: f64,
    /// CW confidence margin c.
    pub confidence: f64,
    /// DeepFool overshoot factor.
    pub overshoot: f64,
    /// PGD uniform random start inside the eps-ball.
    pub random_start: bool,
    /// CW binary-search steps over the trade-off constant.
    pub search_steps: usize,
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: u32) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon as f64 / 255.0,
            confidence: 0.0,
            overshoot: 0.0,
            random_start: false,
            search_steps: 0,
            seed: 0,
        }
    }

    /// PGD defaults: 40 steps, step size `2.5 * eps / (255 * steps)`,
    /// random start on.
    pub fn pgd(epsilon: u32) -> Self {
        let steps = 40;
        AttackSpec {
            family: AttackFamily::Pgd,
            epsilon,
            steps,
            step_size: 2.5 * epsilon as f64 / (255.0 * steps as f64),
            confidence: 0.0,
            overshoot: 0.0,
            random_start: true,
            search_steps: 0,
            seed: 0,
        }
    }

    /// CW defaults: 9 binary-search steps from const 1e-2, 1000 inner
    /// iterations, inner learning rate 0.01.
    pub fn cw(confidence: f64) -> Self {
        AttackSpec {
            family: AttackFamily::Cw,
            epsilon: 255,
            steps: 1000,
            step_size: 0.01,
            confidence,
            overshoot: 0.0,
            random_start: false,
            search_steps: 9,
            seed: 0,
        }
    }

    /// DeepFool defaults: max 50 iterations, overshoot 0.02.
    pub fn deepfool() -> Self {
        AttackSpec {
            family: AttackFamily::Deepfool,
            epsilon: 255,
            steps: 50,
            step_size: 0.0,
            confidence: 0.0,
            overshoot: 0.02,
            random_start: false,
            search_steps: 0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        if self.family == AttackFamily::Pgd {
            self.step_size = 2.5 * self.epsilon as f64 / (255.0 * steps as f64);
        }
        self
    }

    pub fn with_search_steps(mut self, search_steps: usize) -> Self {
        self.search_steps = search_steps;
        self
    }

    /// Budget in [0,1] pixel units.
    pub fn eps_unit(&self) -> f64 {
        self.epsilon as f64 / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            AttackFamily::Fgsm => Ok(()),
            AttackFamily::Pgd => {
                if self.steps == 0 {
                    return Err(CoreError::contract("pgd requires steps >= 1"));
                }
                if self.step_size <= 0.0 && self.epsilon > 0 {
                    return Err(CoreError::contract(format!(
                        "pgd step_size must be positive, got {}",
                        self.step_size
                    )));
                }
                Ok(())
            }
            AttackFamily::Cw => {
                if self.steps == 0 || self.search_steps == 0 {
                    return Err(CoreError::contract("cw requires steps and search_steps >= 1"));
                }
                if self.step_size <= 0.0 {
                    return Err(CoreError::contract("cw inner learning rate must be positive"));
                }
                Ok(())
            }
            AttackFamily::Deepfool => {
                if self.steps == 0 {
                    return Err(CoreError::contract("deepfool requires steps >= 1"));
                }
                Ok(())
            }
        }
    }
}

/// Outcome of one attack run over a batch.
#[derive(Clone, Debug)]
pub struct AdversarialBatch {
    pub originals: Tensor,
    pub perturbed: Tensor,
    /// Model predictions on the originals.
    pub original_predictions: Vec<usize>,
    /// Model predictions on the perturbed inputs.
    pub adversarial_predictions: Vec<usize>,
    /// Prediction changed relative to the original prediction.
    pub success: Vec<bool>,
    pub linf: Vec<f64>,
    pub l2: Vec<f64>,
}

impl AdversarialBatch {
    fn assemble(handle: &AttackHandle, originals: Tensor, perturbed: Tensor) -> Result<Self> {
        let original_predictions = handle.predict(&originals)?;
        let adversarial_predictions = handle.predict(&perturbed)?;
        let success: Vec<bool> = original_predictions
            .iter()
            .zip(&adversarial_predictions)
            .map(|(o, a)| o != a)
            .collect();
        let linf = perturbed.linf_per_row(&originals)?;
        let l2 = perturbed.l2_per_row(&originals)?;
        Ok(AdversarialBatch {
            originals,
            perturbed,
            original_predictions,
            adversarial_predictions,
            success,
            linf,
            l2,
        })
    }

    pub fn len(&self) -> usize {
        self.success.len()
    }

    pub fn is_empty(&self) -> bool {
        self.success.is_empty()
    }

    /// Percentage of perturbed samples still classified as `labels`.
    pub fn accuracy_against(&self, labels: &[usize]) -> f64 {
        let correct = self
            .adversarial_predictions
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        100.0 * correct as f64 / labels.len() as f64
    }
}

/// Instrumented model handle. `grad_evals` counts gradient-capable forward
/// constructions; plain `logits`/`predict` queries are not counted.
pub struct AttackHandle<'a> {
    model: &'a dyn Classifier,
    grad_evals: AtomicU64,
}

impl<'a> AttackHandle<'a> {
    pub fn new(model: &'a dyn Classifier) -> Self {
        AttackHandle { model, grad_evals: AtomicU64::new(0) }
    }

    /// Number of gradient-capable forward passes so far.
    pub fn grad_evals(&self) -> u64 {
        self.grad_evals.load(Ordering::SeqCst)
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    /// Forward-only logits (label query); not counted as a gradient use.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.model.logits(x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.model.predict(x)
    }

    /// Gradient-capable forward; increments the instrumentation counter.
    pub fn logits_tracked<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.grad_evals.fetch_add(1, Ordering::SeqCst);
        self.model.logits_tracked(tape, x)
    }

    /// Mean cross-entropy at temperature 1 and its gradient w.r.t. `x`.
    /// An input off the differentiable path (a gradient-masked model) gets
    /// a zero gradient, which is a statement about the model, not an error.
    pub fn loss_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let logits = self.logits_tracked(&tape, xv)?;
        let loss = logits.cross_entropy(labels, 1.0)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((loss.value().item()?, g))
    }
}

/// Elementwise sign with sign(0) = 0.
fn sign(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = if *v > 0.0 {
            1.0
        } else if *v < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    out
}

fn clip01(t: &Tensor) -> Tensor {
    t.clamp(0.0, 1.0)
}

/// Clamp `t` into the L-infinity `eps`-ball around `center`, elementwise.
fn clamp_ball(t: &Tensor, center: &Tensor, eps: f64) -> Tensor {
    let mut out = t.clone();
    for (v, &c) in out.data_mut().iter_mut().zip(center.data()) {
        let lo = c - eps;
        let hi = c + eps;
        *v = if *v < lo { lo } else if *v > hi { hi } else { *v };
    }
    out
}

/// Single signed-gradient step: `clip_[0,1](x + eps * sign(grad_x CE))`.
/// Exactly one gradient evaluation per sample.
pub fn fgsm(
    handle: &AttackHandle,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    let eps = spec.eps_unit();
    let (_, grad) = handle.loss_input_grad(x, labels)?;
    let step = sign(&grad).scale(eps)?;
    let perturbed = clip01(&x.add(&step)?);
    AdversarialBatch::assemble(handle, x.clone(), perturbed)
}

/// Iterated signed-gradient ascent with projection onto the eps-ball and
/// `[0,1]` after every step; optional uniform random start inside the ball.
pub fn pgd(
    handle: &AttackHandle,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    let eps = spec.eps_unit();
    let mut adv = if spec.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Tensor::rand_uniform(x.shape(), -eps, eps, &mut rng);
        clip01(&x.add(&noise)?)
    } else {
        x.clone()
    };
    for _ in 0..spec.steps {
        let (_, grad) = handle.loss_input_grad(&adv, labels)?;
        let step = sign(&grad).scale(spec.step_size)?;
        adv = clip01(&clamp_ball(&adv.add(&step)?, x, eps));
    }
    AdversarialBatch::assemble(handle, x.clone(), adv)
}

/// Dispatch an attack by family.
pub fn run_attack(
    handle: &AttackHandle,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    match spec.family {
        AttackFamily::Fgsm => fgsm(handle, x, labels, spec),
        AttackFamily::Pgd => pgd(handle, x, labels, spec),
        AttackFamily::Cw => cw(handle, x, labels, spec),
        AttackFamily::Deepfool => deepfool(handle, x, spec),
    }
}

/// Craft examples on `substitute`, evaluate them on `target`. The target's
/// gradient path must never run; the instrumented counter enforces it.
/// Returns the batch as seen by the target plus the target's accuracy
/// against `labels`.
pub fn blackbox_attack(
    substitute: &AttackHandle,
    target: &AttackHandle,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<(AdversarialBatch, f64)> {
    let before = target.grad_evals();
    let crafted = run_attack(substitute, x, labels, spec)?;
    let batch = AdversarialBatch::assemble(target, crafted.originals, crafted.perturbed)?;
    let after = target.grad_evals();
    if after != before {
        return Err(CoreError::contract(format!(
            "black-box isolation violated: target gradient path invoked {} times",
            after - before
        )));
    }
    let accuracy = batch.accuracy_against(labels);
    Ok((batch, accuracy))
}

//! Robustness metrics and gradient-masking diagnostics.
//!
//! The gradient-amplitude diagnostic G is the mean over samples of the L1
//! norm of the post-softmax input Jacobian: per sample, the sum over output
//! classes of the L1 norm of that class probability's gradient with respect
//! to the input. A gradient-masked defense shows the signature "black-box
//! beats white-box"; [`masking_report`] flags exactly that, and the
//! [`GradientZeroed`] wrapper is the positive control that must always
//! trigger it.

use serde::{Deserialize, Serialize};

use crate::attack::{blackbox_attack, run_attack, AttackHandle, AttackSpec};
use crate::data::LabeledDataset;
use crate::error::{CoreError, Result};
use crate::nn::Classifier;
use crate::{Tape, Tensor, Var};

/// Attack evaluation setting: white box, or black box with a fresh-architecture
/// (a) / same-architecture (b) substitute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "white")]
    White,
    #[serde(rename = "black-a")]
    BlackA,
    #[serde(rename = "black-b")]
    BlackB,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::White => "white",
            Setting::BlackA => "black-a",
            Setting::BlackB => "black-b",
        }
    }

    pub fn is_black(&self) -> bool {
        matches!(self, Setting::BlackA | Setting::BlackB)
    }
}

/// One accuracy cell of a results grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    /// Attack family name, or "none" for the clean row.
    pub attack: String,
    /// Perturbation budget on the 0-255 scale (0 for clean/CW/DF rows).
    pub epsilon: u32,
    pub setting: Setting,
    /// Percentage of attacked samples still classified correctly.
    pub accuracy: f64,
    pub n: usize,
    pub seed: u64,
}

impl AccuracyRow {
    fn checked(self) -> Result<Self> {
        if self.n == 0 {
            return Err(CoreError::contract("accuracy row needs a positive sample count"));
        }
        if !(0.0..=100.0).contains(&self.accuracy) {
            return Err(CoreError::contract(format!(
                "accuracy {} outside [0, 100]",
                self.accuracy
            )));
        }
        Ok(self)
    }

    fn cell_key(&self) -> (String, String, u32) {
        (self.model.clone(), self.attack.clone(), self.epsilon)
    }
}

/// Samples are attacked in fixed-size slices so memory stays bounded and
/// results do not depend on the caller's batching.
const ATTACK_CHUNK: usize = 250;

/// Clean accuracy as an `attack = "none"` row.
pub fn clean_accuracy(
    model: &dyn Classifier,
    model_id: &str,
    data: &LabeledDataset,
    seed: u64,
) -> Result<AccuracyRow> {
    if data.is_empty() {
        return Err(CoreError::contract("empty dataset"));
    }
    let (_, accuracy) = crate::train::evaluate(model, data, 256, 1.0)?;
    AccuracyRow {
        model: model_id.into(),
        attack: "none".into(),
        epsilon: 0,
        setting: Setting::White,
        accuracy,
        n: data.len(),
        seed,
    }
    .checked()
}

/// White-box adversarial accuracy of `model` under `spec`.
pub fn adversarial_accuracy(
    model: &dyn Classifier,
    model_id: &str,
    data: &LabeledDataset,
    spec: &AttackSpec,
) -> Result<AccuracyRow> {
    if data.is_empty() {
        return Err(CoreError::contract("empty dataset"));
    }
    let handle = AttackHandle::new(model);
    let n = data.len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + ATTACK_CHUNK).min(n);
        let (x, y) = data.batch(start, end)?;
        let chunk_spec = spec.clone().with_seed(spec.seed.wrapping_add(start as u64));
        let batch = run_attack(&handle, &x, &y, &chunk_spec)?;
        correct += batch
            .adversarial_predictions
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
        start = end;
    }
    AccuracyRow {
        model: model_id.into(),
        attack: spec.family.as_str().into(),
        epsilon: spec.epsilon,
        setting: Setting::White,
        accuracy: 100.0 * correct as f64 / n as f64,
        n,
        seed: spec.seed,
    }
    .checked()
}

/// Black-box accuracy: craft on `substitute`, score on `target`. The
/// target's instrumented gradient counter must stay at zero.
pub fn blackbox_accuracy(
    substitute: &dyn Classifier,
    target: &dyn Classifier,
    target_id: &str,
    setting: Setting,
    data: &LabeledDataset,
    spec: &AttackSpec,
) -> Result<AccuracyRow> {
    if data.is_empty() {
        return Err(CoreError::contract("empty dataset"));
    }
    if !setting.is_black() {
        return Err(CoreError::contract("blackbox_accuracy needs a black-box setting"));
    }
    let sub = AttackHandle::new(substitute);
    let tgt = AttackHandle::new(target);
    let n = data.len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + ATTACK_CHUNK).min(n);
        let (x, y) = data.batch(start, end)?;
        let chunk_spec = spec.clone().with_seed(spec.seed.wrapping_add(start as u64));
        let (batch, _) = blackbox_attack(&sub, &tgt, &x, &y, &chunk_spec)?;
        correct += batch
            .adversarial_predictions
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
        start = end;
    }
    debug_assert_eq!(tgt.grad_evals(), 0);
    AccuracyRow {
        model: target_id.into(),
        attack: spec.family.as_str().into(),
        epsilon: spec.epsilon,
        setting,
        accuracy: 100.0 * correct as f64 / n as f64,
        n,
        seed: spec.seed,
    }
    .checked()
}

/// Mean gradient amplitude over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientAmplitude {
    pub model: String,
    /// Mean L1 norm of the post-softmax input Jacobian.
    pub g: f64,
    pub n: usize,
}

/// Measure G. `sample_limit` subsamples the head of the dataset (recorded
/// in `n`); `None` uses the full set.
pub fn gradient_amplitude(
    model: &dyn Classifier,
    model_id: &str,
    data: &LabeledDataset,
    sample_limit: Option<usize>,
) -> Result<GradientAmplitude> {
    if data.is_empty() {
        return Err(CoreError::contract("empty dataset"));
    }
    let handle = AttackHandle::new(model);
    let classes = model.num_classes();
    let n = sample_limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(CoreError::contract("sample_limit must be positive"));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + 100).min(n);
        let (x, _) = data.batch(start, end)?;
        let m = end - start;
        let tape = Tape::new();
        let xv = tape.leaf(x, true);
        let logits = handle.logits_tracked(&tape, xv)?;
        let probs = logits.softmax()?;
        for class in 0..classes {
            let s = probs.gather_class(&vec![class; m])?.sum()?;
            let grads = tape.backward(s)?;
            if let Some(g) = grads.get(xv) {
                total += g.data().iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        start = end;
    }
    Ok(GradientAmplitude { model: model_id.into(), g: total / n as f64, n })
}

/// One matched white/black comparison cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingCell {
    pub model: String,
    pub attack: String,
    pub epsilon: u32,
    pub setting: Setting,
    pub white_accuracy: f64,
    pub black_accuracy: f64,
    /// Raised when black-box accuracy falls below white-box accuracy — the
    /// gradient-masking signature.
    pub masking_flag: bool,
}

/// Joined white/black diagnostic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub cells: Vec<MaskingCell>,
}

impl MaskingReport {
    pub fn any_flag(&self) -> bool {
        self.cells.iter().any(|c| c.masking_flag)
    }
}

/// Join accuracy rows into masking cells. Every black-box row must have a
/// white-box counterpart at the same (model, attack, epsilon); white rows
/// without a black counterpart are not comparable and are skipped.
pub fn masking_report(rows: &[AccuracyRow]) -> Result<MaskingReport> {
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for black in rows.iter().filter(|r| r.setting.is_black()) {
        let white = rows
            .iter()
            .find(|r| r.setting == Setting::White && r.cell_key() == black.cell_key());
        match white {
            Some(w) => cells.push(MaskingCell {
                model: black.model.clone(),
                attack: black.attack.clone(),
                epsilon: black.epsilon,
                setting: black.setting,
                white_accuracy: w.accuracy,
                black_accuracy: black.accuracy,
                masking_flag: black.accuracy < w.accuracy,
            }),
            None => missing.push(format!(
                "{}/{}/eps={} ({})",
                black.model,
                black.attack,
                black.epsilon,
                black.setting.as_str()
            )),
        }
    }
    if !missing.is_empty() {
        return Err(CoreError::contract(format!(
            "black-box rows without white-box counterparts: {}",
            missing.join(", ")
        )));
    }
    Ok(MaskingReport { cells })
}

/// Positive control for the masking diagnostics: forward behavior is
/// unchanged but the input-gradient path is severed, so white-box attacks
/// see zero gradients while transfer attacks still work.
pub struct GradientZeroed<'m> {
    inner: &'m dyn Classifier,
}

impl<'m> GradientZeroed<'m> {
    pub fn new(inner: &'m dyn Classifier) -> Self {
        GradientZeroed { inner }
    }
}

impl Classifier for GradientZeroed<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.logits(x)
    }

    fn logits_tracked<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.inner.logits_tracked(tape, x.detach())
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
}

//! Carlini-Wagner L2 attack in tanh space with binary search over the
//! trade-off constant.

use crate::error::Result;
use crate::train::Adam;
use crate::{Tape, Tensor};

use super::{AdversarialBatch, AttackHandle, AttackSpec};

const CONST_INIT: f64 = 1e-2;
const CONST_UPPER: f64 = 1e10;
/// Keeps atanh away from its poles at the pixel-range endpoints.
const TANH_SHRINK: f64 = 1.0 - 1e-6;
/// Standard plateau early-abort: stop a search step once the loss fails to
/// improve by this factor between checkpoints.
const ABORT_FACTOR: f64 = 0.9999;

/// Per-sample optimization of `||delta||^2 + const * max(Z_y - max_other, -c)`
/// over `x_adv = (tanh(w) + 1) / 2`; binary search tunes `const` per sample.
/// Samples that never reach margin `c` keep their original pixels and a
/// `false` success flag — failure is data, not an error.
pub fn cw(
    handle: &AttackHandle,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    if spec.epsilon == 0 {
        // zero budget: every family degenerates to the identity
        return AdversarialBatch::assemble(handle, x.clone(), x.clone());
    }
    let n = x.shape()[0];
    let dim: usize = x.shape()[1..].iter().product();
    let c = spec.confidence;

    let mut lower = vec![0.0f64; n];
    let mut upper = vec![CONST_UPPER; n];
    let mut consts = vec![CONST_INIT; n];
    let mut best_l2 = vec![f64::INFINITY; n];
    let mut best_adv = x.clone();
    let mut found = vec![false; n];

    let w_init = atanh_space(x);

    for _search in 0..spec.search_steps {
        let mut w = w_init.clone();
        let mut adam = Adam::new(spec.step_size);
        let const_tensor = Tensor::from_vec(vec![n], consts.clone())?;
        let mut found_this = vec![false; n];
        let check_every = (spec.steps / 10).max(10);
        let mut prev_loss = f64::INFINITY;

        for iter in 0..spec.steps {
            let tape = Tape::new();
            let wv = tape.leaf(w.clone(), true);
            let x_adv = wv.tanh()?.add_scalar(1.0)?.scale(0.5)?;
            let x0 = tape.constant(x.clone());
            let delta = x_adv.sub(x0)?;
            let sq = delta.mul(delta)?.reshape(&[n, dim])?.row_sum()?;
            let logits = handle.logits_tracked(&tape, x_adv)?;
            let z_true = logits.gather_class(labels)?;
            let z_other = logits.row_max_excluding(labels)?;
            let objective = z_true.sub(z_other)?.clamp_min(-c)?;
            let weighted = objective.mul(tape.constant(const_tensor.clone()))?;
            let loss = sq.sum()?.add(weighted.sum()?)?;

            // success bookkeeping straight from this iteration's values
            let logit_vals = logits.value();
            let preds = logit_vals.argmax_rows()?;
            let z_true_vals = z_true.value();
            let z_other_vals = z_other.value();
            let sq_vals = sq.value();
            let adv_vals = x_adv.value();
            for i in 0..n {
                let margin = z_other_vals.data()[i] - z_true_vals.data()[i];
                if preds[i] != labels[i] && margin >= c {
                    let l2 = sq_vals.data()[i];
                    found_this[i] = true;
                    found[i] = true;
                    if l2 < best_l2[i] {
                        best_l2[i] = l2;
                        let start = i * dim;
                        best_adv.data_mut()[start..start + dim]
                            .copy_from_slice(&adv_vals.data()[start..start + dim]);
                    }
                }
            }

            let grads = tape.backward(loss)?;
            let gw = grads.expect(wv)?.clone();
            adam.step(0, &mut w, &gw)?;

            if (iter + 1) % check_every == 0 {
                let total = loss.value().item()?;
                if total > prev_loss * ABORT_FACTOR {
                    break;
                }
                prev_loss = total;
            }
        }

        for i in 0..n {
            if found_this[i] {
                upper[i] = upper[i].min(consts[i]);
                consts[i] = 0.5 * (lower[i] + upper[i]);
            } else {
                lower[i] = lower[i].max(consts[i]);
                consts[i] = if upper[i] < CONST_UPPER {
                    0.5 * (lower[i] + upper[i])
                } else {
                    consts[i] * 10.0
                };
            }
        }
    }

    let mut perturbed = best_adv;
    for i in 0..n {
        if !found[i] {
            let start = i * dim;
            let orig = x.data()[start..start + dim].to_vec();
            perturbed.data_mut()[start..start + dim].copy_from_slice(&orig);
        }
    }
    AdversarialBatch::assemble(handle, x.clone(), perturbed)
}

/// `atanh((2x - 1) * shrink)`: the unconstrained optimization variable whose
/// tanh image stays strictly inside the pixel range.
fn atanh_space(x: &Tensor) -> Tensor {
    let mut w = x.clone();
    for v in w.data_mut() {
        let z = (2.0 * *v - 1.0) * TANH_SHRINK;
        *v = 0.5 * ((1.0 + z) / (1.0 - z)).ln();
    }
    w
}

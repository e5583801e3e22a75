//! DeepFool: iterative minimal perturbation toward the nearest linearized
//! decision boundary.

use crate::error::Result;
use crate::{Tape, Tensor};

use super::{AdversarialBatch, AttackHandle, AttackSpec};

/// Numerical guard for near-parallel boundary normals.
const NORM_GUARD: f64 = 1e-12;
/// Small push past the linearized boundary, as in the original method.
const BOUNDARY_PUSH: f64 = 1e-4;

/// Untargeted DeepFool over a batch. Iterates only on samples whose
/// prediction has not flipped yet; a sample that survives all iterations
/// keeps a `false` success flag.
pub fn deepfool(handle: &AttackHandle, x: &Tensor, spec: &AttackSpec) -> Result<AdversarialBatch> {
    spec.validate()?;
    if spec.epsilon == 0 {
        // zero budget: every family degenerates to the identity
        return AdversarialBatch::assemble(handle, x.clone(), x.clone());
    }
    let n = x.shape()[0];
    let dim: usize = x.shape()[1..].iter().product();
    let classes = handle.num_classes();
    let overshoot = spec.overshoot;

    let orig_pred = handle.predict(x)?;
    let mut r_tot = Tensor::zeros(x.shape());

    for _iter in 0..spec.steps {
        // candidate = x + (1 + overshoot) * r_tot, evaluated unclipped while
        // iterating; pixel clipping happens once at the end
        let candidate = x.add(&r_tot.scale(1.0 + overshoot)?)?;
        let preds = handle.predict(&candidate)?;
        let active: Vec<usize> = (0..n).filter(|&i| preds[i] == orig_pred[i]).collect();
        if active.is_empty() {
            break;
        }

        let za = candidate.take_rows(&active)?;
        let m = active.len();
        let tape = Tape::new();
        let zv = tape.leaf(za, true);
        let logits = handle.logits_tracked(&tape, zv)?;
        let logit_vals = logits.value();

        // one backward per class gives the full input Jacobian rows
        let mut class_grads: Vec<Tensor> = Vec::with_capacity(classes);
        for j in 0..classes {
            let col = logits.gather_class(&vec![j; m])?;
            let s = col.sum()?;
            let grads = tape.backward(s)?;
            class_grads.push(grads.expect(zv)?.clone());
        }

        for (row, &sample) in active.iter().enumerate() {
            let k0 = orig_pred[sample];
            let f = &logit_vals.data()[row * classes..(row + 1) * classes];
            let g_k0 = &class_grads[k0].data()[row * dim..(row + 1) * dim];

            let mut best_ratio = f64::INFINITY;
            let mut best: Option<(f64, Vec<f64>, f64)> = None; // |f_diff|, w, ||w||^2
            for j in 0..classes {
                if j == k0 {
                    continue;
                }
                let g_j = &class_grads[j].data()[row * dim..(row + 1) * dim];
                let mut norm_sq = 0.0;
                for (a, b) in g_j.iter().zip(g_k0) {
                    let d = a - b;
                    norm_sq += d * d;
                }
                let f_diff = (f[j] - f[k0]).abs();
                let ratio = f_diff / (norm_sq.sqrt() + NORM_GUARD);
                if ratio < best_ratio {
                    best_ratio = ratio;
                    let w: Vec<f64> = g_j.iter().zip(g_k0).map(|(a, b)| a - b).collect();
                    best = Some((f_diff, w, norm_sq));
                }
            }

            if let Some((f_diff, w, norm_sq)) = best {
                let scale = (f_diff + BOUNDARY_PUSH) / (norm_sq + NORM_GUARD);
                let dst = &mut r_tot.data_mut()[sample * dim..(sample + 1) * dim];
                for (d, wv) in dst.iter_mut().zip(&w) {
                    *d += scale * wv;
                }
            }
        }
    }

    let perturbed = x.add(&r_tot.scale(1.0 + overshoot)?)?.clamp(0.0, 1.0);
    AdversarialBatch::assemble(handle, x.clone(), perturbed)
}

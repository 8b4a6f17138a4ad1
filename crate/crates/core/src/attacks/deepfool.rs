use super::{AdversarialBatch, Classifier};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// One linearization step for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepFoolStep<T: Scalar> {
    /// Class whose linearized boundary is nearest; `None` when the logits or
    /// gradients are not finite.
    pub class: Option<usize>,
    /// Minimal step onto that boundary: `|f_l| / ||w_l||^2 * w_l` with
    /// `f_k = Z_k - Z_label`, `w_k = grad f_k`.
    pub perturbation: Vec<T>,
    /// Current prediction.
    pub prediction: usize,
}

/// Logits and the input gradient of every logit.
fn logit_jacobian<T: Scalar, M: Classifier<T>>(model: &M, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let logits = {
        let tape = Tape::new();
        let z = model.logits(&tape, tape.constant(x.clone()))?;
        (*z.value()).clone()
    };
    let classes = match logits.shape() {
        [_, k] => *k,
        s => return Err(Error::shape("deepfool", format!("logits must be [n, k], got {s:?}"))),
    };
    let mut grads = Vec::with_capacity(classes);
    for k in 0..classes {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let z = model.logits(&tape, xv)?;
        let mask = Tensor::from_fn(logits.shape().to_vec(), |i| if i % classes == k { T::one() } else { T::zero() });
        let picked = z.mul(tape.constant(mask))?.sum();
        tape.backward(picked)?;
        grads.push(xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())));
    }
    Ok((logits, grads))
}

/// The DeepFool linearization at `x` relative to `labels`.
pub fn deepfool_step<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<Vec<DeepFoolStep<T>>> {
    let (logits, grads) = logit_jacobian(model, x)?;
    let k = grads.len();
    let predictions = logits.argmax_rows();
    let mut steps = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let z = &logits.data()[i * k..(i + 1) * k];
        let finite = z.iter().all(|v| v.is_finite()) && grads.iter().all(|g| g.sample(i).iter().all(|v| v.is_finite()));
        let mut best: Option<(T, usize, T, Vec<T>)> = None;
        if finite {
            let g_label = grads[label].sample(i);
            for c in (0..k).filter(|&c| c != label) {
                let w: Vec<T> = grads[c].sample(i).iter().zip(g_label).map(|(a, b)| *a - *b).collect();
                let f = z[c] - z[label];
                let norm2: T = w.iter().map(|v| *v * *v).sum();
                if norm2 <= T::zero() {
                    continue;
                }
                let dist = f.abs() / norm2.sqrt();
                if best.as_ref().is_none_or(|(d, ..)| dist < *d) {
                    best = Some((dist, c, f.abs() / norm2, w));
                }
            }
        }
        steps.push(match best {
            Some((_, c, scale, w)) => DeepFoolStep {
                class: Some(c),
                perturbation: w.into_iter().map(|v| v * scale).collect(),
                prediction: predictions[i],
            },
            None => DeepFoolStep {
                class: None,
                perturbation: vec![T::zero(); x.sample_len()],
                prediction: predictions[i],
            },
        });
    }
    Ok(steps)
}

/// Multi-class L2 DeepFool. Repeats the nearest-boundary step until the
/// prediction leaves `labels` (default: the clean predictions) or `max_iter`
/// steps were taken; returns `clip(x + (1 + overshoot) * r_total)`.
pub fn deepfool<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: Option<&[usize]>,
    max_iter: usize,
    overshoot: T,
) -> Result<AdversarialBatch<T>> {
    let n = x.batch();
    let labels: Vec<usize> = match labels {
        Some(l) => {
            super::check_batch(x, l)?;
            l.to_vec()
        }
        None => model.predict(x)?,
    };
    let d = x.sample_len();
    let scale = T::one() + overshoot;
    let mut r_total = Tensor::<T>::zeros(x.shape().to_vec());
    let mut aborted = vec![false; n];
    let mut active: Vec<usize> = (0..n).collect();
    let current = |r: &Tensor<T>, idx: &[usize]| -> Tensor<T> {
        let mut out = x.select(idx);
        for (j, &i) in idx.iter().enumerate() {
            for (o, &v) in out.sample_mut(j).iter_mut().zip(r.sample(i)) {
                *o = (*o + scale * v).max(T::zero()).min(T::one());
            }
        }
        out
    };
    for iter in 0..=max_iter {
        if active.is_empty() {
            break;
        }
        let cur = current(&r_total, &active);
        let sub_labels: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let steps = deepfool_step(model, &cur, &sub_labels)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, step) in active.iter().zip(&steps) {
            if step.prediction != labels[i] {
                continue;
            }
            if step.class.is_none() {
                aborted[i] = true;
                r_total.sample_mut(i).fill(T::zero());
                continue;
            }
            // The pass after the last step only checks for flips.
            if iter < max_iter {
                for (r, &p) in r_total.sample_mut(i).iter_mut().zip(&step.perturbation) {
                    *r += p;
                }
                still.push(i);
            }
        }
        active = still;
    }
    debug_assert_eq!(r_total.sample_len(), d);
    let all: Vec<usize> = (0..n).collect();
    let adv = current(&r_total, &all);
    let mut batch = AdversarialBatch::finish(model, x, adv, &labels)?;
    for (s, a) in batch.success_mask.iter_mut().zip(&aborted) {
        if *a {
            *s = false;
        }
    }
    Ok(batch)
}

use super::{check_batch, AdversarialBatch, AttackConfig, Classifier};
use crate::error::Result;
use crate::nn::Param;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::train::Adam;

/// Pixels are squeezed into `[EDGE, 1 - EDGE]` before `arctanh`.
const EDGE: f64 = 1e-6;

/// Carlini-Wagner L2 attack (see [`cw_l2_traced`]).
pub fn cw_l2<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    Ok(cw_l2_traced(model, x, y, cfg)?.0)
}

/// Carlini-Wagner L2 in tanh space.
///
/// Minimizes `||delta||^2 + c * f(x + delta)` over `w` with Adam, where
/// `x + delta = (tanh(w) + 1) / 2` and `w` starts at `arctanh(2x - 1)`.
/// Untargeted: `f = max(Z_y - max_{i != y} Z_i, -kappa)`; targeted (when
/// `cfg.target_class` is set): `f = max(max_{i != t} Z_i - Z_t, -kappa)`.
/// Returns the successful iterate with the smallest `||delta||` per sample,
/// else the final iterate. The second value is the best-so-far objective,
/// summed over the batch, after each step.
pub fn cw_l2_traced<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<(AdversarialBatch<T>, Vec<f64>)> {
    check_batch(x, y)?;
    let n = x.batch();
    let d = x.sample_len();
    let (targets, targeted): (Vec<usize>, bool) = match cfg.target_class {
        Some(t) => (vec![t; n], true),
        None => (y.to_vec(), false),
    };
    let edge = T::lit(EDGE);
    let two = T::lit(2.0);
    let w0 = x.map(|v| (two * v.max(edge).min(T::one() - edge) - T::one()).atanh());
    let kappa = T::lit(cfg.kappa);

    let mut c = vec![cfg.cw_c; n];
    let (mut lo, mut hi) = (vec![0.0f64; n], vec![f64::INFINITY; n]);
    let mut best_l2 = vec![f64::INFINITY; n];
    let mut best_adv = x.clone();
    let mut best_obj = vec![f64::INFINITY; n];
    let mut trace = Vec::new();
    let mut last = x.clone();

    for _round in 0..cfg.cw_search_steps.max(1) {
        let mut w = vec![Param {
            name: "w".into(),
            layer: 0,
            value: w0.clone(),
            frozen: false,
        }];
        let mut adam = Adam::new(T::lit(cfg.cw_lr));
        let c_t = Tensor::new(vec![n], c.iter().map(|&v| T::lit(v)).collect())?;
        let mut round_success = vec![false; n];
        for step in 0..=cfg.cw_steps {
            let tape = Tape::new();
            let wv = tape.leaf(w[0].value.clone(), step < cfg.cw_steps);
            let xa = wv.tanh().add_scalar(T::one()).scale(T::lit(0.5));
            let delta = xa.sub(tape.constant(x.clone()))?;
            let l2 = delta.mul(delta)?.sum_per_sample();
            let z = model.logits(&tape, xa)?;
            let f = z.margin_loss(&targets, kappa, targeted)?;
            let obj = l2.add(f.mul(tape.constant(c_t.clone()))?)?;

            let preds = z.value().argmax_rows();
            let (l2v, objv, xav) = (l2.value(), obj.value(), xa.value());
            for i in 0..n {
                let success = if targeted { preds[i] == targets[i] } else { preds[i] != y[i] };
                let dist = l2v.data()[i].as_f64();
                if success {
                    round_success[i] = true;
                    if dist < best_l2[i] {
                        best_l2[i] = dist;
                        best_adv.sample_mut(i).copy_from_slice(xav.sample(i));
                    }
                }
                best_obj[i] = best_obj[i].min(objv.data()[i].as_f64());
            }
            trace.push(best_obj.iter().sum());
            if step == cfg.cw_steps {
                last = (*xav).clone();
                break;
            }
            tape.backward(obj.sum())?;
            let g = wv.grad();
            adam.step(&mut w, &[g])?;
        }
        for i in 0..n {
            if round_success[i] {
                hi[i] = hi[i].min(c[i]);
                c[i] = (lo[i] + hi[i]) / 2.0;
            } else {
                lo[i] = lo[i].max(c[i]);
                c[i] = if hi[i].is_finite() { (lo[i] + hi[i]) / 2.0 } else { c[i] * 10.0 };
            }
        }
    }

    let mut adv = last;
    for i in 0..n {
        if best_l2[i].is_finite() {
            adv.sample_mut(i).copy_from_slice(best_adv.sample(i));
        }
    }
    debug_assert_eq!(adv.sample_len(), d);
    Ok((AdversarialBatch::finish(model, x, adv, y)?, trace))
}

use super::{check_batch, loss_gradient, AdversarialBatch, Classifier};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `x' = clip(x' + eps * sign(dir))`, then into `[0, 1]`.
fn signed_step<T: Scalar>(adv: &mut Tensor<T>, dir: &Tensor<T>, eps: T, origin: &Tensor<T>, ball: Option<T>) {
    let zero_one = |v: T| v.max(T::zero()).min(T::one());
    for ((a, &d), &o) in adv.data_mut().iter_mut().zip(dir.data()).zip(origin.data()) {
        let mut v = *a + eps * sign(d);
        if let Some(r) = ball {
            v = v.max(o - r).min(o + r);
        }
        *a = zero_one(v);
    }
}

/// Fast gradient sign method: `x' = clip(x + eps * sign(grad_x J), 0, 1)`.
pub fn fgsm<T: Scalar, M: Classifier<T>>(model: &M, x: &Tensor<T>, y: &[usize], eps: T) -> Result<AdversarialBatch<T>> {
    bim_with_ball(model, x, y, eps, 1, None)
}

/// Basic iterative method: FGSM steps of size `eps` from the current iterate.
pub fn bim<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    eps: T,
    iterations: usize,
) -> Result<AdversarialBatch<T>> {
    bim_with_ball(model, x, y, eps, iterations, None)
}

pub(crate) fn bim_with_ball<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    eps: T,
    iterations: usize,
    ball: Option<T>,
) -> Result<AdversarialBatch<T>> {
    check_batch(x, y)?;
    let mut adv = x.clone();
    if eps != T::zero() {
        for _ in 0..iterations {
            let g = loss_gradient(model, &adv, y)?;
            signed_step(&mut adv, &g, eps, x, ball);
        }
    }
    AdversarialBatch::finish(model, x, adv, y)
}

/// Momentum iterative method: `g_n = mu * g_{n-1} + grad / ||grad||_1`
/// (per sample, `g_0 = 0`), step `eps * sign(g_n)`.
pub fn mim<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    eps: T,
    iterations: usize,
    mu: T,
) -> Result<AdversarialBatch<T>> {
    mim_with_ball(model, x, y, eps, iterations, mu, None)
}

pub(crate) fn mim_with_ball<T: Scalar, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    eps: T,
    iterations: usize,
    mu: T,
    ball: Option<T>,
) -> Result<AdversarialBatch<T>> {
    check_batch(x, y)?;
    let mut adv = x.clone();
    let mut g = Tensor::zeros(x.shape().to_vec());
    if eps != T::zero() {
        for _ in 0..iterations {
            let grad = loss_gradient(model, &adv, y)?;
            for i in 0..x.batch() {
                let gi = grad.sample(i);
                let l1: T = gi.iter().map(|v| v.abs()).sum();
                // A flat point gives a zero gradient; dividing by 1 avoids 0/0.
                let norm = if l1.as_f64() < 1e-12 { T::one() } else { l1 };
                for (acc, &v) in g.sample_mut(i).iter_mut().zip(gi) {
                    *acc = mu * *acc + v / norm;
                }
            }
            signed_step(&mut adv, &g, eps, x, ball);
        }
    }
    AdversarialBatch::finish(model, x, adv, y)
}

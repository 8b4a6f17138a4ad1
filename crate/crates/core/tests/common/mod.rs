//! Affine toy classifiers with closed-form attack answers.
#![allow(dead_code)]

use cbc::attacks::Classifier;
use cbc::{Result, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `Z(x) = flatten(x) W + b`, `W: [d, k]`.
pub struct Affine<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Classifier<T> for Affine<T> {
    fn logits<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let flat = if x.shape().len() > 2 { x.flatten()? } else { x };
        flat.matmul(tape.constant(self.w.clone()))?.add_bias(tape.constant(self.b.clone()))
    }
}

/// Binary toy: logits `[0, f(x)]` with `f(x) = w.x + b`.
pub struct BinaryToy {
    pub model: Affine<f64>,
    pub w: Vec<f64>,
    pub b: f64,
    pub x: Tensor<f64>,
}

impl BinaryToy {
    pub fn f(&self) -> f64 {
        self.w.iter().zip(self.x.data()).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A random binary toy with `x` in `[0.3, 0.7]^d` lying at distance
/// `dist` (drawn from `dist_range`) on the positive side of the boundary,
/// and `||w||` drawn from `norm_range`.
pub fn binary_toy(rng: &mut ChaCha8Rng, d: usize, dist_range: (f64, f64), norm_range: (f64, f64)) -> BinaryToy {
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..0.7)).collect();
    let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = rng.random_range(norm_range.0..norm_range.1);
    w.iter_mut().for_each(|v| *v *= target / n);
    let dist = rng.random_range(dist_range.0..dist_range.1);
    let wx: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
    let b = dist * target - wx;
    let mut wm = vec![0.0; 2 * d];
    for i in 0..d {
        wm[2 * i + 1] = w[i];
    }
    BinaryToy {
        model: Affine {
            w: Tensor::new(vec![d, 2], wm).unwrap(),
            b: Tensor::new(vec![2], vec![0.0, b]).unwrap(),
        },
        w,
        b,
        x: Tensor::new(vec![1, d], x).unwrap(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

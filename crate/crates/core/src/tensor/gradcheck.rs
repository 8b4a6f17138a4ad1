//! Central finite-difference gradient checking (64-bit).

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum relative error between the tape gradient of a scalar function and
/// central differences, over every element of `x`.
///
/// Relative error per element is `|analytic - numeric| / max(|analytic|,
/// |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, step, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(input)?;
    tape.backward(out)?;
    let analytic = input.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |v: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let y = f(tape.constant(v))?;
        let value = y.value();
        if value.len() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        Ok(value.data()[0])
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check(|v| Ok(v), &x, 2f64.powi(-10)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_matches_to_second_order() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check(|v| Ok(v.mul(v)?.sum()), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }
}

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor};

/// Bias-corrected Adam over a model's parameter list.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step_count: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self::with_betas(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. `grads[i]` belongs to `params[i]`; frozen parameters are
    /// skipped entirely, unfrozen ones without a gradient are an error.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        for (p, g) in params.iter().zip(grads) {
            if p.frozen {
                continue;
            }
            match g {
                None => return Err(Error::MissingGrad(p.name.clone())),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::shape(
                        "adam",
                        format!("gradient {:?} for `{}` {:?}", g.shape(), p.name, p.value.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (Some(g), false) = (g, p.frozen) else {
                continue;
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, frozen: bool) -> Vec<Param<f64>> {
        vec![Param {
            name: "p".into(),
            layer: 0,
            value: Tensor::scalar(v),
            frozen,
        }]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0, false);
        let mut adam = Adam::new(0.001);
        adam.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        // m_hat = 1, v_hat = 1 -> update = lr * 1 / (1 + 1e-8)
        let expect = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p[0].value.data()[0] - expect).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = scalar_param(0.25, false);
        let mut adam = Adam::new(0.1);
        for _ in 0..3 {
            adam.step(&mut p, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(p[0].value.data()[0], 0.25);
    }

    #[test]
    fn frozen_is_untouched_and_missing_grad_errors() {
        let mut p = scalar_param(1.0, true);
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &[Some(Tensor::scalar(5.0))]).unwrap();
        adam.step(&mut p, &[None]).unwrap();
        assert_eq!(p[0].value.data()[0].to_bits(), 1.0f64.to_bits());

        let mut q = scalar_param(1.0, false);
        assert!(matches!(Adam::new(0.1).step(&mut q, &[None]), Err(Error::MissingGrad(_))));
    }
}

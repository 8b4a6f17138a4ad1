//! Forward passes of the differentiable primitives.

use super::kernels::{self, ConvGeom, PoolGeom};
use super::tape::{crop_planes, pad_planes, sign, Op};
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match shape {
        [n, c, h, w] => Ok((*n, [*c, *h, *w])),
        _ => Err(Error::shape(op, format!("expected [n, c, h, w], got {shape:?}"))),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn check_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables recorded on different tapes");
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, rg, op)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.check_tape(&other);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, rg, op)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let v = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let v = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let v = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::Shift(self.id))
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(false, false, m, n, k, a.data(), b.data(), T::zero(), &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(other, v, Op::Matmul(self.id, other.id)))
    }

    /// Adds a `[c]` bias along dimension 1 of an `[n, c, ...]` tensor.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let shape = x.shape();
        if shape.len() < 2 || b.shape() != [shape[1]] {
            return Err(Error::shape("add_bias", format!("bias {:?} for input {shape:?}", b.shape())));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut data = x.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.binary(bias, v, Op::AddBias { x: self.id, bias: bias.id }))
    }

    /// Cross-correlation. `self: [n, c, h, w]`, `weight: [m, c, kh, kw]`,
    /// optional `bias: [m]`.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (batch, image) = image_dims("conv2d", x.shape())?;
        let [m, wc, kh, kw] = match w.shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(Error::shape("conv2d", format!("weight must be [m, c, kh, kw], got {s:?}"))),
        };
        if wc != image[0] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {wc}", image[0]),
            ));
        }
        let geom = ConvGeom::for_image(image, m, [kh, kw], stride, pad)?;
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [m] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {m} filters", b.shape())));
            }
        }
        let out = kernels::conv2d_forward(x.data(), w.data(), b.as_ref().map(|b| b.data()), &geom, batch);
        let v = Tensor::new(vec![batch, m, geom.out_h, geom.out_w], out)?;
        let mut rg = self.requires_grad() || weight.requires_grad();
        if let Some(b) = bias {
            self.check_tape(&b);
            rg |= b.requires_grad();
        }
        self.check_tape(&weight);
        let op = Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom };
        Ok(self.tape.push(v, rg, op))
    }

    /// Transposed convolution (the adjoint of [`Var::conv2d`] in its input).
    /// `self: [n, c, h, w]`, `weight: [c, m, kh, kw]`, optional `bias: [m]`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (batch, input) = image_dims("conv_transpose2d", x.shape())?;
        let [wc, m, kh, kw] = match w.shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("weight must be [c, m, kh, kw], got {s:?}"),
                ))
            }
        };
        if wc != input[0] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {} channels, kernel expects {wc}", input[0]),
            ));
        }
        let geom = ConvGeom::for_transpose(input, m, [kh, kw], stride, pad)?;
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [m] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias {:?} for {m} output channels", b.shape()),
                ));
            }
        }
        let out = kernels::conv_transpose2d_forward(x.data(), w.data(), b.as_ref().map(|b| b.data()), &geom, batch);
        let v = Tensor::new(vec![batch, m, geom.height, geom.width], out)?;
        let mut rg = self.requires_grad() || weight.requires_grad();
        if let Some(b) = bias {
            self.check_tape(&b);
            rg |= b.requires_grad();
        }
        self.check_tape(&weight);
        let op = Op::ConvTranspose2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom };
        Ok(self.tape.push(v, rg, op))
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    /// Inverse hyperbolic tangent; inputs are clamped to `±(1 - machine eps)`.
    pub fn arctanh(self) -> Var<'t, T> {
        let lim = T::one() - T::epsilon();
        let v = self.value().map(|x| x.max(-lim).min(lim).atanh());
        self.unary(v, Op::Arctanh(self.id))
    }

    /// Natural log; inputs are floored at the smallest positive normal.
    pub fn log(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(T::min_positive_value()).ln());
        self.unary(v, Op::Log(self.id))
    }

    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(lo).min(hi));
        self.unary(v, Op::Clamp { x: self.id, lo, hi })
    }

    /// Elementwise sign with `sign(0) = 0`; its gradient is zero.
    pub fn sign(self) -> Var<'t, T> {
        let v = self.value().map(sign);
        self.unary(v, Op::Sign(self.id))
    }

    pub fn max_pool2d(self, kernel: [usize; 2], stride: [usize; 2]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (batch, image) = image_dims("max_pool2d", x.shape())?;
        let geom = PoolGeom::new(image, kernel, stride)?;
        let (out, argmax) = kernels::max_pool_forward(x.data(), &geom, batch);
        let v = Tensor::new(vec![batch, image[0], geom.out_h, geom.out_w], out)?;
        Ok(self.unary(v, Op::MaxPool2d { x: self.id, argmax }))
    }

    pub fn avg_pool2d(self, kernel: [usize; 2], stride: [usize; 2]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (batch, image) = image_dims("avg_pool2d", x.shape())?;
        let geom = PoolGeom::new(image, kernel, stride)?;
        let out = kernels::avg_pool_forward(x.data(), &geom, batch);
        let v = Tensor::new(vec![batch, image[0], geom.out_h, geom.out_w], out)?;
        Ok(self.unary(v, Op::AvgPool2d { x: self.id, geom }))
    }

    /// Row-wise softmax of an `[n, k]` tensor.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::shape("softmax", format!("expected [n, k], got {:?}", x.shape())));
        }
        let k = x.sample_len();
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(k.max(1)) {
            data.extend(softmax_row(row));
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / T::lit(x.len().max(1) as f64));
        self.unary(v, Op::Mean(self.id))
    }

    /// Sums everything but the leading dimension: `[n, ...] -> [n]`.
    pub fn sum_per_sample(self) -> Var<'t, T> {
        let x = self.value();
        let data = (0..x.batch()).map(|n| x.sample(n).iter().copied().sum()).collect();
        let v = Tensor::new(vec![x.batch()], data).expect("one entry per sample");
        self.unary(v, Op::SumPerSample(self.id))
    }

    pub fn l1_norm(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().data().iter().map(|x| x.abs()).sum());
        self.unary(v, Op::L1Norm(self.id))
    }

    pub fn l2_norm(self) -> Var<'t, T> {
        let x = self.value();
        let v = Tensor::scalar(x.dot(&x).sqrt());
        self.unary(v, Op::L2Norm(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = vec![x.batch(), x.sample_len()];
        drop(x);
        self.reshape(shape)
    }

    /// Zero-pads both spatial dimensions by `pad` on each side.
    pub fn pad2d(self, pad: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        image_dims("pad2d", x.shape())?;
        let v = pad_planes(&x, pad);
        Ok(self.unary(v, Op::Pad2d { x: self.id, pad }))
    }

    /// Removes `crop` pixels from each spatial border.
    pub fn crop2d(self, crop: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (_, [_, h, w]) = image_dims("crop2d", x.shape())?;
        if 2 * crop >= h || 2 * crop >= w {
            return Err(Error::shape("crop2d", format!("cannot crop {crop} from {h}x{w}")));
        }
        let v = crop_planes(&x, crop);
        Ok(self.unary(v, Op::Crop2d { x: self.id, crop }))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, k) = match x.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::shape("cross_entropy", format!("expected [n, k] logits, got {s:?}"))),
        };
        if labels.len() != n || labels.iter().any(|&y| y >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels in 0..{k} for {n} rows", labels.len()),
            ));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, &y) in x.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let v = Tensor::scalar(loss / T::lit(n.max(1) as f64));
        let op = Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs };
        Ok(self.unary(v, op))
    }

    /// Per-sample logit margin, `[n, k] -> [n]`.
    ///
    /// Targeted: `max(max_{i != t} z_i - z_t, -kappa)` (negative once `t`
    /// wins). Untargeted, with `t` the true class: `max(z_t - max_{i != t}
    /// z_i, -kappa)` (negative once any other class wins).
    pub fn margin_loss(self, target: &[usize], kappa: T, targeted: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, k) = match x.shape() {
            [n, k] if *k >= 2 => (*n, *k),
            s => return Err(Error::shape("margin_loss", format!("expected [n, k>=2] logits, got {s:?}"))),
        };
        if target.len() != n || target.iter().any(|&t| t >= k) {
            return Err(Error::shape("margin_loss", format!("{} targets for {n} rows", target.len())));
        }
        let mut other = Vec::with_capacity(n);
        let mut active = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for (row, &t) in x.data().chunks(k).zip(target) {
            let best = (0..k)
                .filter(|&i| i != t)
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(j) if row[j] >= row[i] => Some(j),
                    _ => Some(i),
                })
                .expect("k >= 2");
            let diff = if targeted { row[best] - row[t] } else { row[t] - row[best] };
            other.push(best);
            active.push(diff > -kappa);
            out.push(diff.max(-kappa));
        }
        let v = Tensor::new(vec![n], out)?;
        let op = Op::Margin { logits: self.id, target: target.to_vec(), other, active, targeted };
        Ok(self.unary(v, op))
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> impl Iterator<Item = T> + '_ {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
    row.iter().map(move |&v| (v - max).exp() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 5, 5], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = x.conv2d(w, None, [1, 1], [0, 0]).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(t(&[1, 2], &[0.0, 0.0])).softmax().unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[3.0, 4.0]));
        let y = x.add(x).unwrap();
        tape.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");

        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let err = x.conv2d(w, None, [1, 1], [0, 0]).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");

        let small = tape.constant(Tensor::zeros(vec![1, 1, 1, 1]));
        assert!(small.max_pool2d([2, 2], [2, 2]).is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(t(&[3], &[-0.5, 0.0, 2.0])).sign();
        assert_eq!(y.value().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first_maximum() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let y = x.max_pool2d([2, 2], [2, 2]).unwrap();
        tape.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_and_arctanh_stay_finite_at_domain_edges() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, -1.0]));
        assert!(x.log().value().data().iter().all(|v| !v.is_nan()));
        assert!(x.arctanh().value().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let loss = z.cross_entropy(&[1]).unwrap();
        assert!((loss.value().data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn margin_loss_respects_kappa_floor() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[2, 3], &[5.0, 1.0, 0.0, 0.0, 4.0, 1.0]));
        let f = z.margin_loss(&[0, 0], 0.5, false).unwrap();
        // row 0: z_t - max other = 4; row 1: 0 - 4 = -4 floored at -0.5
        assert_eq!(f.value().data(), &[4.0, -0.5]);
        let f = z.margin_loss(&[1, 1], 0.0, true).unwrap();
        assert_eq!(f.value().data(), &[4.0, 0.0]);
    }
}

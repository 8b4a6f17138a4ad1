//! Parameterized models instantiated from an [`ArchitectureSpec`].

use super::spec::{ActShape, ArchitectureSpec, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::ops::Range;

/// A named parameter tensor with its freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    /// `<layer>.weight` or `<layer>.bias`
    pub name: String,
    /// Index of the owning layer in the spec.
    pub layer: usize,
    pub value: Tensor<T>,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    spec: ArchitectureSpec,
    params: Vec<Param<T>>,
    /// Per layer: indices of its (weight, bias) in `params`.
    slots: Vec<Option<(usize, usize)>>,
}

/// The parameters of a model placed on a tape for one forward/backward pass.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Substitutes parameter `index` (in [`Model::params`] order).
    pub fn replace(&mut self, index: usize, var: Var<'t, T>) {
        self.vars[index] = var;
    }
}

fn param_shapes(kind: &LayerKind, input: ActShape) -> Option<(Vec<usize>, usize)> {
    let in_c = match input {
        ActShape::Image([c, _, _]) => c,
        ActShape::Flat(n) => n,
    };
    match *kind {
        LayerKind::Conv {
            out_channels, kernel, ..
        } => Some((vec![out_channels, in_c, kernel[0], kernel[1]], out_channels)),
        LayerKind::ConvTranspose {
            out_channels, kernel, ..
        } => Some((vec![in_c, out_channels, kernel[0], kernel[1]], out_channels)),
        LayerKind::Dense {
            in_features,
            out_features,
        } => Some((vec![in_features, out_features], out_features)),
        _ => None,
    }
}

/// Inputs feeding each output unit, for He-uniform scaling.
///
/// For a transposed convolution each output pixel sees on average
/// `in_c * kh * kw / (sh * sw)` inputs.
fn fan_in(kind: &LayerKind, weight_shape: &[usize]) -> usize {
    match *kind {
        LayerKind::Conv { .. } => weight_shape[1..].iter().product(),
        LayerKind::ConvTranspose { stride, .. } => {
            let taps = weight_shape[0] * weight_shape[2] * weight_shape[3];
            (taps / (stride[0] * stride[1])).max(1)
        }
        LayerKind::Dense { in_features, .. } => in_features,
        _ => 1,
    }
}

impl<T: Scalar> Model<T> {
    /// Instantiates `spec` with He-uniform weights and zero biases drawn
    /// deterministically from `seed`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let Some((w_shape, b_len)) = param_shapes(&layer.kind, shapes[i]) else {
                slots.push(None);
                continue;
            };
            let bound = (6.0 / fan_in(&layer.kind, &w_shape) as f64).sqrt();
            let numel: usize = w_shape.iter().product();
            let w: Vec<T> = (0..numel).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
            slots.push(Some((params.len(), params.len() + 1)));
            params.push(Param {
                name: format!("{}.weight", layer.name),
                layer: i,
                value: Tensor::new(w_shape, w)?,
                frozen: false,
            });
            params.push(Param {
                name: format!("{}.bias", layer.name),
                layer: i,
                value: Tensor::zeros(vec![b_len]),
                frozen: false,
            });
        }
        Ok(Model {
            spec: spec.clone(),
            params,
            slots,
        })
    }

    /// Reassembles a model from stored parameters (names and shapes must match
    /// what `spec` requires, one-to-one).
    pub fn from_params(spec: &ArchitectureSpec, params: Vec<Param<T>>) -> Result<Self> {
        let mut model = Self::build(spec, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "spec `{}` needs {} parameter tensors, got {}",
                spec.name,
                model.params.len(),
                params.len()
            )));
        }
        for p in params {
            let slot = model
                .params
                .iter_mut()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
            if slot.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, spec needs {:?}",
                    p.name,
                    p.value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = p.value;
            slot.frozen = p.frozen;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Freezes (or unfreezes) every parameter of the first `layers` layers.
    pub fn set_frozen_before(&mut self, layers: usize, frozen: bool) {
        for p in &mut self.params {
            if p.layer < layers {
                p.frozen = frozen;
            }
        }
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| p.frozen).count()
    }

    /// Copies parameters of identically named layers from `other`, returning
    /// how many tensors were copied.
    pub fn copy_params_from(&mut self, other: &Model<T>) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(q) = other.param(&p.name) {
                if q.value.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "cannot copy `{}`: shape {:?} vs {:?}",
                        p.name,
                        q.value.shape(),
                        p.value.shape()
                    )));
                }
                p.value = q.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// SHA-256 over the names and little-endian bytes of the selected parameters.
    pub fn checksum(&self, frozen_only: bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.frozen || !frozen_only) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    layer: p.layer,
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            slots: self.slots.clone(),
        }
    }

    /// Puts the parameters on `tape`; with `trainable`, unfrozen ones receive
    /// gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable && !p.frozen))
            .collect();
        Bound { vars }
    }

    /// Runs the whole model, or up to the named boundary.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, upto: Option<&str>) -> Result<Var<'t, T>> {
        let bound = self.bind(tape, false);
        let end = match upto {
            Some(m) => self.spec.boundary(m)?,
            None => self.spec.layers.len(),
        };
        self.forward_range(&bound, x, 0..end)
    }

    /// Runs layers `range` on `x` with already bound parameters.
    pub fn forward_range<'t>(&self, bound: &Bound<'t, T>, x: Var<'t, T>, range: Range<usize>) -> Result<Var<'t, T>> {
        let shapes = self.spec.shapes()?;
        let expect = shapes[range.start].dims();
        let got = x.shape();
        if got.len() != expect.len() + 1 || got[1..] != expect[..] {
            return Err(Error::shape(
                "forward",
                format!("`{}` layer {} expects [n, {expect:?}], got {got:?}", self.spec.name, range.start),
            ));
        }
        let mut h = x;
        for i in range {
            let layer = &self.spec.layers[i];
            let wb = self.slots[i].map(|(w, b)| (bound.vars[w], bound.vars[b]));
            h = match (&layer.kind, wb) {
                (&LayerKind::Conv { stride, padding, .. }, Some((w, b))) => h.conv2d(w, Some(b), stride, padding)?,
                (&LayerKind::ConvTranspose { stride, padding, .. }, Some((w, b))) => {
                    h.conv_transpose2d(w, Some(b), stride, padding)?
                }
                (LayerKind::Dense { .. }, Some((w, b))) => {
                    let flat = if h.shape().len() > 2 { h.flatten()? } else { h };
                    flat.matmul(w)?.add_bias(b)?
                }
                (&LayerKind::MaxPool { kernel, stride }, _) => h.max_pool2d(kernel, stride)?,
                (&LayerKind::AvgPool { kernel, stride }, _) => {
                    let s = h.shape();
                    let kernel = kernel.unwrap_or([s[2], s[3]]);
                    h.avg_pool2d(kernel, stride)?
                }
                (LayerKind::Relu, _) => h.relu(),
                (LayerKind::Softmax, _) => h.softmax()?,
                (&LayerKind::ZeroPad { pad }, _) => h.pad2d(pad)?,
                (&LayerKind::Crop { crop }, _) => h.crop2d(crop)?,
                (kind, None) => unreachable!("{} layer without parameters", kind.tag()),
            };
        }
        Ok(h)
    }

    /// Inference without gradients, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, x: &Tensor<T>, upto: Option<&str>, chunk: usize) -> Result<Tensor<T>> {
        let n = x.batch();
        let mut out: Vec<T> = Vec::new();
        let mut tail: Vec<usize> = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let tape = Tape::new();
            let v = self.forward(&tape, tape.constant(x.select(&idx)), upto)?.value();
            tail = v.shape()[1..].to_vec();
            out.extend_from_slice(v.data());
            start = end;
        }
        if n == 0 {
            let end = match upto {
                Some(m) => self.spec.boundary(m)?,
                None => self.spec.layers.len(),
            };
            tail = self.spec.shapes()?[end].dims();
        }
        let mut shape = vec![n];
        shape.extend(tail);
        Tensor::new(shape, out)
    }

    /// Predicted classes (argmax of the logits).
    pub fn classify(&self, x: &Tensor<T>, chunk: usize) -> Result<Vec<usize>> {
        Ok(self.predict(x, Some(super::marker::PRE_SOFTMAX), chunk)?.argmax_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    fn tiny() -> ArchitectureSpec {
        ArchitectureSpec::new(
            "tiny",
            [1, 4, 4],
            vec![
                LayerSpec::conv("c1", 2, 3, 1, 0),
                LayerSpec::relu("r1"),
                LayerSpec::dense("fc", 8, 3),
                LayerSpec::softmax("sm"),
            ],
        )
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a: Model = Model::build(&tiny(), 7).unwrap();
        let b: Model = Model::build(&tiny(), 7).unwrap();
        let c: Model = Model::build(&tiny(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!(a.params().iter().filter(|p| p.name.ends_with(".bias")).all(|p| p.value.sum() == 0.0));
    }

    #[test]
    fn weights_respect_he_bound() {
        let m: Model = Model::build(&tiny(), 1).unwrap();
        let w = &m.param("c1.weight").unwrap().value;
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn empty_spec_is_identity() {
        let spec = ArchitectureSpec::new("id", [1, 2, 2], vec![]);
        let m: Model = Model::build(&spec, 0).unwrap();
        assert!(m.params().is_empty());
        let x = Tensor::from_fn(vec![3, 1, 2, 2], |i| i as f32);
        assert_eq!(m.predict(&x, None, 2).unwrap(), x);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m: Model = Model::build(&tiny(), 0).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        assert!(m.forward(&tape, x, None).is_err());
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        assert!(matches!(m.forward(&tape, x, Some("latent")), Err(Error::UnknownMarker(_))));
    }

    #[test]
    fn softmax_output_rows_sum_to_one() {
        let m: Model = Model::build(&tiny(), 3).unwrap();
        let x = Tensor::from_fn(vec![5, 1, 4, 4], |i| ((i * 37) % 11) as f32 / 11.0);
        let p = m.predict(&x, None, 2).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn from_params_round_trips_and_checks_shapes() {
        let m: Model = Model::build(&tiny(), 3).unwrap();
        let back = Model::from_params(&tiny(), m.params().to_vec()).unwrap();
        assert_eq!(back.params(), m.params());
        let mut bad = m.params().to_vec();
        bad[0].value = Tensor::zeros(vec![1]);
        assert!(Model::from_params(&tiny(), bad).is_err());
    }
}

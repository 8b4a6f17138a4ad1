use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Backward rule of a recorded node; indices refer to earlier tape nodes.
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Shift(usize),
    Matmul(usize, usize),
    AddBias { x: usize, bias: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    ConvTranspose2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Relu(usize),
    Tanh(usize),
    Arctanh(usize),
    Log(usize),
    Clamp { x: usize, lo: T, hi: T },
    Sign(usize),
    MaxPool2d { x: usize, argmax: Vec<usize> },
    AvgPool2d { x: usize, geom: PoolGeom },
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SumPerSample(usize),
    L1Norm(usize),
    L2Norm(usize),
    Reshape(usize),
    Pad2d { x: usize, pad: usize },
    Crop2d { x: usize, crop: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    Margin { logits: usize, target: Vec<usize>, other: Vec<usize>, active: Vec<bool>, targeted: bool },
}

pub(crate) struct Node<T> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

/// Records operations on [`Var`]s and replays them in reverse.
///
/// A tape supports exactly one backward pass; record a fresh tape for the
/// next gradient. Gradients are retained for leaf variables only.
pub struct Tape<T: Scalar = f32> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a tensor recorded on a [`Tape`].
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                consumed: false,
            }),
        }
    }

    /// Places a tensor on the tape.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        inner.grads.push(None);
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = inner.nodes[loss.id].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        inner.consumed = true;
        if !inner.nodes[loss.id].requires_grad {
            return Ok(());
        }
        inner.grads[loss.id] = Some(Tensor::full(shape, T::one()));
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = inner.grads[id].take() else {
                continue;
            };
            propagate(&inner.nodes, id, &grad, &mut inner.grads);
        }
        Ok(())
    }

    /// Gradient accumulated for a leaf after [`Tape::backward`].
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.inner.borrow().grads[var.id].clone()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }
}

/// Adds `delta` into the gradient slot of `id` if that node wants one.
fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, delta: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn wants<T>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn like<T: Scalar>(nodes: &[Node<T>], id: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::new(nodes[id].value.shape().to_vec(), data).expect("gradient shape matches its node")
}

fn elementwise<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    x: usize,
    grad: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) {
    if !wants(nodes, x) {
        return;
    }
    let xv = nodes[x].value.data();
    let data = grad.data().iter().zip(xv).map(|(&g, &v)| f(g, v)).collect();
    accumulate(nodes, grads, x, like(nodes, x, data));
}

/// Gradient for reductions to a scalar: a function of the input value only.
fn map_input<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], x: usize, f: impl Fn(T) -> T) {
    if wants(nodes, x) {
        let d = nodes[x].value.map(f);
        accumulate(nodes, grads, x, d);
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], id: usize, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[id].value;
    let g = grad.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, grad.clone());
            accumulate(nodes, grads, *b, grad.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, grad.clone());
            accumulate(nodes, grads, *b, grad.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let bv = nodes[*b].value.data();
                let d = g.iter().zip(bv).map(|(&g, &v)| g * v).collect();
                accumulate(nodes, grads, *a, like(nodes, *a, d));
            }
            if wants(nodes, *b) {
                let av = nodes[*a].value.data();
                let d = g.iter().zip(av).map(|(&g, &v)| g * v).collect();
                accumulate(nodes, grads, *b, like(nodes, *b, d));
            }
        }
        Op::Scale(x, s) => accumulate(nodes, grads, *x, grad.map(|v| v * *s)),
        Op::Shift(x) => accumulate(nodes, grads, *x, grad.clone()),
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            if wants(nodes, *a) {
                let mut d = vec![T::zero(); m * k];
                kernels::gemm(false, true, m, k, n, g, nodes[*b].value.data(), T::zero(), &mut d);
                accumulate(nodes, grads, *a, like(nodes, *a, d));
            }
            if wants(nodes, *b) {
                let mut d = vec![T::zero(); k * n];
                kernels::gemm(true, false, k, n, m, nodes[*a].value.data(), g, T::zero(), &mut d);
                accumulate(nodes, grads, *b, like(nodes, *b, d));
            }
        }
        Op::AddBias { x, bias } => {
            accumulate(nodes, grads, *x, grad.clone());
            if wants(nodes, *bias) {
                let shape = out.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut d = vec![T::zero(); c];
                for (i, chunk) in g.chunks(inner).enumerate() {
                    d[i % c] += chunk.iter().copied().sum::<T>();
                }
                accumulate(nodes, grads, *bias, like(nodes, *bias, d));
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let batch = out.batch();
            let mut dx = wants(nodes, *x).then(|| vec![T::zero(); nodes[*x].value.len()]);
            let mut dw = wants(nodes, *w).then(|| vec![T::zero(); nodes[*w].value.len()]);
            let mut db = b
                .filter(|&b| wants(nodes, b))
                .map(|b| vec![T::zero(); nodes[b].value.len()]);
            kernels::conv2d_backward(
                nodes[*x].value.data(),
                nodes[*w].value.data(),
                g,
                geom,
                batch,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(d) = dx {
                accumulate(nodes, grads, *x, like(nodes, *x, d));
            }
            if let Some(d) = dw {
                accumulate(nodes, grads, *w, like(nodes, *w, d));
            }
            if let (Some(d), Some(b)) = (db, b) {
                accumulate(nodes, grads, *b, like(nodes, *b, d));
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let batch = out.batch();
            let mut dx = wants(nodes, *x).then(|| vec![T::zero(); nodes[*x].value.len()]);
            let mut dw = wants(nodes, *w).then(|| vec![T::zero(); nodes[*w].value.len()]);
            let mut db = b
                .filter(|&b| wants(nodes, b))
                .map(|b| vec![T::zero(); nodes[b].value.len()]);
            kernels::conv_transpose2d_backward(
                nodes[*x].value.data(),
                nodes[*w].value.data(),
                g,
                geom,
                batch,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(d) = dx {
                accumulate(nodes, grads, *x, like(nodes, *x, d));
            }
            if let Some(d) = dw {
                accumulate(nodes, grads, *w, like(nodes, *w, d));
            }
            if let (Some(d), Some(b)) = (db, b) {
                accumulate(nodes, grads, *b, like(nodes, *b, d));
            }
        }
        Op::Relu(x) => elementwise(nodes, grads, *x, grad, |g, v| if v > T::zero() { g } else { T::zero() }),
        Op::Tanh(x) => {
            if wants(nodes, *x) {
                let d = g.iter().zip(out.data()).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                accumulate(nodes, grads, *x, like(nodes, *x, d));
            }
        }
        Op::Arctanh(x) => {
            let lim = T::one() - T::epsilon();
            elementwise(nodes, grads, *x, grad, |g, v| {
                let v = v.max(-lim).min(lim);
                g / (T::one() - v * v)
            })
        }
        Op::Log(x) => elementwise(nodes, grads, *x, grad, |g, v| g / v.max(T::min_positive_value())),
        Op::Clamp { x, lo, hi } => {
            elementwise(nodes, grads, *x, grad, |g, v| if v >= *lo && v <= *hi { g } else { T::zero() })
        }
        Op::Sign(x) => {
            if wants(nodes, *x) {
                accumulate(nodes, grads, *x, Tensor::zeros(nodes[*x].value.shape().to_vec()));
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if wants(nodes, *x) {
                let mut d = vec![T::zero(); nodes[*x].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                accumulate(nodes, grads, *x, like(nodes, *x, d));
            }
        }
        Op::AvgPool2d { x, geom } => {
            if wants(nodes, *x) {
                let mut d = vec![T::zero(); nodes[*x].value.len()];
                kernels::avg_pool_backward(g, geom, out.batch(), &mut d);
                accumulate(nodes, grads, *x, like(nodes, *x, d));
            }
        }
        Op::Softmax(x) => {
            if wants(nodes, *x) {
                let k = out.sample_len();
                let mut d = Vec::with_capacity(out.len());
                for (y, gr) in out.data().chunks(k).zip(g.chunks(k)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(y.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                accumulate(nodes, grads, *x, like(nodes, *x, d));
            }
        }
        Op::Sum(x) => {
            let shape = nodes[*x].value.shape().to_vec();
            accumulate(nodes, grads, *x, Tensor::full(shape, g[0]));
        }
        Op::Mean(x) => {
            let shape = nodes[*x].value.shape().to_vec();
            let n = T::lit(nodes[*x].value.len().max(1) as f64);
            accumulate(nodes, grads, *x, Tensor::full(shape, g[0] / n));
        }
        Op::SumPerSample(x) => {
            if wants(nodes, *x) {
                let per = nodes[*x].value.sample_len();
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v, per)).collect();
                accumulate(nodes, grads, *x, like(nodes, *x, d));
            }
        }
        Op::L1Norm(x) => map_input(nodes, grads, *x, |v| g[0] * sign(v)),
        Op::L2Norm(x) => {
            let norm = out.data()[0];
            map_input(nodes, grads, *x, |v| {
                if norm > T::zero() {
                    g[0] * v / norm
                } else {
                    T::zero()
                }
            })
        }
        Op::Reshape(x) => {
            let d = grad.data().to_vec();
            accumulate(nodes, grads, *x, like(nodes, *x, d));
        }
        Op::Pad2d { x, pad } => {
            if wants(nodes, *x) {
                let d = crop_planes(grad, *pad);
                accumulate(nodes, grads, *x, d);
            }
        }
        Op::Crop2d { x, crop } => {
            if wants(nodes, *x) {
                let d = pad_planes(grad, *crop);
                accumulate(nodes, grads, *x, d);
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if wants(nodes, *logits) {
                let k = nodes[*logits].value.sample_len();
                let scale = g[0] / T::lit(labels.len().max(1) as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (n, &y) in labels.iter().enumerate() {
                    d[n * k + y] = d[n * k + y] - scale;
                }
                accumulate(nodes, grads, *logits, like(nodes, *logits, d));
            }
        }
        Op::Margin { logits, target, other, active, targeted } => {
            if wants(nodes, *logits) {
                let k = nodes[*logits].value.sample_len();
                let mut d = vec![T::zero(); nodes[*logits].value.len()];
                for n in 0..target.len() {
                    if !active[n] {
                        continue;
                    }
                    let (up, down) = if *targeted { (other[n], target[n]) } else { (target[n], other[n]) };
                    d[n * k + up] += g[n];
                    d[n * k + down] = d[n * k + down] - g[n];
                }
                accumulate(nodes, grads, *logits, like(nodes, *logits, d));
            }
        }
    }
}

pub(crate) fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Zero-pads the two trailing (spatial) dimensions by `pad` on every side.
pub(crate) fn pad_planes<T: Scalar>(t: &Tensor<T>, pad: usize) -> Tensor<T> {
    let shape = t.shape();
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let planes = t.len() / (h * w).max(1);
    let mut data = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        for i in 0..h {
            let src = &t.data()[(p * h + i) * w..(p * h + i + 1) * w];
            let start = (p * ph + i + pad) * pw + pad;
            data[start..start + w].copy_from_slice(src);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[r - 2] = ph;
    out_shape[r - 1] = pw;
    Tensor::new(out_shape, data).expect("padded shape")
}

/// Removes `crop` rows/columns from every side of the two trailing dimensions.
pub(crate) fn crop_planes<T: Scalar>(t: &Tensor<T>, crop: usize) -> Tensor<T> {
    let shape = t.shape();
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let (ch, cw) = (h - 2 * crop, w - 2 * crop);
    let planes = t.len() / (h * w).max(1);
    let mut data = Vec::with_capacity(planes * ch * cw);
    for p in 0..planes {
        for i in 0..ch {
            let start = (p * h + i + crop) * w + crop;
            data.extend_from_slice(&t.data()[start..start + cw]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[r - 2] = ch;
    out_shape[r - 1] = cw;
    Tensor::new(out_shape, data).expect("cropped shape")
}

//! Raw numeric kernels behind the tape ops: GEMM, im2col/col2im and pooling.

use super::Scalar;
use crate::error::{Error, Result};

/// `c[m,n] = op(a)[m,k] * op(b)[k,n] + beta * c`.
///
/// Untransposed operands are row-major `[m,k]` / `[k,n]`; transposed ones
/// are stored as `[k,m]` / `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry shared by a convolution and its transpose.
///
/// The "image" side is the larger `[channels, height, width]` map that the
/// kernel slides over; the "patch" side is the `[patch_channels, out_h,
/// out_w]` map of window positions. For `conv2d` the image is the input; for
/// `conv_transpose2d` it is the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub pad: [usize; 2],
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry for sliding a `kernel` window over a `[c, h, w]` image.
    pub fn for_image(
        image: [usize; 3],
        patch_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Self> {
        let [channels, height, width] = image;
        if stride[0] == 0 || stride[1] == 0 || kernel[0] == 0 || kernel[1] == 0 {
            return Err(Error::shape("conv", "kernel and stride must be positive"));
        }
        let ph = height + 2 * pad[0];
        let pw = width + 2 * pad[1];
        if kernel[0] > ph || kernel[1] > pw {
            return Err(Error::shape(
                "conv",
                format!("kernel {kernel:?} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(ConvGeom {
            channels,
            height,
            width,
            patch_channels,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel[0]) / stride[0] + 1,
            out_w: (pw - kernel[1]) / stride[1] + 1,
        })
    }

    /// Geometry of a transposed convolution taking a `[c, h, w]` input.
    pub fn for_transpose(
        input: [usize; 3],
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Self> {
        let [in_c, h, w] = input;
        if stride[0] == 0 || stride[1] == 0 || kernel[0] == 0 || kernel[1] == 0 {
            return Err(Error::shape("conv_transpose", "kernel and stride must be positive"));
        }
        let full_h = (h.max(1) - 1) * stride[0] + kernel[0];
        let full_w = (w.max(1) - 1) * stride[1] + kernel[1];
        if h == 0 || w == 0 || full_h <= 2 * pad[0] || full_w <= 2 * pad[1] {
            return Err(Error::shape(
                "conv_transpose",
                format!("input {h}x{w} with padding {pad:?} yields an empty output"),
            ));
        }
        Ok(ConvGeom {
            channels: out_channels,
            height: full_h - 2 * pad[0],
            width: full_w - 2 * pad[1],
            patch_channels: in_c,
            kernel,
            stride,
            pad,
            out_h: h,
            out_w: w,
        })
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.patch_channels * self.out_h * self.out_w
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Rows of the im2col matrix: `channels * kh * kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel[0] * self.kernel[1]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1] && self.stride == [1, 1] && self.pad == [0, 0]
    }
}

/// Unfolds one image into a `[channels*kh*kw, out_h*out_w]` matrix.
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [kh, kw] = g.kernel;
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride[0] + ki) as isize - g.pad[0] as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride[1] + kj) as isize - g.pad[1] as isize;
                        *v = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto an image, accumulating overlaps.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let [kh, kw] = g.kernel;
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride[0] + ki) as isize - g.pad[0] as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride[1] + kj) as isize - g.pad[1] as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v += b);
    }
}

fn accumulate_channel_bias<T: Scalar>(grad: &[T], db: &mut [T], plane: usize) {
    for (c, d) in db.iter_mut().enumerate() {
        *d += grad[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

/// Cross-correlation of a batch: `x [n, c, h, w]`, `w [m, c, kh, kw]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    batch: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.patch_len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.positions()]
    };
    for n in 0..batch {
        let xn = &x[n * g.image_len()..(n + 1) * g.image_len()];
        let on = &mut out[n * g.patch_len()..(n + 1) * g.patch_len()];
        let patches: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(
            false,
            false,
            g.patch_channels,
            g.positions(),
            g.col_rows(),
            w,
            patches,
            T::zero(),
            on,
        );
        if let Some(b) = bias {
            add_channel_bias(on, b, g.positions());
        }
    }
    out
}

/// Gradients of `conv2d_forward`; each requested buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &ConvGeom,
    batch: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * g.positions()];
    for n in 0..batch {
        let xn = &x[n * g.image_len()..(n + 1) * g.image_len()];
        let gn = &grad[n * g.patch_len()..(n + 1) * g.patch_len()];
        if let Some(dw) = dw.as_deref_mut() {
            let patches: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(false, true, g.patch_channels, rows, g.positions(), gn, patches, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.image_len()..(n + 1) * g.image_len()];
            if g.is_pointwise() {
                gemm(true, false, rows, g.positions(), g.patch_channels, w, gn, T::one(), dxn);
            } else {
                gemm(true, false, rows, g.positions(), g.patch_channels, w, gn, T::zero(), &mut cols);
                col2im(&cols, g, dxn);
            }
        }
        if let Some(db) = db.as_deref_mut() {
            accumulate_channel_bias(gn, db, g.positions());
        }
    }
}

/// Transposed convolution: `x [n, ic, h, w]`, `w [ic, oc, kh, kw]`.
/// `g` is the geometry built by [`ConvGeom::for_transpose`].
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    batch: usize,
) -> Vec<T> {
    let rows = g.col_rows();
    let mut out = vec![T::zero(); batch * g.image_len()];
    let mut cols = vec![T::zero(); rows * g.positions()];
    for n in 0..batch {
        let xn = &x[n * g.patch_len()..(n + 1) * g.patch_len()];
        let on = &mut out[n * g.image_len()..(n + 1) * g.image_len()];
        gemm(true, false, rows, g.positions(), g.patch_channels, w, xn, T::zero(), &mut cols);
        col2im(&cols, g, on);
        if let Some(b) = bias {
            add_channel_bias(on, b, g.height * g.width);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &ConvGeom,
    batch: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * g.positions()];
    for n in 0..batch {
        let xn = &x[n * g.patch_len()..(n + 1) * g.patch_len()];
        let gn = &grad[n * g.image_len()..(n + 1) * g.image_len()];
        if dx.is_some() || dw.is_some() {
            im2col(gn, g, &mut cols);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.patch_len()..(n + 1) * g.patch_len()];
            gemm(false, false, g.patch_channels, g.positions(), rows, w, &cols, T::one(), dxn);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm(false, true, g.patch_channels, rows, g.positions(), xn, &cols, T::one(), dw);
        }
        if let Some(db) = db.as_deref_mut() {
            accumulate_channel_bias(gn, db, g.height * g.width);
        }
    }
}

/// Pooling window geometry over `[channels, height, width]` maps (no padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(image: [usize; 3], kernel: [usize; 2], stride: [usize; 2]) -> Result<Self> {
        let [channels, height, width] = image;
        if kernel[0] == 0 || kernel[1] == 0 || stride[0] == 0 || stride[1] == 0 {
            return Err(Error::shape("pool", "window and stride must be positive"));
        }
        if kernel[0] > height || kernel[1] > width {
            return Err(Error::shape(
                "pool",
                format!("window {kernel:?} larger than input {height}x{width}"),
            ));
        }
        Ok(PoolGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            out_h: (height - kernel[0]) / stride[0] + 1,
            out_w: (width - kernel[1]) / stride[1] + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_h * self.out_w
    }
}

/// Max pooling; returns the output and, per output element, the flat input
/// index it was taken from (first maximum in scan order).
pub(crate) fn max_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom, batch: usize) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(batch * g.out_len());
    let mut arg = Vec::with_capacity(batch * g.out_len());
    for n in 0..batch {
        for c in 0..g.channels {
            let base = (n * g.channels + c) * g.height * g.width;
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut best = base + oh * g.stride[0] * g.width + ow * g.stride[1];
                    for ki in 0..g.kernel[0] {
                        for kj in 0..g.kernel[1] {
                            let idx = base + (oh * g.stride[0] + ki) * g.width + ow * g.stride[1] + kj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom, batch: usize) -> Vec<T> {
    let scale = T::one() / T::lit((g.kernel[0] * g.kernel[1]) as f64);
    let mut out = Vec::with_capacity(batch * g.out_len());
    for n in 0..batch {
        for c in 0..g.channels {
            let base = (n * g.channels + c) * g.height * g.width;
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = T::zero();
                    for ki in 0..g.kernel[0] {
                        let row = base + (oh * g.stride[0] + ki) * g.width + ow * g.stride[1];
                        acc += x[row..row + g.kernel[1]].iter().copied().sum::<T>();
                    }
                    out.push(acc * scale);
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(grad: &[T], g: &PoolGeom, batch: usize, dx: &mut [T]) {
    let scale = T::one() / T::lit((g.kernel[0] * g.kernel[1]) as f64);
    let mut o = 0;
    for n in 0..batch {
        for c in 0..g.channels {
            let base = (n * g.channels + c) * g.height * g.width;
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let share = grad[o] * scale;
                    o += 1;
                    for ki in 0..g.kernel[0] {
                        let row = base + (oh * g.stride[0] + ki) * g.width + ow * g.stride[1];
                        dx[row..row + g.kernel[1]].iter_mut().for_each(|v| *v += share);
                    }
                }
            }
        }
    }
}

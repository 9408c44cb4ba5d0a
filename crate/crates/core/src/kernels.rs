//! Dense numeric kernels on `[H, W, C]` (channels-last) tensors with their
//! vector-Jacobian products. These are plain functions; the tape wraps them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `C = op(A)·op(B) + beta·C` for row-major matrices. `ta`/`tb` select a
/// transposed view of the stored operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the `m×k`, `k×n` and `m×n` buffers
    // checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

fn hwc(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, &[0, 0, 0], x.shape())),
    }
}

/// Geometry of a square-kernel 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn same3(stride: usize) -> Self {
        Self {
            kernel: 3,
            stride,
            pad: 1,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

fn im2col(x: &Tensor, g: ConvGeom) -> (Vec<f64>, usize, usize) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = g.out_size(h, w);
    let kk = g.kernel * g.kernel * c;
    let mut cols = vec![0.0; ho * wo * kk];
    let xd = x.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * c;
                    let dst = (ky * g.kernel + kx) * c;
                    row[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], shape: &[usize], g: ConvGeom) -> Tensor {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = g.out_size(h, w);
    let kk = g.kernel * g.kernel * c;
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * c;
                    let src = (ky * g.kernel + kx) * c;
                    for ch in 0..c {
                        od[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    out
}

fn check_conv(x: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeom) -> Result<(usize, usize)> {
    let (h, w, c) = hwc("conv2d", x)?;
    let co = weight.shape().first().copied().unwrap_or(0);
    weight.expect_shape("conv2d weight", &[co, g.kernel, g.kernel, c])?;
    bias.expect_shape("conv2d bias", &[co])?;
    if h + 2 * g.pad < g.kernel || w + 2 * g.pad < g.kernel || g.stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: input {h}x{w} too small for kernel {} pad {}",
            g.kernel, g.pad
        )));
    }
    Ok((co, c))
}

/// 2D convolution. `weight` is `[Cout, k, k, Cin]`, `bias` is `[Cout]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let (co, c) = check_conv(x, weight, bias, g)?;
    let (cols, ho, wo) = im2col(x, g);
    let kk = g.kernel * g.kernel * c;
    let mut out: Vec<f64> = (0..ho * wo).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(ho * wo, kk, co, &cols, false, weight.data(), true, &mut out, 1.0);
    Tensor::new(&[ho, wo, co], out)
}

/// Gradients `(dx, dweight, dbias)` of [`conv2d`] given the output gradient.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    g: ConvGeom,
    grad: &Tensor,
    need_x: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let c = x.shape()[2];
    let co = weight.shape()[0];
    let (cols, ho, wo) = im2col(x, g);
    grad.expect_shape("conv2d grad", &[ho, wo, co])?;
    let kk = g.kernel * g.kernel * c;
    let mut gw = vec![0.0; co * kk];
    gemm(co, ho * wo, kk, grad.data(), true, &cols, false, &mut gw, 0.0);
    let mut gb = vec![0.0; co];
    for row in grad.data().chunks_exact(co) {
        for (b, v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    let gx = if need_x {
        let mut gcols = vec![0.0; ho * wo * kk];
        gemm(ho * wo, co, kk, grad.data(), false, weight.data(), false, &mut gcols, 0.0);
        Some(col2im(&gcols, x.shape(), g))
    } else {
        None
    };
    Ok((gx, Tensor::new(weight.shape(), gw)?, Tensor::new(&[co], gb)?))
}

/// Fully connected layer on a flat input: `y = W x + b`, `W` is `[out, in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n_in = x.len();
    let n_out = bias.len();
    weight.expect_shape("linear weight", &[n_out, n_in])?;
    let mut y = bias.data().to_vec();
    gemm(n_out, n_in, 1, weight.data(), false, x.data(), false, &mut y, 1.0);
    Tensor::new(&[n_out], y)
}

/// Gradients `(dx, dweight, dbias)` of [`linear`].
pub fn linear_backward(x: &Tensor, weight: &Tensor, grad: &Tensor, need_x: bool) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    grad.expect_shape("linear grad", &[n_out])?;
    let mut gw = vec![0.0; n_out * n_in];
    gemm(n_out, 1, n_in, grad.data(), false, x.data(), false, &mut gw, 0.0);
    let gx = if need_x {
        let mut gx = vec![0.0; n_in];
        gemm(1, n_out, n_in, grad.data(), false, weight.data(), false, &mut gx, 0.0);
        Some(Tensor::new(x.shape(), gx)?)
    } else {
        None
    };
    Ok((gx, Tensor::new(weight.shape(), gw)?, grad.clone()))
}

/// Non-overlapping `k×k` average pooling. Trailing rows/columns that do not
/// fill a window are dropped.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = hwc("avg_pool", x)?;
    if k == 0 || h < k || w < k {
        return Err(Error::InvalidArgument(format!("avg_pool: window {k} for {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let mut out = Tensor::zeros(&[ho, wo, c]);
    let inv = 1.0 / (k * k) as f64;
    let xd = x.data();
    let od = out.data_mut();
    for y in 0..ho * k {
        for xx in 0..wo * k {
            let src = (y * w + xx) * c;
            let dst = ((y / k) * wo + xx / k) * c;
            for ch in 0..c {
                od[dst + ch] += xd[src + ch] * inv;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input_shape: &[usize], k: usize, grad: &Tensor) -> Tensor {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let wo = w / k;
    let ho = h / k;
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(input_shape);
    let gd = grad.data();
    let od = out.data_mut();
    for y in 0..ho * k {
        for xx in 0..wo * k {
            let dst = (y * w + xx) * c;
            let src = ((y / k) * wo + xx / k) * c;
            for ch in 0..c {
                od[dst + ch] = gd[src + ch] * inv;
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = hwc("upsample", x)?;
    let (ho, wo) = (h * k, w * k);
    let xd = x.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        for xx in 0..wo {
            let src = ((y / k) * w + xx / k) * c;
            out.extend_from_slice(&xd[src..src + c]);
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

pub fn upsample_nearest_backward(input_shape: &[usize], k: usize, grad: &Tensor) -> Tensor {
    let (w, c) = (input_shape[1], input_shape[2]);
    let wo = w * k;
    let mut out = Tensor::zeros(input_shape);
    let od = out.data_mut();
    for (i, px) in grad.data().chunks_exact(c).enumerate() {
        let (y, xx) = (i / wo, i % wo);
        let dst = ((y / k) * w + xx / k) * c;
        for ch in 0..c {
            od[dst + ch] += px[ch];
        }
    }
    out
}

/// Mean over all spatial positions, `[H, W, C] -> [C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc("global_avg_pool", x)?;
    let mut out = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let n = input_shape[0] * input_shape[1];
    let inv = 1.0 / n as f64;
    let data = (0..n).flat_map(|_| grad.data().iter().map(|g| g * inv)).collect();
    Tensor::new(input_shape, data).expect("shape")
}

/// Channel concatenation of two `[H, W, *]` maps.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, ca) = hwc("concat", a)?;
    let (hb, wb, cb) = hwc("concat", b)?;
    if (h, w) != (hb, wb) {
        return Err(Error::shape("concat", &[h, w, cb], b.shape()));
    }
    if cb == 0 {
        return Ok(a.clone());
    }
    if ca == 0 {
        return Ok(b.clone());
    }
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(&pa[..ca]);
        out.extend_from_slice(&pb[..cb]);
    }
    Tensor::new(&[h, w, ca + cb], out)
}

pub fn split_channels(grad: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (h, w, c) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let cb = c - ca;
    let mut ga = Vec::with_capacity(h * w * ca);
    let mut gb = Vec::with_capacity(h * w * cb);
    for px in grad.data().chunks_exact(c) {
        ga.extend_from_slice(&px[..ca]);
        gb.extend_from_slice(&px[ca..]);
    }
    (
        Tensor::new(&[h, w, ca], ga).expect("shape"),
        Tensor::new(&[h, w, cb], gb).expect("shape"),
    )
}

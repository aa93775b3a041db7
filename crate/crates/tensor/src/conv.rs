//! im2col based 2-D convolution and its transpose.
//!
//! Weights use the PyTorch layouts: `[Cout, Cin, kh, kw]` for convolution and
//! `[Cin, Cout, kh, kw]` for transposed convolution. Batch elements are
//! processed independently; weight gradients are reduced in batch order so
//! results do not depend on scheduling.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv_transpose_output_size(size: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    if size == 0 || stride == 0 {
        return None;
    }
    ((size - 1) * stride + k + out_pad).checked_sub(2 * pad).filter(|&v| v > 0)
}

/// Unfolds one `[C, H, W]` sample into `[C·kh·kw, out_h·out_w]`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `[C·kh·kw, out_h·out_w]` columns back into a `[C, H, W]` sample.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel(op: &'static str, kh: usize, kw: usize, stride: usize) -> Result<()> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::arg(op, format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(TensorError::arg(op, "stride must be at least 1"));
    }
    Ok(())
}

pub(crate) struct ConvPlan {
    pub batch: usize,
    pub cout: usize,
    pub geom: Geometry,
}

pub(crate) fn plan_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvPlan> {
    let [n, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, wcin, kh, kw] = w.dims4("conv2d")?;
    check_kernel("conv2d", kh, kw, stride)?;
    if cin != wcin {
        return Err(TensorError::shape("conv2d", format!("input has {cin} channels, kernel expects {wcin}")));
    }
    let out_h = conv_output_size(h, kh, stride, pad)
        .ok_or_else(|| TensorError::shape("conv2d", format!("height {h} too small for kernel {kh}")))?;
    let out_w = conv_output_size(wd, kw, stride, pad)
        .ok_or_else(|| TensorError::shape("conv2d", format!("width {wd} too small for kernel {kw}")))?;
    Ok(ConvPlan {
        batch: n,
        cout,
        geom: Geometry { channels: cin, height: h, width: wd, kh, kw, stride, pad, out_h, out_w },
    })
}

/// Direct 2-D cross-correlation, no bias.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let plan = plan_conv2d(x, w, stride, pad)?;
    let g = plan.geom;
    let in_len = g.channels * g.height * g.width;
    let out_len = plan.cout * g.cols();
    let mut out = vec![T::zero(); plan.batch * out_len];
    out.par_chunks_mut(out_len.max(1)).enumerate().for_each(|(n, dst)| {
        let xs = &x.data()[n * in_len..(n + 1) * in_len];
        let mut scratch;
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            scratch = vec![T::zero(); g.rows() * g.cols()];
            im2col(xs, &g, &mut scratch);
            &scratch
        };
        let (k, p) = (g.rows(), g.cols());
        T::gemm(plan.cout, k, p, T::one(), w.data(), (k as isize, 1), cols, (p as isize, 1), T::zero(), dst, (p as isize, 1));
    });
    Tensor::new(vec![plan.batch, plan.cout, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let plan = plan_conv2d(x, w, stride, pad)?;
    let g = plan.geom;
    let (k, p) = (g.rows(), g.cols());
    let in_len = g.channels * g.height * g.width;
    let out_len = plan.cout * p;

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..plan.batch)
        .into_par_iter()
        .map(|n| {
            let xs = &x.data()[n * in_len..(n + 1) * in_len];
            let gs = &grad_out[n * out_len..(n + 1) * out_len];
            let dw = need_kernel.then(|| {
                let mut scratch;
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    scratch = vec![T::zero(); k * p];
                    im2col(xs, &g, &mut scratch);
                    &scratch
                };
                let mut dw = vec![T::zero(); plan.cout * k];
                T::gemm(plan.cout, p, k, T::one(), gs, (p as isize, 1), cols, (1, p as isize), T::zero(), &mut dw, (k as isize, 1));
                dw
            });
            let dx = need_input.then(|| {
                let mut dcols = vec![T::zero(); k * p];
                T::gemm(k, plan.cout, p, T::one(), w.data(), (1, k as isize), gs, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                if g.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); in_len];
                    col2im(&dcols, &g, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_input.then(|| Vec::with_capacity(plan.batch * in_len));
    let mut dw_all = need_kernel.then(|| vec![T::zero(); plan.cout * k]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            for (a, b) in all.iter_mut().zip(dw) {
                *a = *a + b;
            }
        }
    }
    Ok((dx_all, dw_all))
}

pub(crate) fn plan_conv2d_transpose<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<ConvPlan> {
    let [n, cin, h, wd] = x.dims4("conv2d_transpose")?;
    let [wcin, cout, kh, kw] = w.dims4("conv2d_transpose")?;
    check_kernel("conv2d_transpose", kh, kw, stride)?;
    if cin != wcin {
        return Err(TensorError::shape("conv2d_transpose", format!("input has {cin} channels, kernel expects {wcin}")));
    }
    if out_pad >= stride {
        return Err(TensorError::arg("conv2d_transpose", "output padding must be smaller than stride"));
    }
    let oh = conv_transpose_output_size(h, kh, stride, pad, out_pad)
        .ok_or_else(|| TensorError::shape("conv2d_transpose", "empty output height"))?;
    let ow = conv_transpose_output_size(wd, kw, stride, pad, out_pad)
        .ok_or_else(|| TensorError::shape("conv2d_transpose", "empty output width"))?;
    // Geometry of the adjoint convolution: it maps the [cout, oh, ow] output
    // grid back onto the [cin, h, wd] input grid.
    let geom = Geometry { channels: cout, height: oh, width: ow, kh, kw, stride, pad, out_h: h, out_w: wd };
    if conv_output_size(oh, kh, stride, pad) != Some(h) || conv_output_size(ow, kw, stride, pad) != Some(wd) {
        return Err(TensorError::shape("conv2d_transpose", "inconsistent stride/padding geometry"));
    }
    Ok(ConvPlan { batch: n, cout: cin, geom })
}

/// Transposed convolution (scatter-add upsampling), the adjoint of
/// [`conv2d_forward`]. Output extent is `(H−1)·stride − 2·pad + k + out_pad`.
pub fn conv2d_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>> {
    let plan = plan_conv2d_transpose(x, w, stride, pad, out_pad)?;
    let g = plan.geom;
    let cin = plan.cout;
    let (k, p) = (g.rows(), g.cols());
    let in_len = cin * p;
    let out_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); plan.batch * out_len];
    out.par_chunks_mut(out_len.max(1)).enumerate().for_each(|(n, dst)| {
        let xs = &x.data()[n * in_len..(n + 1) * in_len];
        let mut cols = vec![T::zero(); k * p];
        T::gemm(k, cin, p, T::one(), w.data(), (1, k as isize), xs, (p as isize, 1), T::zero(), &mut cols, (p as isize, 1));
        if g.is_pointwise() {
            dst.copy_from_slice(&cols);
        } else {
            col2im(&cols, &g, dst);
        }
    });
    Tensor::new(vec![plan.batch, g.channels, g.height, g.width], out)
}

pub(crate) fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    out_pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let plan = plan_conv2d_transpose(x, w, stride, pad, out_pad)?;
    let g = plan.geom;
    let cin = plan.cout;
    let (k, p) = (g.rows(), g.cols());
    let in_len = cin * p;
    let out_len = g.channels * g.height * g.width;

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..plan.batch)
        .into_par_iter()
        .map(|n| {
            let xs = &x.data()[n * in_len..(n + 1) * in_len];
            let gs = &grad_out[n * out_len..(n + 1) * out_len];
            let mut scratch;
            let gcols: &[T] = if g.is_pointwise() {
                gs
            } else {
                scratch = vec![T::zero(); k * p];
                im2col(gs, &g, &mut scratch);
                &scratch
            };
            let dx = need_input.then(|| {
                let mut dx = vec![T::zero(); in_len];
                T::gemm(cin, k, p, T::one(), w.data(), (k as isize, 1), gcols, (p as isize, 1), T::zero(), &mut dx, (p as isize, 1));
                dx
            });
            let dw = need_kernel.then(|| {
                let mut dw = vec![T::zero(); cin * k];
                T::gemm(cin, p, k, T::one(), xs, (p as isize, 1), gcols, (1, p as isize), T::zero(), &mut dw, (k as isize, 1));
                dw
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_input.then(|| Vec::with_capacity(plan.batch * in_len));
    let mut dw_all = need_kernel.then(|| vec![T::zero(); cin * k]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            for (a, b) in all.iter_mut().zip(dw) {
                *a = *a + b;
            }
        }
    }
    Ok((dx_all, dw_all))
}

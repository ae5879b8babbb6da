//! Direct-loop kernels shared by the training graph (`f64`) and the inference
//! executor (`f32` or `f64`).
//!
//! Every kernel works on whole output planes. With [`Exec::Parallel`] (and the
//! `parallel` feature) planes are distributed over a rayon pool; each plane is
//! still produced by the same sequential loop, so results are bitwise equal to
//! [`Exec::Sequential`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Shape;

/// Kernel scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Sequential,
    /// Plane-parallel; falls back to sequential without the `parallel` feature.
    Parallel,
}

/// Scalar types the kernels run on.
pub trait Scalar: Float + Send + Sync + core::fmt::Debug + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn for_each_plane<T, F>(buf: &mut [T], plane: usize, exec: Exec, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if plane == 0 || buf.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        buf.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    let _ = exec;
    buf.chunks_mut(plane)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Half-open range of indices `o` in `0..iter_len` whose tap `o*stride + k - pad`
/// falls inside `0..target_len`.
#[inline]
fn tap_range(iter_len: usize, target_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let top = target_len + pad;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - k - 1) / stride + 1).min(iter_len);
    (lo.min(hi), hi)
}

/// Output shape of a strided, zero-padded cross-correlation.
pub fn conv2d_output_shape(input: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(arg_err("conv2d", "stride must be at least 1"));
    }
    if input.c != kernel.c {
        return Err(shape_err(
            "conv2d",
            format!("input has {} channels but kernel {} expects {}", input.c, kernel, kernel.c),
        ));
    }
    let ph = input.h + 2 * pad;
    let pw = input.w + 2 * pad;
    if ph < kernel.h || pw < kernel.w || kernel.h == 0 || kernel.w == 0 || kernel.n == 0 {
        return Err(Error::EmptyOutput { op: "conv2d", input });
    }
    let out = Shape::new(input.n, kernel.n, (ph - kernel.h) / stride + 1, (pw - kernel.w) / stride + 1);
    if out.numel() == 0 {
        return Err(Error::EmptyOutput { op: "conv2d", input });
    }
    Ok(out)
}

/// Output shape of a transposed convolution with kernel `(in_c, out_c, kh, kw)`.
pub fn conv_transpose2d_output_shape(input: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(arg_err("conv_transpose2d", "stride must be at least 1"));
    }
    if input.c != kernel.n {
        return Err(shape_err(
            "conv_transpose2d",
            format!("input has {} channels but kernel {} expects {}", input.c, kernel, kernel.n),
        ));
    }
    if kernel.h < stride || kernel.w < stride {
        return Err(arg_err(
            "conv_transpose2d",
            format!("kernel {}x{} is smaller than stride {}", kernel.h, kernel.w, stride),
        ));
    }
    let full_h = input.h.saturating_sub(1) * stride + kernel.h;
    let full_w = input.w.saturating_sub(1) * stride + kernel.w;
    if input.h == 0 || input.w == 0 || full_h <= 2 * pad || full_w <= 2 * pad || kernel.c == 0 {
        return Err(Error::EmptyOutput { op: "conv_transpose2d", input });
    }
    Ok(Shape::new(input.n, kernel.c, full_h - 2 * pad, full_w - 2 * pad))
}

fn check_len<T>(op: &'static str, what: &str, buf: &[T], shape: Shape) -> Result<()> {
    if buf.len() != shape.numel() {
        return Err(shape_err(op, format!("{what} has {} elements, shape {} needs {}", buf.len(), shape, shape.numel())));
    }
    Ok(())
}

/// Cross-correlation `out[n,o] = bias[o] + sum_{i,kh,kw} k[o,i,kh,kw] * x[n,i,..]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &[T],
    ks: Shape,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    exec: Exec,
) -> Result<(Vec<T>, Shape)> {
    let os = conv2d_output_shape(xs, ks, stride, pad)?;
    check_len("conv2d", "input", x, xs)?;
    check_len("conv2d", "kernel", k, ks)?;
    if let Some(b) = bias {
        if b.len() != ks.n {
            return Err(shape_err("conv2d", format!("bias has {} entries for {} output channels", b.len(), ks.n)));
        }
    }
    let mut out = vec![T::zero(); os.numel()];
    correlate(x, xs, k, ks, bias, stride, pad, &mut out, os, exec);
    Ok((out, os))
}

/// Core gather loop shared by conv2d forward and transposed-conv input gradients.
/// `k` is indexed `[o, i, kh, kw]`, `x` has `ks.c` channels and `out` has `ks.n`.
#[allow(clippy::too_many_arguments)]
fn correlate<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &[T],
    ks: Shape,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
    os: Shape,
    exec: Exec,
) {
    let (ho, wo) = (os.h, os.w);
    let (h, w) = (xs.h, xs.w);
    for_each_plane(out, os.plane(), exec, |idx, plane| {
        let n = idx / os.c;
        let o = idx % os.c;
        let b = bias.map_or(T::zero(), |b| b[o]);
        plane.iter_mut().for_each(|v| *v = b);
        for i in 0..ks.c {
            let xplane = &x[xs.index(n, i, 0, 0)..][..xs.plane()];
            for kh in 0..ks.h {
                let (oh_lo, oh_hi) = tap_range(ho, h, stride, pad, kh);
                for kw in 0..ks.w {
                    let (ow_lo, ow_hi) = tap_range(wo, w, stride, pad, kw);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = k[ks.index(o, i, kh, kw)];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - pad;
                        let row_in = &xplane[ih * w..(ih + 1) * w];
                        let row_out = &mut plane[oh * wo..(oh + 1) * wo];
                        if stride == 1 {
                            let start = ow_lo + kw - pad;
                            let src = &row_in[start..start + (ow_hi - ow_lo)];
                            for (dst, s) in row_out[ow_lo..ow_hi].iter_mut().zip(src) {
                                *dst = *dst + wv * *s;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                row_out[ow] = row_out[ow] + wv * row_in[ow * stride + kw - pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Core scatter loop: `out[n,i,..] += k[o,i,kh,kw] * g[n,o,..]`, the adjoint of
/// [`correlate`] with respect to its input. `out` has shape `outs` (channels `ks.c`).
#[allow(clippy::too_many_arguments)]
fn scatter<T: Scalar>(g: &[T], gs: Shape, k: &[T], ks: Shape, stride: usize, pad: usize, out: &mut [T], outs: Shape, exec: Exec) {
    let (h, w) = (outs.h, outs.w);
    let (ho, wo) = (gs.h, gs.w);
    for_each_plane(out, outs.plane(), exec, |idx, plane| {
        let n = idx / outs.c;
        let i = idx % outs.c;
        plane.iter_mut().for_each(|v| *v = T::zero());
        for o in 0..ks.n {
            let gplane = &g[gs.index(n, o, 0, 0)..][..gs.plane()];
            for kh in 0..ks.h {
                let (oh_lo, oh_hi) = tap_range(ho, h, stride, pad, kh);
                for kw in 0..ks.w {
                    let (ow_lo, ow_hi) = tap_range(wo, w, stride, pad, kw);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = k[ks.index(o, i, kh, kw)];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - pad;
                        let row_g = &gplane[oh * wo..(oh + 1) * wo];
                        let row_out = &mut plane[ih * w..(ih + 1) * w];
                        for (ow, gv) in row_g.iter().enumerate().take(ow_hi).skip(ow_lo) {
                            let iw = ow * stride + kw - pad;
                            row_out[iw] = row_out[iw] + wv * *gv;
                        }
                    }
                }
            }
        }
    });
}

/// Kernel gradient of [`correlate`]: `gk[o,i,kh,kw] = sum g[n,o,oh,ow] * x[n,i,ih,iw]`.
#[allow(clippy::too_many_arguments)]
fn correlate_kernel_grad<T: Scalar>(x: &[T], xs: Shape, g: &[T], gs: Shape, ks: Shape, stride: usize, pad: usize, exec: Exec) -> Vec<T> {
    let mut gk = vec![T::zero(); ks.numel()];
    let per_o = ks.c * ks.h * ks.w;
    let (ho, wo) = (gs.h, gs.w);
    let (h, w) = (xs.h, xs.w);
    for_each_plane(&mut gk, per_o, exec, |o, chunk| {
        for i in 0..ks.c {
            for kh in 0..ks.h {
                let (oh_lo, oh_hi) = tap_range(ho, h, stride, pad, kh);
                for kw in 0..ks.w {
                    let (ow_lo, ow_hi) = tap_range(wo, w, stride, pad, kw);
                    let mut acc = T::zero();
                    for n in 0..xs.n {
                        let xplane = &x[xs.index(n, i, 0, 0)..][..xs.plane()];
                        let gplane = &g[gs.index(n, o, 0, 0)..][..gs.plane()];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - pad;
                            let row_x = &xplane[ih * w..(ih + 1) * w];
                            let row_g = &gplane[oh * wo..(oh + 1) * wo];
                            for ow in ow_lo..ow_hi {
                                acc = acc + row_g[ow] * row_x[ow * stride + kw - pad];
                            }
                        }
                    }
                    chunk[(i * ks.h + kh) * ks.w + kw] = acc;
                }
            }
        }
    });
    gk
}

/// Sum of `g` over batch and spatial positions, per channel.
pub fn channel_sums<T: Scalar>(g: &[T], gs: Shape) -> Vec<T> {
    let mut out = vec![T::zero(); gs.c];
    for n in 0..gs.n {
        for (c, acc) in out.iter_mut().enumerate() {
            let plane = &g[gs.index(n, c, 0, 0)..][..gs.plane()];
            *acc = plane.iter().fold(*acc, |a, v| a + *v);
        }
    }
    out
}

/// Gradients of [`conv2d`]: `(d input, d kernel, d bias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &[T],
    ks: Shape,
    g: &[T],
    gs: Shape,
    stride: usize,
    pad: usize,
    exec: Exec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); xs.numel()];
    scatter(g, gs, k, ks, stride, pad, &mut gx, xs, exec);
    let gk = correlate_kernel_grad(x, xs, g, gs, ks, stride, pad, exec);
    let gb = channel_sums(g, gs);
    (gx, gk, gb)
}

/// Transposed convolution with kernel `(in_c, out_c, kh, kw)`: the adjoint of
/// [`conv2d`] with the same kernel, plus an optional per-output-channel bias.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &[T],
    ks: Shape,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    exec: Exec,
) -> Result<(Vec<T>, Shape)> {
    let os = conv_transpose2d_output_shape(xs, ks, stride, pad)?;
    check_len("conv_transpose2d", "input", x, xs)?;
    check_len("conv_transpose2d", "kernel", k, ks)?;
    if let Some(b) = bias {
        if b.len() != ks.c {
            return Err(shape_err(
                "conv_transpose2d",
                format!("bias has {} entries for {} output channels", b.len(), ks.c),
            ));
        }
    }
    let mut out = vec![T::zero(); os.numel()];
    scatter(x, xs, k, ks, stride, pad, &mut out, os, exec);
    if let Some(b) = bias {
        for n in 0..os.n {
            for (c, bv) in b.iter().enumerate() {
                let plane = &mut out[os.index(n, c, 0, 0)..][..os.plane()];
                plane.iter_mut().for_each(|v| *v = *v + *bv);
            }
        }
    }
    Ok((out, os))
}

/// Gradients of [`conv_transpose2d`]: `(d input, d kernel, d bias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    xs: Shape,
    k: &[T],
    ks: Shape,
    g: &[T],
    gs: Shape,
    stride: usize,
    pad: usize,
    exec: Exec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); xs.numel()];
    correlate(g, gs, k, ks, None, stride, pad, &mut gx, xs, exec);
    // The transposed op's output plays the role of the correlation input.
    let gk = correlate_kernel_grad(g, gs, x, xs, ks, stride, pad, exec);
    let gb = channel_sums(g, gs);
    (gx, gk, gb)
}

/// Output shape of a `k`x`k` max pool.
pub fn maxpool2d_output_shape(xs: Shape, k: usize, stride: usize) -> Result<Shape> {
    if k == 0 || stride == 0 {
        return Err(arg_err("maxpool2d", "window and stride must be at least 1"));
    }
    if xs.h < k || xs.w < k {
        return Err(arg_err("maxpool2d", format!("window {k} is larger than input {}x{}", xs.h, xs.w)));
    }
    Ok(Shape::new(xs.n, xs.c, (xs.h - k) / stride + 1, (xs.w - k) / stride + 1))
}

/// Max pool returning values and the flat input index of each window's maximum
/// (first maximum in row-major scan order on ties).
pub fn maxpool2d<T: Scalar>(x: &[T], xs: Shape, k: usize, stride: usize) -> Result<(Vec<T>, Vec<usize>, Shape)> {
    let os = maxpool2d_output_shape(xs, k, stride)?;
    check_len("maxpool2d", "input", x, xs)?;
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = xs.index(n, c, 0, 0);
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut best = base + oh * stride * xs.w + ow * stride;
                    let mut best_v = x[best];
                    for kh in 0..k {
                        let row = base + (oh * stride + kh) * xs.w + ow * stride;
                        for kw in 0..k {
                            let v = x[row + kw];
                            if v > best_v {
                                best_v = v;
                                best = row + kw;
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    Ok((out, arg, os))
}

pub fn maxpool2d_backward<T: Scalar>(argmax: &[usize], g: &[T], xs: Shape) -> Vec<T> {
    let mut gx = vec![T::zero(); xs.numel()];
    for (a, gv) in argmax.iter().zip(g) {
        gx[*a] = gx[*a] + *gv;
    }
    gx
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels<T: Scalar>(x: &[T], xs: Shape) -> Result<Vec<T>> {
    if xs.c == 0 {
        return Err(arg_err("softmax_channels", "needs at least one channel"));
    }
    check_len("softmax_channels", "input", x, xs)?;
    let mut out = vec![T::zero(); x.len()];
    let plane = xs.plane();
    let mut scratch = vec![T::zero(); xs.c];
    for n in 0..xs.n {
        let base = xs.index(n, 0, 0, 0);
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for c in 0..xs.c {
                m = m.max(x[base + c * plane + p]);
            }
            let mut sum = T::zero();
            for (c, s) in scratch.iter_mut().enumerate() {
                *s = (x[base + c * plane + p] - m).exp();
                sum = sum + *s;
            }
            for (c, s) in scratch.iter().enumerate() {
                out[base + c * plane + p] = *s / sum;
            }
        }
    }
    Ok(out)
}

/// Input gradient of the channel softmax given its output `s`.
pub fn softmax_channels_backward<T: Scalar>(s: &[T], g: &[T], xs: Shape) -> Vec<T> {
    let mut gx = vec![T::zero(); s.len()];
    let plane = xs.plane();
    for n in 0..xs.n {
        let base = xs.index(n, 0, 0, 0);
        for p in 0..plane {
            let mut dot = T::zero();
            for c in 0..xs.c {
                let i = base + c * plane + p;
                dot = dot + g[i] * s[i];
            }
            for c in 0..xs.c {
                let i = base + c * plane + p;
                gx[i] = s[i] * (g[i] - dot);
            }
        }
    }
    gx
}

/// `max(0, x) + a_c * min(0, x)` with one slope per channel.
pub fn prelu<T: Scalar>(x: &[T], xs: Shape, slopes: &[T]) -> Result<Vec<T>> {
    if slopes.len() != xs.c {
        return Err(shape_err("prelu", format!("{} slopes for {} channels", slopes.len(), xs.c)));
    }
    check_len("prelu", "input", x, xs)?;
    let plane = xs.plane();
    let mut out = Vec::with_capacity(x.len());
    for (i, v) in x.iter().enumerate() {
        let a = slopes[(i / plane) % xs.c];
        out.push(if *v > T::zero() { *v } else { a * *v });
    }
    Ok(out)
}

/// Gradients of [`prelu`]: `(d input, d slopes)`.
pub fn prelu_backward<T: Scalar>(x: &[T], xs: Shape, slopes: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let plane = xs.plane();
    let mut gx = Vec::with_capacity(x.len());
    let mut ga = vec![T::zero(); xs.c];
    for (i, (v, gv)) in x.iter().zip(g).enumerate() {
        let c = (i / plane) % xs.c;
        if *v > T::zero() {
            gx.push(*gv);
        } else {
            gx.push(slopes[c] * *gv);
            ga[c] = ga[c] + *gv * *v;
        }
    }
    (gx, ga)
}

pub fn add<T: Scalar>(a: &[T], a_shape: Shape, b: &[T], b_shape: Shape) -> Result<Vec<T>> {
    if a_shape != b_shape {
        return Err(shape_err("elementwise_add", format!("{a_shape} vs {b_shape}")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| *x + *y).collect())
}

pub fn concat_output_shape(shapes: &[Shape]) -> Result<Shape> {
    let first = *shapes
        .first()
        .ok_or_else(|| arg_err("concat_channels", "needs at least one input"))?;
    let mut c = 0;
    for s in shapes {
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(shape_err("concat_channels", format!("{s} does not match {first} outside the channel axis")));
        }
        c += s.c;
    }
    Ok(Shape::new(first.n, c, first.h, first.w))
}

pub fn concat_channels<T: Scalar>(parts: &[(&[T], Shape)]) -> Result<(Vec<T>, Shape)> {
    let shapes: Vec<Shape> = parts.iter().map(|p| p.1).collect();
    let os = concat_output_shape(&shapes)?;
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..os.n {
        for (data, s) in parts {
            out.extend_from_slice(&data[s.index(n, 0, 0, 0)..s.index(n, 0, 0, 0) + s.c * s.plane()]);
        }
    }
    Ok((out, os))
}

/// Splits a concat gradient back into per-input gradients.
pub fn concat_channels_backward<T: Scalar>(g: &[T], shapes: &[Shape]) -> Vec<Vec<T>> {
    let mut outs: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.numel())).collect();
    let mut offset = 0;
    let n_batch = shapes.first().map_or(0, |s| s.n);
    for _ in 0..n_batch {
        for (s, out) in shapes.iter().zip(outs.iter_mut()) {
            let len = s.c * s.plane();
            out.extend_from_slice(&g[offset..offset + len]);
            offset += len;
        }
    }
    outs
}

/// Weighted sum `sum_j w_j * x_j` of same-shaped inputs; a 1x1 convolution over
/// scale-stacked inputs with one weight per scale shared across channels.
pub fn fuse<T: Scalar>(inputs: &[(&[T], Shape)], weights: &[T]) -> Result<(Vec<T>, Shape)> {
    let (_, first) = *inputs
        .first()
        .ok_or_else(|| arg_err("fuse_scales", "needs at least one scale"))?;
    if weights.len() != inputs.len() {
        return Err(shape_err("fuse_scales", format!("{} weights for {} scales", weights.len(), inputs.len())));
    }
    let mut out = vec![T::zero(); first.numel()];
    for ((data, s), w) in inputs.iter().zip(weights) {
        if *s != first {
            return Err(shape_err("fuse_scales", format!("scale shape {s} does not match {first}")));
        }
        for (o, v) in out.iter_mut().zip(data.iter()) {
            *o = *o + *w * *v;
        }
    }
    Ok((out, first))
}

//! Forward kernels and their hand-derived reverse-mode counterparts.
//!
//! Each kernel computes every output element with a fixed accumulation order,
//! so results are bit-identical no matter how work is split across threads.
//! Work is parallelised only over independent output planes.

use rayon::prelude::*;

use crate::error::{DcaeError, Result};
use crate::tensor::{Scalar, Tensor};

/// Below this many multiply-adds a kernel runs on the calling thread.
const PAR_WORK: usize = 1 << 15;

fn chunked<T: Scalar>(
    out: &mut [T],
    chunk: usize,
    work: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if chunk == 0 {
        return;
    }
    if work >= PAR_WORK {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

fn bias_values<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize) -> Result<Vec<T>> {
    match bias {
        None => Ok(vec![T::zero(); channels]),
        Some(b) => {
            if b.numel() != channels {
                return Err(DcaeError::dim(format!(
                    "bias {:?} does not match {} output channels",
                    b.shape(),
                    channels
                )));
            }
            Ok(b.data().to_vec())
        }
    }
}

fn bias_grad<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let [b, c, _, _] = gout.shape();
    let plane = gout.plane();
    let mut gb = Tensor::zeros([c, 1, 1, 1]);
    for (co, slot) in gb.data_mut().iter_mut().enumerate() {
        let mut acc = T::zero();
        for bi in 0..b {
            let base = (bi * c + co) * plane;
            for &g in &gout.data()[base..base + plane] {
                acc += g;
            }
        }
        *slot = acc;
    }
    gb
}

#[inline]
fn tap(o: usize, stride: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    if i >= 0 && (i as usize) < limit {
        Some(i as usize)
    } else {
        None
    }
}

/// Outputs `o` in `0..n` whose tap `o * stride + k - pad` lands in `0..limit`.
#[inline]
fn valid(n: usize, stride: usize, k: usize, pad: usize, limit: usize) -> std::ops::Range<usize> {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride).min(n) };
    let hi = if limit + pad > k {
        ((limit + pad - k - 1) / stride + 1).min(n)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// `c ← a · b + beta · c` for an `m × k` by `k × n` product, every operand
/// addressed through `(row stride, column stride)`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output too short");
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len(), "gemm: operand too short");
    let (rsa, csa, rsb, csb, rsc, csc) = (
        rsa as isize,
        csa as isize,
        rsb as isize,
        csb as isize,
        rsc as isize,
        csc as isize,
    );
    use std::any::TypeId;
    // SAFETY: bounds checked above; T is f32 or f64 by the TypeId test, so
    // the pointer casts are identity casts.
    unsafe {
        if TypeId::of::<T>() == TypeId::of::<f32>() {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr() as *const f32, rsa, csa, b.as_ptr() as *const f32, rsb, csb,
                beta.as_f64() as f32, c.as_mut_ptr() as *mut f32, rsc, csc,
            );
        } else if TypeId::of::<T>() == TypeId::of::<f64>() {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr() as *const f64, rsa, csa, b.as_ptr() as *const f64, rsb, csb,
                beta.as_f64(), c.as_mut_ptr() as *mut f64, rsc, csc,
            );
        } else {
            unreachable!("Scalar is implemented for f32 and f64 only");
        }
    }
}

/// Patch geometry of a convolution from an `h × w` plane to `oh × ow`.
#[derive(Clone, Copy)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// `cols[(c·k + ky)·k + kx][y·ow + x] = x[c][y·s + ky − p][x·s + kx − p]`, 0 outside.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let Patches { c, h, w, k, stride, pad, oh, ow } = *self;
        let plane = oh * ow;
        cols.fill(T::zero());
        for ci in 0..c {
            let xp = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let ry = valid(oh, stride, ky, pad, h);
                for kx in 0..k {
                    let rx = valid(ow, stride, kx, pad, w);
                    if rx.is_empty() {
                        continue;
                    }
                    let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                    for y in ry.clone() {
                        let src = &xp[(y * stride + ky - pad) * w..];
                        let dst = &mut row[y * ow + rx.start..y * ow + rx.end];
                        let first = rx.start * stride + kx - pad;
                        for (d, &v) in dst.iter_mut().zip(src[first..].iter().step_by(stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patches::im2col`], accumulating into `x`.
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let Patches { c, h, w, k, stride, pad, oh, ow } = *self;
        let plane = oh * ow;
        for ci in 0..c {
            let xp = &mut x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let ry = valid(oh, stride, ky, pad, h);
                for kx in 0..k {
                    let rx = valid(ow, stride, kx, pad, w);
                    if rx.is_empty() {
                        continue;
                    }
                    let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                    for y in ry.clone() {
                        let dst = &mut xp[(y * stride + ky - pad) * w..];
                        let src = &row[y * ow + rx.start..y * ow + rx.end];
                        let first = rx.start * stride + kx - pad;
                        for (d, &v) in dst[first..].iter_mut().step_by(stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn fill_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (o, &b) in out.chunks_mut(plane).zip(bias) {
        o.fill(b);
    }
}

pub fn conv2d_output_dim(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(DcaeError::dim("stride must be at least 1"));
    }
    if input + 2 * padding < k {
        return Err(DcaeError::dim(format!(
            "kernel {k} larger than padded input {}",
            input + 2 * padding
        )));
    }
    Ok((input + 2 * padding - k) / stride + 1)
}

pub fn conv2d_transpose_output_dim(
    input: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(DcaeError::dim("stride must be at least 1"));
    }
    let full = (input.max(1) - 1) * stride + k;
    if input == 0 || full < 2 * padding + 1 {
        return Err(DcaeError::dim(format!(
            "transposed conv output would be empty (input {input}, k {k}, pad {padding})"
        )));
    }
    Ok(full - 2 * padding)
}

fn check_conv_weight<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, transpose: bool) -> Result<()> {
    let [a, b, kh, kw] = w.shape();
    let cin = if transpose { a } else { b };
    if kh != kw || kh == 0 {
        return Err(DcaeError::dim(format!(
            "weight {:?} must have a square non-empty kernel",
            w.shape()
        )));
    }
    if x.channels() != cin {
        return Err(DcaeError::dim(format!(
            "input {:?} has {} channels but weight {:?} expects {}",
            x.shape(),
            x.channels(),
            w.shape(),
            cin
        )));
    }
    Ok(())
}

/// Cross-correlation with weight `(C_out, C_in, k, k)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    check_conv_weight(x, w, false)?;
    let [nb, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let oh = conv2d_output_dim(h, k, stride, padding)?;
    let ow = conv2d_output_dim(wd, k, stride, padding)?;
    let bias = bias_values(bias, cout)?;
    let geo = Patches { c: cin, h, w: wd, k, stride, pad: padding, oh, ow };
    let (kk, plane) = (geo.rows(), oh * ow);
    let mut out = Tensor::zeros([nb, cout, oh, ow]);
    let (xs, ws) = (x.data(), w.data());
    chunked(out.data_mut(), cout * plane, nb * cout * plane * kk, |b, o| {
        let mut cols = vec![T::zero(); kk * plane];
        geo.im2col(&xs[b * cin * h * wd..(b + 1) * cin * h * wd], &mut cols);
        fill_bias(o, &bias, plane);
        gemm((cout, kk, plane), ws, (kk, 1), &cols, (plane, 1), T::one(), o, (plane, 1));
    });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [nb, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let [_, _, oh, ow] = gout.shape();
    let geo = Patches { c: cin, h, w: wd, k, stride, pad: padding, oh, ow };
    let (kk, plane, xplane) = (geo.rows(), oh * ow, cin * h * wd);
    let (xs, ws, gs) = (x.data(), w.data(), gout.data());
    let work = nb * cout * plane * kk;

    let mut gx = Tensor::zeros(x.shape());
    chunked(gx.data_mut(), xplane, work, |b, gxb| {
        let mut gcols = vec![T::zero(); kk * plane];
        let g = &gs[b * cout * plane..(b + 1) * cout * plane];
        gemm((kk, cout, plane), ws, (1, kk), g, (plane, 1), T::zero(), &mut gcols, (plane, 1));
        geo.col2im(&gcols, gxb);
    });

    let mut gw = Tensor::zeros(w.shape());
    let mut cols = vec![T::zero(); kk * plane];
    for b in 0..nb {
        geo.im2col(&xs[b * xplane..(b + 1) * xplane], &mut cols);
        let g = &gs[b * cout * plane..(b + 1) * cout * plane];
        gemm((cout, plane, kk), g, (plane, 1), &cols, (1, plane), T::one(), gw.data_mut(), (kk, 1));
    }
    (gx, gw, bias_grad(gout))
}

/// Transposed convolution with weight `(C_in, C_out, k, k)`; the adjoint of
/// [`conv2d`] using the same weight tensor.
pub fn conv2d_transpose<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    check_conv_weight(x, w, true)?;
    let [nb, cin, h, wd] = x.shape();
    let [_, cout, k, _] = w.shape();
    let oh = conv2d_transpose_output_dim(h, k, stride, padding)?;
    let ow = conv2d_transpose_output_dim(wd, k, stride, padding)?;
    let bias = bias_values(bias, cout)?;
    // The adjoint of a convolution from the `oh × ow` output to the input.
    let geo = Patches { c: cout, h: oh, w: ow, k, stride, pad: padding, oh: h, ow: wd };
    let (kk, plane) = (geo.rows(), h * wd);
    let mut out = Tensor::zeros([nb, cout, oh, ow]);
    let (xs, ws) = (x.data(), w.data());
    chunked(out.data_mut(), cout * oh * ow, nb * cin * plane * kk, |b, o| {
        let mut cols = vec![T::zero(); kk * plane];
        let xb = &xs[b * cin * plane..(b + 1) * cin * plane];
        gemm((kk, cin, plane), ws, (1, kk), xb, (plane, 1), T::zero(), &mut cols, (plane, 1));
        fill_bias(o, &bias, oh * ow);
        geo.col2im(&cols, o);
    });
    Ok(out)
}

pub fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [nb, cin, h, wd] = x.shape();
    let [_, cout, k, _] = w.shape();
    let [_, _, oh, ow] = gout.shape();
    let geo = Patches { c: cout, h: oh, w: ow, k, stride, pad: padding, oh: h, ow: wd };
    let (kk, plane, gplane) = (geo.rows(), h * wd, cout * oh * ow);
    let (xs, ws, gs) = (x.data(), w.data(), gout.data());
    let work = nb * cin * plane * kk;

    let mut gx = Tensor::zeros(x.shape());
    chunked(gx.data_mut(), cin * plane, work, |b, gxb| {
        let mut gcols = vec![T::zero(); kk * plane];
        geo.im2col(&gs[b * gplane..(b + 1) * gplane], &mut gcols);
        gemm((cin, kk, plane), ws, (kk, 1), &gcols, (plane, 1), T::zero(), gxb, (plane, 1));
    });

    let mut gw = Tensor::zeros(w.shape());
    let mut gcols = vec![T::zero(); kk * plane];
    for b in 0..nb {
        geo.im2col(&gs[b * gplane..(b + 1) * gplane], &mut gcols);
        let xb = &xs[b * cin * plane..(b + 1) * cin * plane];
        gemm((cin, plane, kk), xb, (plane, 1), &gcols, (1, plane), T::one(), gw.data_mut(), (kk, 1));
    }
    (gx, gw, bias_grad(gout))
}

/// Depthwise 3x3 convolution, stride 1, padding 1, weight `(C, 1, 3, 3)`.
pub fn dwconv3x3<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [nb, c, h, wd] = x.shape();
    if w.shape() != [c, 1, 3, 3] {
        return Err(DcaeError::dim(format!(
            "depthwise weight {:?} does not match input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let bias = bias_values(bias, c)?;
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let ws = w.data();
    chunked(out.data_mut(), h * wd, nb * c * h * wd * 9, |idx, o| {
        let ch = idx % c;
        let xbase = idx * h * wd;
        o.fill(bias[ch]);
        for ky in 0..3 {
            for kx in 0..3 {
                let wv = ws[ch * 9 + ky * 3 + kx];
                for y in 0..h {
                    let Some(iy) = tap(y, 1, ky, 1, h) else {
                        continue;
                    };
                    for xo in 0..wd {
                        if let Some(ix) = tap(xo, 1, kx, 1, wd) {
                            o[y * wd + xo] += wv * xs[xbase + iy * wd + ix];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn dwconv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [nb, c, h, wd] = x.shape();
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();
    let mut gx = Tensor::zeros(x.shape());
    chunked(gx.data_mut(), h * wd, nb * c * h * wd * 9, |idx, gplane| {
        let ch = idx % c;
        let base = idx * h * wd;
        for ky in 0..3 {
            for kx in 0..3 {
                let wv = ws[ch * 9 + ky * 3 + kx];
                for y in 0..h {
                    let Some(iy) = tap(y, 1, ky, 1, h) else {
                        continue;
                    };
                    for xo in 0..wd {
                        if let Some(ix) = tap(xo, 1, kx, 1, wd) {
                            gplane[iy * wd + ix] += wv * gs[base + y * wd + xo];
                        }
                    }
                }
            }
        }
    });
    let mut gw = Tensor::zeros(w.shape());
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let mut acc = T::zero();
                for b in 0..nb {
                    let base = (b * c + ch) * h * wd;
                    for y in 0..h {
                        let Some(iy) = tap(y, 1, ky, 1, h) else {
                            continue;
                        };
                        for xo in 0..wd {
                            if let Some(ix) = tap(xo, 1, kx, 1, wd) {
                                acc += gs[base + y * wd + xo] * xs[base + iy * wd + ix];
                            }
                        }
                    }
                }
                gw.data_mut()[ch * 9 + ky * 3 + kx] = acc;
            }
        }
    }
    (gx, gw, bias_grad(gout))
}

/// Channel mixing `out = x · W + b` applied at every spatial position.
///
/// `W` is `(C_in, C_out, 1, 1)`. A matrix of rows is just a tensor with
/// `height = width = 1`, so this doubles as the row-wise linear map.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [nb, cin, h, wd] = x.shape();
    let [wi, cout, one_a, one_b] = w.shape();
    if wi != cin || one_a != 1 || one_b != 1 {
        return Err(DcaeError::dim(format!(
            "linear weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let bias = bias_values(bias, cout)?;
    let plane = h * wd;
    let mut out = Tensor::zeros([nb, cout, h, wd]);
    let (xs, ws) = (x.data(), w.data());
    chunked(out.data_mut(), cout * plane, nb * cout * cin * plane, |b, o| {
        fill_bias(o, &bias, plane);
        let xb = &xs[b * cin * plane..(b + 1) * cin * plane];
        gemm((cout, cin, plane), ws, (1, cout), xb, (plane, 1), T::one(), o, (plane, 1));
    });
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [nb, cin, h, wd] = x.shape();
    let cout = w.shape()[1];
    let plane = h * wd;
    let (xs, ws, gs) = (x.data(), w.data(), gout.data());
    let mut gx = Tensor::zeros(x.shape());
    chunked(gx.data_mut(), cin * plane, nb * cout * cin * plane, |b, gxb| {
        let g = &gs[b * cout * plane..(b + 1) * cout * plane];
        gemm((cin, cout, plane), ws, (cout, 1), g, (plane, 1), T::zero(), gxb, (plane, 1));
    });
    let mut gw = Tensor::zeros(w.shape());
    for b in 0..nb {
        let xb = &xs[b * cin * plane..(b + 1) * cin * plane];
        let g = &gs[b * cout * plane..(b + 1) * cout * plane];
        gemm((cin, plane, cout), xb, (plane, 1), g, (1, plane), T::one(), gw.data_mut(), (cout, 1));
    }
    (gx, gw, bias_grad(gout))
}

fn as_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    let [r, c, h, w] = t.shape();
    if h != 1 || w != 1 {
        return Err(DcaeError::dim(format!(
            "{what}: expected a (rows, cols, 1, 1) matrix, got {:?}",
            t.shape()
        )));
    }
    Ok((r, c))
}

/// `a · bᵀ` for matrices `a: (R, d)` and `b: (N, d)`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, d) = as_matrix(a, "matmul_nt lhs")?;
    let (n, d2) = as_matrix(b, "matmul_nt rhs")?;
    if d != d2 {
        return Err(DcaeError::dim(format!(
            "matmul_nt inner dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([r, n, 1, 1]);
    gemm((r, d, n), a.data(), (d, 1), b.data(), (1, d), T::zero(), out.data_mut(), (n, 1));
    Ok(out)
}

pub fn matmul_nt_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [r, d, _, _] = a.shape();
    let n = b.shape()[0];
    let (av, bv, gv) = (a.data(), b.data(), gout.data());
    let mut ga = Tensor::zeros(a.shape());
    gemm((r, n, d), gv, (n, 1), bv, (d, 1), T::zero(), ga.data_mut(), (d, 1));
    let mut gb = Tensor::zeros(b.shape());
    gemm((n, r, d), gv, (1, n), av, (d, 1), T::zero(), gb.data_mut(), (d, 1));
    (ga, gb)
}

/// `a · b` for matrices `a: (R, N)` and `b: (N, C)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, n) = as_matrix(a, "matmul lhs")?;
    let (n2, c) = as_matrix(b, "matmul rhs")?;
    if n != n2 {
        return Err(DcaeError::dim(format!(
            "matmul inner dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([r, c, 1, 1]);
    gemm((r, n, c), a.data(), (n, 1), b.data(), (c, 1), T::zero(), out.data_mut(), (c, 1));
    Ok(out)
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [r, n, _, _] = a.shape();
    let c = b.shape()[1];
    let (av, bv, gv) = (a.data(), b.data(), gout.data());
    let mut ga = Tensor::zeros(a.shape());
    gemm((r, c, n), gv, (c, 1), bv, (1, c), T::zero(), ga.data_mut(), (n, 1));
    let mut gb = Tensor::zeros(b.shape());
    gemm((n, r, c), av, (1, n), gv, (c, 1), T::zero(), gb.data_mut(), (c, 1));
    (ga, gb)
}

/// Softmax across the channel axis at each `(batch, h, w)` position. For a
/// `(rows, N, 1, 1)` tensor this normalises each row over its `N` entries.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [nb, c, _, _] = x.shape();
    let plane = x.plane();
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let os = out.data_mut();
    for b in 0..nb {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xs[at(ch)]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (xs[at(ch)] - m).exp();
                os[at(ch)] = e;
                total += e;
            }
            for ch in 0..c {
                os[at(ch)] = os[at(ch)] / total;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let [nb, c, _, _] = y.shape();
    let plane = y.plane();
    let mut gx = Tensor::zeros(y.shape());
    let (ys, gs) = (y.data(), gout.data());
    let gxs = gx.data_mut();
    for b in 0..nb {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let mut dotp = T::zero();
            for ch in 0..c {
                dotp += ys[at(ch)] * gs[at(ch)];
            }
            for ch in 0..c {
                gxs[at(ch)] = ys[at(ch)] * (gs[at(ch)] - dotp);
            }
        }
    }
    gx
}

/// Reduce over channels to a `(B, 1, H, W)` map.
pub fn channel_mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [nb, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([nb, 1, h, w]);
    let inv = T::one() / T::from_f64(c as f64);
    for b in 0..nb {
        for p in 0..plane {
            let mut acc = T::zero();
            for ch in 0..c {
                acc += x.data()[(b * c + ch) * plane + p];
            }
            out.data_mut()[b * plane + p] = acc * inv;
        }
    }
    out
}

pub fn channel_mean_backward<T: Scalar>(shape: [usize; 4], gout: &Tensor<T>) -> Tensor<T> {
    let [_, c, h, w] = shape;
    let plane = h * w;
    let inv = T::one() / T::from_f64(c as f64);
    Tensor::from_fn(shape, |i| {
        let b = i / (c * plane);
        let p = i % plane;
        gout.data()[b * plane + p] * inv
    })
}

/// Channel max; the returned indices record the first maximising channel.
pub fn channel_max<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [nb, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([nb, 1, h, w]);
    let mut arg = vec![0usize; nb * plane];
    for b in 0..nb {
        for p in 0..plane {
            let mut best = T::neg_infinity();
            let mut bi = 0;
            for ch in 0..c {
                let v = x.data()[(b * c + ch) * plane + p];
                if v > best {
                    best = v;
                    bi = ch;
                }
            }
            out.data_mut()[b * plane + p] = best;
            arg[b * plane + p] = bi;
        }
    }
    (out, arg)
}

pub fn channel_max_backward<T: Scalar>(
    shape: [usize; 4],
    arg: &[usize],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let [nb, c, h, w] = shape;
    let plane = h * w;
    let mut gx = Tensor::zeros(shape);
    for b in 0..nb {
        for p in 0..plane {
            let ch = arg[b * plane + p];
            gx.data_mut()[(b * c + ch) * plane + p] = gout.data()[b * plane + p];
        }
    }
    gx
}

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K1: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k0 = T::from_f64(GELU_K0);
    let k1 = T::from_f64(GELU_K1);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (k0 * (x + k1 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k0 = T::from_f64(GELU_K0);
    let k1 = T::from_f64(GELU_K1);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (k0 * (x + k1 * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k0 * (T::one() + three * k1 * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Round half away from zero.
#[inline]
pub fn round_half_away<T: Scalar>(x: T) -> T {
    x.round()
}

/// Standard normal CDF evaluated in double precision.
#[inline]
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-t / std::f64::consts::SQRT_2)
}

#[inline]
pub fn normal_pdf(t: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct definition: out[b,o,y,x] = Σ w[o,c,i,j] · x[b,c,sy+i-p,sx+j-p].
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [nb, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let (oh, ow) = ((h + 2 * p - k) / s + 1, (wd + 2 * p - k) / s + 1);
        let mut out = Tensor::zeros([nb, cout, oh, ow]);
        for b in 0..nb {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (s * y + i) as i64 - p as i64;
                                    let ix = (s * xx + j) as i64 - p as i64;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.data()[((o * cin + c) * k + i) * k + j]
                                            * x.data()[((b * cin + c) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter form of the transposed convolution.
    fn conv_t_oracle(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [nb, cin, h, wd] = x.shape();
        let [_, cout, k, _] = w.shape();
        let (oh, ow) = ((h - 1) * s + k - 2 * p, (wd - 1) * s + k - 2 * p);
        let mut out = Tensor::zeros([nb, cout, oh, ow]);
        for b in 0..nb {
            for c in 0..cin {
                for iy in 0..h {
                    for ix in 0..wd {
                        let v = x.data()[((b * cin + c) * h + iy) * wd + ix];
                        for o in 0..cout {
                            for i in 0..k {
                                for j in 0..k {
                                    let y = (s * iy + i) as i64 - p as i64;
                                    let xx = (s * ix + j) as i64 - p as i64;
                                    if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                        out.data_mut()[((b * cout + o) * oh + y as usize) * ow + xx as usize] +=
                                            v * w.data()[((c * cout + o) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn close(a: &Tensor<f64>, b: &Tensor<f64>) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_kernels_match_nested_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p, h, wd) in &[(3, 1, 1, 5, 6), (4, 2, 1, 8, 6), (1, 1, 0, 3, 4), (3, 2, 0, 7, 9), (4, 2, 2, 6, 6), (7, 1, 3, 2, 2)] {
            let x = rand_t([2, 3, h, wd], &mut rng);
            let w = rand_t([4, 3, k, k], &mut rng);
            let y = conv2d(&x, &w, None, s, p).unwrap();
            close(&y, &conv_oracle(&x, &w, s, p));

            // Backward: gx is the transposed conv of gout, gw the correlation of gout with x.
            let g = rand_t(y.shape(), &mut rng);
            let (gx, gw, gb) = conv2d_backward(&x, &w, &g, s, p);
            let dx = rand_t(x.shape(), &mut rng);
            let dw = rand_t(w.shape(), &mut rng);
            let lin_x = dot(&g, &conv_oracle(&dx, &w, s, p));
            let lin_w = dot(&g, &conv_oracle(&x, &dw, s, p));
            assert!((dot(&gx, &dx) - lin_x).abs() < 1e-10);
            assert!((dot(&gw, &dw) - lin_w).abs() < 1e-10);
            assert!((gb.data().iter().sum::<f64>() - g.data().iter().sum::<f64>()).abs() < 1e-10);

            let xt = rand_t([2, 4, h, wd], &mut rng);
            let wt = rand_t([4, 3, k, k], &mut rng);
            if (h - 1) * s + k > 2 * p {
                let yt = conv2d_transpose(&xt, &wt, None, s, p).unwrap();
                close(&yt, &conv_t_oracle(&xt, &wt, s, p));
                let g = rand_t(yt.shape(), &mut rng);
                let (gx, gw, _) = conv2d_transpose_backward(&xt, &wt, &g, s, p);
                let dx = rand_t(xt.shape(), &mut rng);
                let dw = rand_t(wt.shape(), &mut rng);
                assert!((dot(&gx, &dx) - dot(&g, &conv_t_oracle(&dx, &wt, s, p))).abs() < 1e-10);
                assert!((dot(&gw, &dw) - dot(&g, &conv_t_oracle(&xt, &dw, s, p))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_t([1, 3, 8, 8], &mut rng);
        let w = rand_t([5, 3, 4, 4], &mut rng);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        let u = rand_t(y.shape(), &mut rng);
        let back = conv2d_transpose(&u, &w, None, 2, 1).unwrap();
        assert!((dot(&y, &u) - dot(&x, &back)).abs() < 1e-10);
    }

    #[test]
    fn conv_output_dims() {
        assert_eq!(conv2d_output_dim(64, 4, 2, 1).unwrap(), 32);
        assert_eq!(conv2d_output_dim(5, 3, 1, 1).unwrap(), 5);
        assert_eq!(conv2d_transpose_output_dim(32, 4, 2, 1).unwrap(), 64);
        assert!(conv2d_output_dim(4, 3, 0, 0).is_err());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 4, 3, 3]);
        let msg = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-1000.0f64), 0.0);
        assert_eq!(softplus(1000.0f64), 1000.0);
    }

    #[test]
    fn dwconv_matches_per_channel_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_t([2, 3, 5, 7], &mut rng);
        let w = rand_t([3, 1, 3, 3], &mut rng);
        let b = rand_t([1, 3, 1, 1], &mut rng);
        let y = dwconv3x3(&x, &w, Some(&b)).unwrap();
        // Dense weight that is zero off the channel diagonal.
        let mut dense = Tensor::zeros([3, 3, 3, 3]);
        for c in 0..3 {
            for t in 0..9 {
                dense.data_mut()[(c * 3 + c) * 9 + t] = w.data()[c * 9 + t];
            }
        }
        let mut want = conv_oracle(&x, &dense, 1, 1);
        for (i, v) in want.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / 35) % 3];
        }
        close(&y, &want);
    }

    #[test]
    fn linear_and_matmuls_match_naive_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (r, ci, co) = (6, 5, 4);
        let x = rand_t([r, ci, 1, 1], &mut rng);
        let w = rand_t([ci, co, 1, 1], &mut rng);
        let b = rand_t([1, co, 1, 1], &mut rng);
        let y = linear(&x, &w, Some(&b)).unwrap();
        let m = matmul(&x, &w).unwrap();
        let bt = rand_t([3, ci, 1, 1], &mut rng);
        let nt = matmul_nt(&x, &bt).unwrap();
        for i in 0..r {
            for o in 0..co {
                let acc: f64 = (0..ci).map(|c| x.data()[i * ci + c] * w.data()[c * co + o]).sum();
                assert!((m.data()[i * co + o] - acc).abs() < 1e-12);
                assert!((y.data()[i * co + o] - acc - b.data()[o]).abs() < 1e-12);
            }
            for n in 0..3 {
                let acc: f64 = (0..ci).map(|c| x.data()[i * ci + c] * bt.data()[n * ci + c]).sum();
                assert!((nt.data()[i * 3 + n] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_matches_wide_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::<f32>::from_fn([4, 9, 1, 1], |_| rng.gen_range(-20.0..20.0));
        let s = softmax_channels(&x);
        for (row, out) in x.data().chunks(9).zip(s.data().chunks(9)) {
            let e: Vec<f64> = row.iter().map(|&v| (v as f64).exp()).collect();
            let z: f64 = e.iter().sum();
            for (a, b) in out.iter().zip(&e) {
                assert!((*a as f64 - b / z).abs() < 1e-6);
            }
        }
        let big = softmax_channels(&Tensor::<f32>::from_vec([1, 2, 1, 1], vec![1000.0, 0.0]).unwrap());
        assert_eq!(big.data(), &[1.0, 0.0]);
    }

    #[test]
    fn rounding_ties_go_away_from_zero() {
        assert_eq!(round_half_away(2.5f32), 3.0);
        assert_eq!(round_half_away(-0.5f32), -1.0);
        assert_eq!(round_half_away(0.4f32), 0.0);
        assert_eq!(round_half_away(-1.6f32), -2.0);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let n = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((n - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

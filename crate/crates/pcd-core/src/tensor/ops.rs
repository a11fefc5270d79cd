//! Numeric kernels behind the graph operators.
//!
//! Kernels are written with the innermost loop running over contiguous output
//! rows so the compiler can vectorize them; this matters because training and
//! the ablation tests spend nearly all their time in `conv2d_*`.

use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided cross-correlation along one axis.
pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::config(format!(
            "kernel {} larger than padded input {}",
            k, padded
        )));
    }
    let out = (padded - k) / stride + 1;
    if out == 0 {
        return Err(Error::config("convolution output would be empty"));
    }
    Ok(out)
}

/// Range of output positions `o` with `o*stride + d` inside `[0, in_len)`.
#[inline]
fn valid_out_range(d: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if d < 0 { (-d + s - 1) / s } else { 0 };
    let hi_inclusive = (in_len as isize - 1 - d).div_euclid(s);
    if hi_inclusive < lo {
        return (0, 0);
    }
    let lo = lo.max(0) as usize;
    let hi = ((hi_inclusive + 1) as usize).min(out_len);
    if hi <= lo {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// Accumulate `out[o] += w * x[o*stride + d]` over the valid output range.
#[inline]
fn axpy_gather<F: Scalar>(out: &mut [F], x: &[F], w: F, d: isize, stride: usize) {
    let (lo, hi) = valid_out_range(d, stride, x.len(), out.len());
    if hi <= lo {
        return;
    }
    if stride == 1 {
        let xo = (lo as isize + d) as usize;
        let n = hi - lo;
        let out = &mut out[lo..lo + n];
        let x = &x[xo..xo + n];
        for i in 0..n {
            out[i] = out[i] + x[i] * w;
        }
    } else {
        for o in lo..hi {
            let ix = (o as isize * stride as isize + d) as usize;
            out[o] = out[o] + x[ix] * w;
        }
    }
}

/// Accumulate `x[o*stride + d] += w * g[o]` over the valid output range
/// (scatter form used by convolution input gradients).
#[inline]
fn axpy_scatter<F: Scalar>(x: &mut [F], g: &[F], w: F, d: isize, stride: usize) {
    let (lo, hi) = valid_out_range(d, stride, x.len(), g.len());
    if hi <= lo {
        return;
    }
    if stride == 1 {
        let xo = (lo as isize + d) as usize;
        let n = hi - lo;
        let x = &mut x[xo..xo + n];
        let g = &g[lo..lo + n];
        for i in 0..n {
            x[i] = x[i] + g[i] * w;
        }
    } else {
        for o in lo..hi {
            let ix = (o as isize * stride as isize + d) as usize;
            x[ix] = x[ix] + g[o] * w;
        }
    }
}

/// Dot product of `g[o]` with `x[o*stride + d]` over the valid range.
/// Accumulates in four fixed-order lanes so the reduction has no serial
/// dependency chain; the lane layout is static, so results are
/// deterministic for a given input length.
#[inline]
fn dot_gather<F: Scalar>(g: &[F], x: &[F], d: isize, stride: usize) -> F {
    let (lo, hi) = valid_out_range(d, stride, x.len(), g.len());
    if hi <= lo {
        return F::zero();
    }
    if stride == 1 {
        let xo = (lo as isize + d) as usize;
        let n = hi - lo;
        sum_products(&g[lo..lo + n], &x[xo..xo + n])
    } else {
        let mut acc = F::zero();
        for o in lo..hi {
            let ix = (o as isize * stride as isize + d) as usize;
            acc = acc + g[o] * x[ix];
        }
        acc
    }
}

/// Four-lane elementwise-product sum over equal-length slices.
#[inline]
fn sum_products<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len();
    let mut lanes = [F::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let k = i * 4;
        lanes[0] = lanes[0] + a[k] * b[k];
        lanes[1] = lanes[1] + a[k + 1] * b[k + 1];
        lanes[2] = lanes[2] + a[k + 2] * b[k + 2];
        lanes[3] = lanes[3] + a[k + 3] * b[k + 3];
    }
    let mut tail = F::zero();
    for k in chunks * 4..n {
        tail = tail + a[k] * b[k];
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + tail
}

/// Strided cross-correlation. `x: [B,Ci,H,W]`, `w: [Co,Ci,Kh,Kw]`,
/// `bias: [Co]`, output `[B,Co,Ho,Wo]`.
pub(crate) fn conv2d_fwd<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (b, ci, h, wd) = x.dims4()?;
    let (co, wci, kh, kw) = w.dims4()?;
    if wci != ci {
        return Err(Error::config(format!(
            "conv2d: input has {} channels, weight expects {}",
            ci, wci
        )));
    }
    if let Some(bs) = bias {
        if bs.shape() != [co] {
            return Err(Error::config(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                bs.shape(),
                co
            )));
        }
    }
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wd, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[b, co, ho, wo]);

    let xd = x.data();
    let wdt = w.data();
    let od = out.data_mut();
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        conv1x1_fwd(xd, wdt, bias, od, b, ci, co, h * wd);
        return Ok(out);
    }
    for bi in 0..b {
        for oc in 0..co {
            let oplane = &mut od[(bi * co + oc) * ho * wo..(bi * co + oc + 1) * ho * wo];
            if let Some(bs) = bias {
                let bv = bs.data()[oc];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for icx in 0..ci {
                let xplane = &xd[(bi * ci + icx) * h * wd..(bi * ci + icx + 1) * h * wd];
                let wbase = ((oc * ci + icx) * kh) * kw;
                for ky in 0..kh {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..kw {
                        let wv = wdt[wbase + ky * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let dx = kx as isize - pad as isize;
                        for oy in 0..ho {
                            let iy = oy as isize * stride as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            axpy_gather(orow, xrow, wv, dx, stride);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 1x1 unit-stride conv: each output plane is a weighted sum of the input
/// planes, so the kernel is one long accumulation per channel pair.
fn conv1x1_fwd<F: Scalar>(
    xd: &[F],
    wdt: &[F],
    bias: Option<&Tensor<F>>,
    od: &mut [F],
    b: usize,
    ci: usize,
    co: usize,
    n: usize,
) {
    for bi in 0..b {
        for oc in 0..co {
            let oplane = &mut od[(bi * co + oc) * n..(bi * co + oc + 1) * n];
            if let Some(bs) = bias {
                let bv = bs.data()[oc];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for icx in 0..ci {
                let wv = wdt[oc * ci + icx];
                if wv == F::zero() {
                    continue;
                }
                let xplane = &xd[(bi * ci + icx) * n..(bi * ci + icx + 1) * n];
                for i in 0..n {
                    oplane[i] = oplane[i] + xplane[i] * wv;
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. its input.
pub(crate) fn conv2d_bwd_x<F: Scalar>(
    w: &Tensor<F>,
    g: &Tensor<F>,
    stride: usize,
    pad: usize,
    x_shape: &[usize],
) -> Tensor<F> {
    let (b, co, ho, wo) = g.dims4().expect("upstream grad is 4-d");
    let (wco, ci, kh, kw) = w.dims4().expect("weight is 4-d");
    debug_assert_eq!(co, wco);
    let (h, wd) = (x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    let wdt = w.data();
    let gd = g.data();
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        conv1x1_bwd_x(wdt, gd, dxd, b, ci, co, ho * wo);
        return dx;
    }
    for bi in 0..b {
        for oc in 0..co {
            let gplane = &gd[(bi * co + oc) * ho * wo..(bi * co + oc + 1) * ho * wo];
            for icx in 0..ci {
                let xplane = &mut dxd[(bi * ci + icx) * h * wd..(bi * ci + icx + 1) * h * wd];
                let wbase = ((oc * ci + icx) * kh) * kw;
                for ky in 0..kh {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..kw {
                        let wv = wdt[wbase + ky * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let dxo = kx as isize - pad as isize;
                        for oy in 0..ho {
                            let iy = oy as isize * stride as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &mut xplane[iy as usize * wd..(iy as usize + 1) * wd];
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            axpy_scatter(xrow, grow, wv, dxo, stride);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 1x1 unit-stride input gradient: the transpose of [`conv1x1_fwd`].
fn conv1x1_bwd_x<F: Scalar>(
    wdt: &[F],
    gd: &[F],
    dxd: &mut [F],
    b: usize,
    ci: usize,
    co: usize,
    n: usize,
) {
    for bi in 0..b {
        for icx in 0..ci {
            let xplane = &mut dxd[(bi * ci + icx) * n..(bi * ci + icx + 1) * n];
            for oc in 0..co {
                let wv = wdt[oc * ci + icx];
                if wv == F::zero() {
                    continue;
                }
                let gplane = &gd[(bi * co + oc) * n..(bi * co + oc + 1) * n];
                for i in 0..n {
                    xplane[i] = xplane[i] + gplane[i] * wv;
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. its weight.
pub(crate) fn conv2d_bwd_w<F: Scalar>(
    x: &Tensor<F>,
    g: &Tensor<F>,
    stride: usize,
    pad: usize,
    w_shape: &[usize],
) -> Tensor<F> {
    let (b, ci, h, wd) = x.dims4().expect("input is 4-d");
    let (_, co, ho, wo) = g.dims4().expect("upstream grad is 4-d");
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let mut dw = Tensor::zeros(w_shape);
    let dwd = dw.data_mut();
    let xd = x.data();
    let gd = g.data();
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        conv1x1_bwd_w(xd, gd, dwd, b, ci, co, ho * wo);
        return dw;
    }
    for bi in 0..b {
        for oc in 0..co {
            let gplane = &gd[(bi * co + oc) * ho * wo..(bi * co + oc + 1) * ho * wo];
            for icx in 0..ci {
                let xplane = &xd[(bi * ci + icx) * h * wd..(bi * ci + icx + 1) * h * wd];
                let wbase = ((oc * ci + icx) * kh) * kw;
                for ky in 0..kh {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..kw {
                        let dx = kx as isize - pad as isize;
                        let mut acc = F::zero();
                        for oy in 0..ho {
                            let iy = oy as isize * stride as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            acc = acc + dot_gather(grow, xrow, dx, stride);
                        }
                        dwd[wbase + ky * kw + kx] = dwd[wbase + ky * kw + kx] + acc;
                    }
                }
            }
        }
    }
    dw
}

/// 1x1 unit-stride weight gradient: one whole-plane dot per channel pair.
fn conv1x1_bwd_w<F: Scalar>(
    xd: &[F],
    gd: &[F],
    dwd: &mut [F],
    b: usize,
    ci: usize,
    co: usize,
    n: usize,
) {
    for bi in 0..b {
        for oc in 0..co {
            let gplane = &gd[(bi * co + oc) * n..(bi * co + oc + 1) * n];
            for icx in 0..ci {
                let xplane = &xd[(bi * ci + icx) * n..(bi * ci + icx + 1) * n];
                let idx = oc * ci + icx;
                dwd[idx] = dwd[idx] + sum_products(gplane, xplane);
            }
        }
    }
}

/// Per-output-channel sum of a `[B,C,H,W]` gradient (bias gradient).
pub(crate) fn bias_grad_4d<F: Scalar>(g: &Tensor<F>) -> Tensor<F> {
    let (b, c, h, w) = g.dims4().expect("upstream grad is 4-d");
    let mut db = Tensor::zeros(&[c]);
    let dbd = db.data_mut();
    let gd = g.data();
    for bi in 0..b {
        for cc in 0..c {
            let plane = &gd[(bi * c + cc) * h * w..(bi * c + cc + 1) * h * w];
            dbd[cc] = dbd[cc] + sum_slice(plane);
        }
    }
    db
}

/// Four-lane slice sum with a fixed combine order (see [`sum_products`]).
#[inline]
pub(crate) fn sum_slice<F: Scalar>(a: &[F]) -> F {
    let n = a.len();
    let mut lanes = [F::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let k = i * 4;
        lanes[0] = lanes[0] + a[k];
        lanes[1] = lanes[1] + a[k + 1];
        lanes[2] = lanes[2] + a[k + 2];
        lanes[3] = lanes[3] + a[k + 3];
    }
    let mut tail = F::zero();
    for k in chunks * 4..n {
        tail = tail + a[k];
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + tail
}

/// Transposed (fractionally strided) convolution.
/// `x: [B,Ci,H,W]`, `w: [Ci,Co,Kh,Kw]`, output `[B,Co,(H-1)s-2p+Kh,(W-1)s-2p+Kw]`.
///
/// The weight layout puts this op's input channels first so that, for a fixed
/// weight, this forward pass is literally the input-gradient of `conv2d`.
pub(crate) fn tconv2d_fwd<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (b, ci, h, wd) = x.dims4()?;
    let (wci, co, kh, kw) = w.dims4()?;
    if wci != ci {
        return Err(Error::config(format!(
            "transposed_conv2d: input has {} channels, weight expects {}",
            ci, wci
        )));
    }
    if let Some(bs) = bias {
        if bs.shape() != [co] {
            return Err(Error::config(format!(
                "transposed_conv2d: bias shape {:?} does not match {} output channels",
                bs.shape(),
                co
            )));
        }
    }
    let ho_i = (h as isize - 1) * stride as isize - 2 * pad as isize + kh as isize;
    let wo_i = (wd as isize - 1) * stride as isize - 2 * pad as isize + kw as isize;
    if ho_i < 1 || wo_i < 1 {
        return Err(Error::config("transposed convolution output would be empty"));
    }
    let (ho, wo) = (ho_i as usize, wo_i as usize);
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    let od = out.data_mut();
    let xd = x.data();
    let wdt = w.data();
    if kh == 2 && kw == 2 && stride == 2 && pad == 0 {
        tconv2x2_fwd(xd, wdt, bias, od, b, ci, co, h, wd);
        return Ok(out);
    }
    for bi in 0..b {
        for oc in 0..co {
            let oplane = &mut od[(bi * co + oc) * ho * wo..(bi * co + oc + 1) * ho * wo];
            if let Some(bs) = bias {
                let bv = bs.data()[oc];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for icx in 0..ci {
                let xplane = &xd[(bi * ci + icx) * h * wd..(bi * ci + icx + 1) * h * wd];
                let wbase = ((icx * co + oc) * kh) * kw;
                for ky in 0..kh {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..kw {
                        let wv = wdt[wbase + ky * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let dx = kx as isize - pad as isize;
                        // Scatter: out[iy*s+dy, ix*s+dx] += w * x[iy, ix].
                        for iy in 0..h {
                            let oy = iy as isize * stride as isize + dy;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let xrow = &xplane[iy * wd..(iy + 1) * wd];
                            let orow = &mut oplane[oy as usize * wo..(oy as usize + 1) * wo];
                            axpy_scatter(orow, xrow, wv, dx, stride);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2x2 stride-2 transposed conv: the taps tile the output exactly, so each
/// input row expands into an interleaved pair of output rows with no bounds
/// logic in the inner loop.
fn tconv2x2_fwd<F: Scalar>(
    xd: &[F],
    wdt: &[F],
    bias: Option<&Tensor<F>>,
    od: &mut [F],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) {
    let wo = 2 * wd;
    for bi in 0..b {
        for oc in 0..co {
            let oplane = &mut od[(bi * co + oc) * (2 * h) * wo..(bi * co + oc + 1) * (2 * h) * wo];
            if let Some(bs) = bias {
                let bv = bs.data()[oc];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for iy in 0..h {
                let (orow0, orow1) = oplane[(2 * iy) * wo..(2 * iy + 2) * wo].split_at_mut(wo);
                for icx in 0..ci {
                    let xrow = &xd[((bi * ci + icx) * h + iy) * wd..((bi * ci + icx) * h + iy + 1) * wd];
                    let wbase = ((icx * co + oc) * 2) * 2;
                    let (w00, w01) = (wdt[wbase], wdt[wbase + 1]);
                    let (w10, w11) = (wdt[wbase + 2], wdt[wbase + 3]);
                    for ix in 0..wd {
                        let xv = xrow[ix];
                        orow0[2 * ix] = orow0[2 * ix] + xv * w00;
                        orow0[2 * ix + 1] = orow0[2 * ix + 1] + xv * w01;
                        orow1[2 * ix] = orow1[2 * ix] + xv * w10;
                        orow1[2 * ix + 1] = orow1[2 * ix + 1] + xv * w11;
                    }
                }
            }
        }
    }
}

/// Gradient of tconv2d w.r.t. its input: a plain strided cross-correlation of
/// the upstream gradient with the same weight.
pub(crate) fn tconv2d_bwd_x<F: Scalar>(
    w: &Tensor<F>,
    g: &Tensor<F>,
    stride: usize,
    pad: usize,
    x_shape: &[usize],
) -> Tensor<F> {
    let (b, co, ho, wo) = g.dims4().expect("upstream grad is 4-d");
    let (ci, wco, kh, kw) = w.dims4().expect("weight is 4-d");
    debug_assert_eq!(co, wco);
    let (h, wd) = (x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    let gd = g.data();
    let wdt = w.data();
    if kh == 2 && kw == 2 && stride == 2 && pad == 0 {
        tconv2x2_bwd_x(wdt, gd, dxd, b, ci, co, h, wd);
        return dx;
    }
    for bi in 0..b {
        for icx in 0..ci {
            let xplane = &mut dxd[(bi * ci + icx) * h * wd..(bi * ci + icx + 1) * h * wd];
            for oc in 0..co {
                let gplane = &gd[(bi * co + oc) * ho * wo..(bi * co + oc + 1) * ho * wo];
                let wbase = ((icx * co + oc) * kh) * kw;
                for ky in 0..kh {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..kw {
                        let wv = wdt[wbase + ky * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let dx_off = kx as isize - pad as isize;
                        for iy in 0..h {
                            let oy = iy as isize * stride as isize + dy;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let grow = &gplane[oy as usize * wo..(oy as usize + 1) * wo];
                            let xrow = &mut xplane[iy * wd..(iy + 1) * wd];
                            axpy_gather(xrow, grow, wv, dx_off, stride);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 stride-2 transposed-conv input gradient: each input element reads the
/// four output-gradient cells it fanned out to.
fn tconv2x2_bwd_x<F: Scalar>(
    wdt: &[F],
    gd: &[F],
    dxd: &mut [F],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) {
    let wo = 2 * wd;
    for bi in 0..b {
        for icx in 0..ci {
            for iy in 0..h {
                let xrow =
                    &mut dxd[((bi * ci + icx) * h + iy) * wd..((bi * ci + icx) * h + iy + 1) * wd];
                for oc in 0..co {
                    let gbase = (bi * co + oc) * (2 * h) * wo;
                    let grow0 = &gd[gbase + (2 * iy) * wo..gbase + (2 * iy + 1) * wo];
                    let grow1 = &gd[gbase + (2 * iy + 1) * wo..gbase + (2 * iy + 2) * wo];
                    let wbase = ((icx * co + oc) * 2) * 2;
                    let (w00, w01) = (wdt[wbase], wdt[wbase + 1]);
                    let (w10, w11) = (wdt[wbase + 2], wdt[wbase + 3]);
                    for ix in 0..wd {
                        xrow[ix] = xrow[ix]
                            + (grow0[2 * ix] * w00 + grow0[2 * ix + 1] * w01)
                            + (grow1[2 * ix] * w10 + grow1[2 * ix + 1] * w11);
                    }
                }
            }
        }
    }
}

/// Gradient of tconv2d w.r.t. its weight.
pub(crate) fn tconv2d_bwd_w<F: Scalar>(
    x: &Tensor<F>,
    g: &Tensor<F>,
    stride: usize,
    pad: usize,
    w_shape: &[usize],
) -> Tensor<F> {
    let (b, ci, h, wd) = x.dims4().expect("input is 4-d");
    let (_, co, ho, wo) = g.dims4().expect("upstream grad is 4-d");
    let (kh, kw) = (w_shape[2], w_shape[3]);
    let mut dw = Tensor::zeros(w_shape);
    let dwd = dw.data_mut();
    let xd = x.data();
    let gd = g.data();
    if kh == 2 && kw == 2 && stride == 2 && pad == 0 {
        tconv2x2_bwd_w(xd, gd, dwd, b, ci, co, h, wd);
        return dw;
    }
    for bi in 0..b {
        for icx in 0..ci {
            let xplane = &xd[(bi * ci + icx) * h * wd..(bi * ci + icx + 1) * h * wd];
            for oc in 0..co {
                let gplane = &gd[(bi * co + oc) * ho * wo..(bi * co + oc + 1) * ho * wo];
                let wbase = ((icx * co + oc) * kh) * kw;
                for ky in 0..kh {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..kw {
                        let dx = kx as isize - pad as isize;
                        let mut acc = F::zero();
                        for iy in 0..h {
                            let oy = iy as isize * stride as isize + dy;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let xrow = &xplane[iy * wd..(iy + 1) * wd];
                            let grow = &gplane[oy as usize * wo..(oy as usize + 1) * wo];
                            acc = acc + dot_gather(xrow, grow, dx, stride);
                        }
                        dwd[wbase + ky * kw + kx] = dwd[wbase + ky * kw + kx] + acc;
                    }
                }
            }
        }
    }
    dw
}

/// 2x2 stride-2 transposed-conv weight gradient: four independent
/// accumulators sweep the plane once per channel pair.
fn tconv2x2_bwd_w<F: Scalar>(
    xd: &[F],
    gd: &[F],
    dwd: &mut [F],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
) {
    let wo = 2 * wd;
    for bi in 0..b {
        for icx in 0..ci {
            for oc in 0..co {
                let mut acc = [F::zero(); 4];
                for iy in 0..h {
                    let xrow =
                        &xd[((bi * ci + icx) * h + iy) * wd..((bi * ci + icx) * h + iy + 1) * wd];
                    let gbase = (bi * co + oc) * (2 * h) * wo;
                    let grow0 = &gd[gbase + (2 * iy) * wo..gbase + (2 * iy + 1) * wo];
                    let grow1 = &gd[gbase + (2 * iy + 1) * wo..gbase + (2 * iy + 2) * wo];
                    for ix in 0..wd {
                        let xv = xrow[ix];
                        acc[0] = acc[0] + xv * grow0[2 * ix];
                        acc[1] = acc[1] + xv * grow0[2 * ix + 1];
                        acc[2] = acc[2] + xv * grow1[2 * ix];
                        acc[3] = acc[3] + xv * grow1[2 * ix + 1];
                    }
                }
                let wbase = ((icx * co + oc) * 2) * 2;
                for (k, a) in acc.iter().enumerate() {
                    dwd[wbase + k] = dwd[wbase + k] + *a;
                }
            }
        }
    }
}

/// Per-channel batch statistics. `invstd = 1/sqrt(var + eps)` with biased
/// variance; sums run in double precision regardless of `F`.
pub(crate) struct BnStats<F: Scalar> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub invstd: Vec<F>,
}

pub(crate) fn bn_batch_stats<F: Scalar>(x: &Tensor<F>, eps: f64) -> Result<BnStats<F>> {
    let (b, c, h, w) = x.dims4()?;
    let m = b * h * w;
    if m < 2 {
        return Err(Error::numeric(format!(
            "batch_norm: degenerate batch ({} value per channel) in train mode",
            m
        )));
    }
    let xd = x.data();
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    let mut invstd = vec![F::zero(); c];
    for cc in 0..c {
        let mut sum = 0f64;
        for bi in 0..b {
            let plane = &xd[(bi * c + cc) * h * w..(bi * c + cc + 1) * h * w];
            for v in plane {
                sum += v.to_f64().unwrap();
            }
        }
        let mu = sum / m as f64;
        let mut sq = 0f64;
        for bi in 0..b {
            let plane = &xd[(bi * c + cc) * h * w..(bi * c + cc + 1) * h * w];
            for v in plane {
                let d = v.to_f64().unwrap() - mu;
                sq += d * d;
            }
        }
        let vr = sq / m as f64;
        mean[cc] = sc(mu);
        var[cc] = sc(vr);
        invstd[cc] = sc(1.0 / (vr + eps).sqrt());
    }
    Ok(BnStats { mean, var, invstd })
}

/// Normalize with given per-channel statistics, then scale and shift.
pub(crate) fn bn_apply<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    mean: &[F],
    invstd: &[F],
) -> Tensor<F> {
    let (b, c, h, w) = x.dims4().expect("input is 4-d");
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    for bi in 0..b {
        for cc in 0..c {
            let base = (bi * c + cc) * h * w;
            let (mu, is, ga, be) = (mean[cc], invstd[cc], gd[cc], bd[cc]);
            let scale = ga * is;
            let shift = be - mu * scale;
            for i in base..base + h * w {
                od[i] = xd[i] * scale + shift;
            }
        }
    }
    out
}

/// Backward pass of batch normalization.
///
/// In train mode the batch statistics depend on the input, producing the
/// standard three-term input gradient; in eval mode the statistics are
/// constants and only the direct term survives.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_bwd<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    mean: &[F],
    invstd: &[F],
    g: &Tensor<F>,
    training: bool,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (b, c, h, w) = x.dims4().expect("input is 4-d");
    let m = (b * h * w) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let xd = x.data();
    let gd = g.data();
    let gad = gamma.data();
    let dxd = dx.data_mut();
    for cc in 0..c {
        let (mu, is) = (mean[cc].to_f64().unwrap(), invstd[cc].to_f64().unwrap());
        let ga = gad[cc].to_f64().unwrap();
        // First pass: per-channel reductions.
        let mut sum_g = 0f64;
        let mut sum_g_xhat = 0f64;
        for bi in 0..b {
            let base = (bi * c + cc) * h * w;
            for i in base..base + h * w {
                let gv = gd[i].to_f64().unwrap();
                let xhat = (xd[i].to_f64().unwrap() - mu) * is;
                sum_g += gv;
                sum_g_xhat += gv * xhat;
            }
        }
        dgamma.data_mut()[cc] = sc(sum_g_xhat);
        dbeta.data_mut()[cc] = sc(sum_g);
        // Second pass: input gradient.
        for bi in 0..b {
            let base = (bi * c + cc) * h * w;
            for i in base..base + h * w {
                let gv = gd[i].to_f64().unwrap();
                let d = if training {
                    let xhat = (xd[i].to_f64().unwrap() - mu) * is;
                    ga * is * (gv - sum_g / m - xhat * sum_g_xhat / m)
                } else {
                    ga * is * gv
                };
                dxd[i] = sc(d);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-pixel softmax across channels with max-subtraction.
pub(crate) fn channel_softmax_fwd<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    if c < 2 {
        return Err(Error::config("channel_softmax requires at least 2 channels"));
    }
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    let xd = x.data();
    let plane = h * w;
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut mx = xd[base + p];
            for cc in 1..c {
                let v = xd[base + cc * plane + p];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::zero();
            for cc in 0..c {
                let e = (xd[base + cc * plane + p] - mx).exp();
                od[base + cc * plane + p] = e;
                denom = denom + e;
            }
            for cc in 0..c {
                od[base + cc * plane + p] = od[base + cc * plane + p] / denom;
            }
        }
    }
    Ok(out)
}

/// Softmax backward from the saved output: dx_c = y_c (g_c − Σ_k g_k y_k).
pub(crate) fn channel_softmax_bwd<F: Scalar>(y: &Tensor<F>, g: &Tensor<F>) -> Tensor<F> {
    let (b, c, h, w) = y.dims4().expect("output is 4-d");
    let mut dx = Tensor::zeros(y.shape());
    let dxd = dx.data_mut();
    let yd = y.data();
    let gd = g.data();
    let plane = h * w;
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut dot = F::zero();
            for cc in 0..c {
                let i = base + cc * plane + p;
                dot = dot + gd[i] * yd[i];
            }
            for cc in 0..c {
                let i = base + cc * plane + p;
                dxd[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    dx
}

/// 2×2 max pooling with stride 2. Returns the pooled map and the flat input
/// index of each winner (first occurrence wins ties, row-major).
pub(crate) fn maxpool2_fwd<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<u32>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "max_pool2 requires even spatial dims, got {}x{}",
            h, w
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = vec![0u32; b * c * ho * wo];
    let od = out.data_mut();
    let xd = x.data();
    for bc in 0..b * c {
        let ibase = bc * h * w;
        let obase = bc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let i00 = ibase + (2 * oy) * w + 2 * ox;
                let cands = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = cands[0];
                let mut bv = xd[best];
                for &cand in &cands[1..] {
                    if xd[cand] > bv {
                        bv = xd[cand];
                        best = cand;
                    }
                }
                od[obase + oy * wo + ox] = bv;
                argmax[obase + oy * wo + ox] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool2_bwd<F: Scalar>(
    argmax: &[u32],
    g: &Tensor<F>,
    x_shape: &[usize],
) -> Tensor<F> {
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for (i, gv) in g.data().iter().enumerate() {
        let t = argmax[i] as usize;
        dxd[t] = dxd[t] + *gv;
    }
    dx
}

/// Fully connected layer. `x: [B,Ci]`, `w: [Co,Ci]`, `b: [Co]` → `[B,Co]`.
pub(crate) fn linear_fwd<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (b, ci) = x.dims2()?;
    let (co, wci) = w.dims2()?;
    if wci != ci {
        return Err(Error::config(format!(
            "linear: input has {} features, weight expects {}",
            ci, wci
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::config("linear: bias length mismatch"));
    }
    let mut out = Tensor::zeros(&[b, co]);
    let od = out.data_mut();
    let xd = x.data();
    let wd = w.data();
    let bd = bias.data();
    for bi in 0..b {
        for oc in 0..co {
            let mut acc = bd[oc];
            let xrow = &xd[bi * ci..(bi + 1) * ci];
            let wrow = &wd[oc * ci..(oc + 1) * ci];
            for i in 0..ci {
                acc = acc + xrow[i] * wrow[i];
            }
            od[bi * co + oc] = acc;
        }
    }
    Ok(out)
}

pub(crate) fn linear_bwd<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    g: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (b, ci) = x.dims2().expect("input is 2-d");
    let (co, _) = w.dims2().expect("weight is 2-d");
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    for bi in 0..b {
        for oc in 0..co {
            let gv = gd[bi * co + oc];
            if gv == F::zero() {
                continue;
            }
            db.data_mut()[oc] = db.data_mut()[oc] + gv;
            let dxrow = &mut dx.data_mut()[bi * ci..(bi + 1) * ci];
            let wrow = &wd[oc * ci..(oc + 1) * ci];
            for i in 0..ci {
                dxrow[i] = dxrow[i] + gv * wrow[i];
            }
            let dwrow = &mut dw.data_mut()[oc * ci..(oc + 1) * ci];
            let xrow = &xd[bi * ci..(bi + 1) * ci];
            for i in 0..ci {
                dwrow[i] = dwrow[i] + gv * xrow[i];
            }
        }
    }
    (dx, dw, db)
}

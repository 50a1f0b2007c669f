//! Raw layer computations on channels-last (B, H, W, C) arrays.
//!
//! Convolutions run as im2col + GEMM so the matrix product dominates the
//! cost; GEMM is single-threaded and deterministic. Every forward here has
//! a matching backward that returns exact gradients.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView4};

use super::Scalar;
use crate::error::{Error, Result};

fn flat2<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, h, w, c) = x.dim();
    x.to_owned()
        .into_shape_with_order((b * h * w, c))
        .expect("contiguous reshape")
}

fn unflat<T: Scalar>(m: Array2<T>, b: usize, h: usize, w: usize, c: usize) -> Array4<T> {
    m.into_shape_with_order((b, h, w, c)).expect("contiguous reshape")
}

/// Patch matrix for a k x k same-padding convolution: row per output pixel
/// in (batch, y, x) order, columns layed out (ky, kx, ci) to match the
/// flattened weight.
fn im2col<T: Scalar>(x: &Array4<T>, k: usize) -> Array2<T> {
    let (b, h, w, c) = x.dim();
    let pad = k / 2;
    let mut m = Array2::<T>::zeros((b * h * w, k * k * c));
    let xs = x.as_slice().expect("standard layout");
    let ms = m.as_slice_mut().expect("standard layout");
    let row_len = k * k * c;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * row_len;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (((bi * h) + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        ms[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    m
}

/// Scatter-add of a patch-matrix gradient back onto the input grid; the
/// adjoint of [`im2col`].
fn col2im<T: Scalar>(dm: &Array2<T>, b: usize, h: usize, w: usize, c: usize, k: usize) -> Array4<T> {
    let pad = k / 2;
    let mut dx = Array4::<T>::zeros((b, h, w, c));
    let ds = dm.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    let row_len = k * k * c;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * row_len;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (((bi * h) + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ci in 0..c {
                            xs[dst + ci] += ds[src + ci];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Same-padding stride-1 convolution; weight (k, k, ci, co).
pub fn conv2d_forward<T: Scalar>(
    x: &Array4<T>,
    w: &ArrayView4<T>,
    bias: Option<&ArrayView1<T>>,
) -> Result<Array4<T>> {
    let (b, h, wd, c) = x.dim();
    let (ky, kx, ci, co) = w.dim();
    if ky != kx || (ky != 1 && ky != 3) {
        return Err(Error::config(format!("unsupported conv kernel {ky}x{kx}")));
    }
    if ci != c {
        return Err(Error::data(format!(
            "conv input has {c} channels but weight expects {ci}"
        )));
    }
    let w2 = w
        .to_owned()
        .into_shape_with_order((ky * kx * ci, co))
        .expect("contiguous reshape");
    let mut out2 = if ky == 1 {
        flat2(x).dot(&w2)
    } else {
        im2col(x, ky).dot(&w2)
    };
    if let Some(bv) = bias {
        let bs = bv.as_slice().expect("standard layout");
        for mut row in out2.rows_mut() {
            let rs = row.as_slice_mut().expect("standard layout");
            for (r, bb) in rs.iter_mut().zip(bs) {
                *r += *bb;
            }
        }
    }
    Ok(unflat(out2, b, h, wd, co))
}

/// Gradients of [`conv2d_forward`]: input, weight, and bias when present.
pub fn conv2d_backward<T: Scalar>(
    x: &Array4<T>,
    w: &ArrayView4<T>,
    has_bias: bool,
    dy: &Array4<T>,
) -> (Array4<T>, Array4<T>, Option<Array1<T>>) {
    let (b, h, wd, c) = x.dim();
    let (ky, kx, ci, co) = w.dim();
    let dy2 = flat2(dy);
    let w2 = w
        .to_owned()
        .into_shape_with_order((ky * kx * ci, co))
        .expect("contiguous reshape");
    let (dw2, dx) = if ky == 1 {
        let xf = flat2(x);
        let dw2 = xf.t().dot(&dy2);
        let dxf = dy2.dot(&w2.t());
        (dw2, unflat(dxf, b, h, wd, c))
    } else {
        let m = im2col(x, ky);
        let dw2 = m.t().dot(&dy2);
        let dm = dy2.dot(&w2.t());
        (dw2, col2im(&dm, b, h, wd, c, ky))
    };
    let dw = dw2
        .into_shape_with_order((ky, kx, ci, co))
        .expect("contiguous reshape");
    let db = has_bias.then(|| dy2.sum_axis(ndarray::Axis(0)));
    (dx, dw, db)
}

/// Transposed convolution, kernel 3, stride 2, padding 1, output padding 1:
/// doubles both spatial dims. Weight (3, 3, ci, co), no bias. Output pixel
/// (2*iy + ky - 1, 2*ix + kx - 1) accumulates input (iy, ix) through tap
/// (ky, kx).
pub fn convt2d_forward<T: Scalar>(x: &Array4<T>, w: &ArrayView4<T>) -> Result<Array4<T>> {
    let (b, h, wd, c) = x.dim();
    let (k0, k1, ci, co) = w.dim();
    if k0 != 3 || k1 != 3 {
        return Err(Error::config(format!(
            "transposed conv expects a 3x3 kernel, got {k0}x{k1}"
        )));
    }
    if ci != c {
        return Err(Error::data(format!(
            "transposed conv input has {c} channels but weight expects {ci}"
        )));
    }
    let (oh, ow) = (2 * h, 2 * wd);
    let xf = flat2(x);
    let mut out = Array4::<T>::zeros((b, oh, ow, co));
    let os = out.as_slice_mut().expect("standard layout");
    for ky in 0..3usize {
        for kx in 0..3usize {
            let wk = w.slice(s![ky, kx, .., ..]).to_owned();
            let prod = xf.dot(&wk);
            let ps = prod.as_slice().expect("standard layout");
            for bi in 0..b {
                for iy in 0..h {
                    let oy = 2 * iy as isize + ky as isize - 1;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for ix in 0..wd {
                        let ox = 2 * ix as isize + kx as isize - 1;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let src = ((bi * h + iy) * wd + ix) * co;
                        let dst = ((bi * oh + oy as usize) * ow + ox as usize) * co;
                        for cc in 0..co {
                            os[dst + cc] += ps[src + cc];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`convt2d_forward`].
pub fn convt2d_backward<T: Scalar>(
    x: &Array4<T>,
    w: &ArrayView4<T>,
    dy: &Array4<T>,
) -> (Array4<T>, Array4<T>) {
    let (b, h, wd, ci) = x.dim();
    let co = w.dim().3;
    let (oh, ow) = (2 * h, 2 * wd);
    let xf = flat2(x);
    let dys = dy.as_slice().expect("standard layout");
    let mut dxf = Array2::<T>::zeros((b * h * wd, ci));
    let mut dw = Array4::<T>::zeros((3, 3, ci, co));
    for ky in 0..3usize {
        for kx in 0..3usize {
            // gather the output-gradient rows this tap touched
            let mut g = Array2::<T>::zeros((b * h * wd, co));
            let gs = g.as_slice_mut().expect("standard layout");
            for bi in 0..b {
                for iy in 0..h {
                    let oy = 2 * iy as isize + ky as isize - 1;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for ix in 0..wd {
                        let ox = 2 * ix as isize + kx as isize - 1;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy) * wd + ix) * co;
                        let src = ((bi * oh + oy as usize) * ow + ox as usize) * co;
                        gs[dst..dst + co].copy_from_slice(&dys[src..src + co]);
                    }
                }
            }
            let wk = w.slice(s![ky, kx, .., ..]).to_owned();
            dxf = dxf + g.dot(&wk.t());
            let dwk = xf.t().dot(&g);
            dw.slice_mut(s![ky, kx, .., ..]).assign(&dwk);
        }
    }
    (unflat(dxf, b, h, wd, ci), dw)
}

/// Per-channel batch statistics over (B, H, W); variance is biased.
pub fn batch_stats<T: Scalar>(x: &Array4<T>) -> (Array1<T>, Array1<T>) {
    let (b, h, w, c) = x.dim();
    let m = T::from_f64((b * h * w) as f64);
    let xs = x.as_slice().expect("standard layout");
    let mut mean = Array1::<T>::zeros(c);
    let mut var = Array1::<T>::zeros(c);
    {
        let ms = mean.as_slice_mut().unwrap();
        for px in xs.chunks_exact(c) {
            for (acc, v) in ms.iter_mut().zip(px) {
                *acc += *v;
            }
        }
        for acc in ms.iter_mut() {
            *acc = *acc / m;
        }
        let vs = var.as_slice_mut().unwrap();
        for px in xs.chunks_exact(c) {
            for ((acc, v), mu) in vs.iter_mut().zip(px).zip(&*ms) {
                let d = *v - *mu;
                *acc += d * d;
            }
        }
        for acc in vs.iter_mut() {
            *acc = *acc / m;
        }
    }
    (mean, var)
}

/// Normalize with given statistics: gamma * (x - mean) / sqrt(var + eps) + beta.
pub fn batchnorm_apply<T: Scalar>(
    x: &Array4<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    mean: &ArrayView1<T>,
    var: &ArrayView1<T>,
    eps: T,
) -> Array4<T> {
    let c = x.dim().3;
    let mut y = x.clone();
    let inv: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let gs = gamma.as_slice().expect("standard layout");
    let bs = beta.as_slice().expect("standard layout");
    let ms = mean.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for px in ys.chunks_exact_mut(c) {
        for i in 0..c {
            px[i] = gs[i] * (px[i] - ms[i]) * inv[i] + bs[i];
        }
    }
    y
}

/// Gradients of train-mode batchnorm (batch statistics).
pub fn batchnorm_backward<T: Scalar>(
    x: &Array4<T>,
    gamma: &ArrayView1<T>,
    mean: &ArrayView1<T>,
    var: &ArrayView1<T>,
    eps: T,
    dy: &Array4<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (b, h, w, c) = x.dim();
    let m = T::from_f64((b * h * w) as f64);
    let xs = x.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let ms = mean.as_slice().unwrap();
    let inv: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dvar = vec![T::zero(); c];
    let mut dmean = vec![T::zero(); c];
    let mut sum_xc = vec![T::zero(); c];
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    for (px, dpx) in xs.chunks_exact(c).zip(dys.chunks_exact(c)) {
        for i in 0..c {
            let xc = px[i] - ms[i];
            let dxhat = dpx[i] * gs[i];
            dgamma[i] += dpx[i] * xc * inv[i];
            dbeta[i] += dpx[i];
            dvar[i] = dvar[i] - dxhat * xc * half * inv[i] * inv[i] * inv[i];
            dmean[i] = dmean[i] - dxhat * inv[i];
            sum_xc[i] += xc;
        }
    }
    for i in 0..c {
        // centered sums vanish analytically; keep them for exactness
        dmean[i] = dmean[i] - dvar[i] * two * sum_xc[i] / m;
    }
    let mut dx = Array4::<T>::zeros((b, h, w, c));
    let dxs = dx.as_slice_mut().unwrap();
    for (px, (dpx, out)) in xs
        .chunks_exact(c)
        .zip(dys.chunks_exact(c).zip(dxs.chunks_exact_mut(c)))
    {
        for i in 0..c {
            let xc = px[i] - ms[i];
            let dxhat = dpx[i] * gs[i];
            out[i] = dxhat * inv[i] + dvar[i] * two * xc / m + dmean[i] / m;
        }
    }
    (
        dx,
        Array1::from_vec(dgamma),
        Array1::from_vec(dbeta),
    )
}

pub fn relu_forward<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    for (d, v) in dx.iter_mut().zip(x.iter()) {
        if !(*v > T::zero()) {
            *d = T::zero();
        }
    }
    dx
}

/// Max pooling with window k and stride k; ties keep the first maximum in
/// (ky, kx) scan order.
pub fn maxpool_forward<T: Scalar>(x: &Array4<T>, k: usize) -> Result<Array4<T>> {
    let (b, h, w, c) = x.dim();
    if h % k != 0 || w % k != 0 {
        return Err(Error::data(format!(
            "incompatible input size: {h}x{w} not divisible by pool window {k}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let xs = x.as_slice().unwrap();
    let mut out = Array4::<T>::zeros((b, oh, ow, c));
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((bi * oh + oy) * ow + ox) * c;
                for ky in 0..k {
                    for kx in 0..k {
                        let src = ((bi * h + oy * k + ky) * w + ox * k + kx) * c;
                        if ky == 0 && kx == 0 {
                            os[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        } else {
                            for i in 0..c {
                                if xs[src + i] > os[dst + i] {
                                    os[dst + i] = xs[src + i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn maxpool_backward<T: Scalar>(x: &Array4<T>, k: usize, dy: &Array4<T>) -> Array4<T> {
    let (b, h, w, c) = x.dim();
    let (_, oh, ow, _) = dy.dim();
    let xs = x.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let mut dx = Array4::<T>::zeros((b, h, w, c));
    let dxs = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = ((bi * oh + oy) * ow + ox) * c;
                for i in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_src = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let src = ((bi * h + oy * k + ky) * w + ox * k + kx) * c + i;
                            if xs[src] > best {
                                best = xs[src];
                                best_src = src;
                            }
                        }
                    }
                    dxs[best_src] += dys[g + i];
                }
            }
        }
    }
    dx
}

pub fn upsample_nearest_forward<T: Scalar>(x: &Array4<T>, f: usize) -> Array4<T> {
    let (b, h, w, c) = x.dim();
    let (oh, ow) = (h * f, w * f);
    let xs = x.as_slice().unwrap();
    let mut out = Array4::<T>::zeros((b, oh, ow, c));
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((bi * h + oy / f) * w + ox / f) * c;
                let dst = ((bi * oh + oy) * ow + ox) * c;
                os[dst..dst + c].copy_from_slice(&xs[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(dy: &Array4<T>, f: usize) -> Array4<T> {
    let (b, oh, ow, c) = dy.dim();
    let (h, w) = (oh / f, ow / f);
    let dys = dy.as_slice().unwrap();
    let mut dx = Array4::<T>::zeros((b, h, w, c));
    let dxs = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((bi * h + oy / f) * w + ox / f) * c;
                let src = ((bi * oh + oy) * ow + ox) * c;
                for i in 0..c {
                    dxs[dst + i] += dys[src + i];
                }
            }
        }
    }
    dx
}

/// Source taps and weights for bilinear upsampling without corner
/// alignment: src = (o + 0.5)/f - 0.5 clamped to the grid.
fn bilinear_taps(n: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..n * f)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor().min((n.max(2) - 2) as f64) as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Scalar>(x: &Array4<T>, f: usize) -> Array4<T> {
    let (b, h, w, c) = x.dim();
    let (oh, ow) = (h * f, w * f);
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let xs = x.as_slice().unwrap();
    let mut out = Array4::<T>::zeros((b, oh, ow, c));
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            let (y0, y1, fy) = ty[oy];
            for ox in 0..ow {
                let (x0, x1, fx) = tx[ox];
                let dst = ((bi * oh + oy) * ow + ox) * c;
                let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = T::from_f64((1.0 - fy) * fx);
                let w10 = T::from_f64(fy * (1.0 - fx));
                let w11 = T::from_f64(fy * fx);
                let s00 = ((bi * h + y0) * w + x0) * c;
                let s01 = ((bi * h + y0) * w + x1) * c;
                let s10 = ((bi * h + y1) * w + x0) * c;
                let s11 = ((bi * h + y1) * w + x1) * c;
                for i in 0..c {
                    os[dst + i] = w00 * xs[s00 + i]
                        + w01 * xs[s01 + i]
                        + w10 * xs[s10 + i]
                        + w11 * xs[s11 + i];
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Scalar>(dy: &Array4<T>, f: usize) -> Array4<T> {
    let (b, oh, ow, c) = dy.dim();
    let (h, w) = (oh / f, ow / f);
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let dys = dy.as_slice().unwrap();
    let mut dx = Array4::<T>::zeros((b, h, w, c));
    let dxs = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            let (y0, y1, fy) = ty[oy];
            for ox in 0..ow {
                let (x0, x1, fx) = tx[ox];
                let src = ((bi * oh + oy) * ow + ox) * c;
                let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = T::from_f64((1.0 - fy) * fx);
                let w10 = T::from_f64(fy * (1.0 - fx));
                let w11 = T::from_f64(fy * fx);
                let s00 = ((bi * h + y0) * w + x0) * c;
                let s01 = ((bi * h + y0) * w + x1) * c;
                let s10 = ((bi * h + y1) * w + x0) * c;
                let s11 = ((bi * h + y1) * w + x1) * c;
                for i in 0..c {
                    let g = dys[src + i];
                    dxs[s00 + i] += w00 * g;
                    dxs[s01 + i] += w01 * g;
                    dxs[s10 + i] += w10 * g;
                    dxs[s11 + i] += w11 * g;
                }
            }
        }
    }
    dx
}

/// Channel concatenation; all inputs must share (B, H, W).
pub fn concat_forward<T: Scalar>(xs: &[&Array4<T>]) -> Result<Array4<T>> {
    if xs.is_empty() {
        return Err(Error::data("concat of zero inputs"));
    }
    let (b, h, w, _) = xs[0].dim();
    for x in xs {
        let (bb, hh, ww, _) = x.dim();
        if (bb, hh, ww) != (b, h, w) {
            return Err(Error::data(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                (b, h, w),
                (bb, hh, ww)
            )));
        }
    }
    let co: usize = xs.iter().map(|x| x.dim().3).sum();
    let mut out = Array4::<T>::zeros((b, h, w, co));
    let os = out.as_slice_mut().unwrap();
    let srcs: Vec<&[T]> = xs.iter().map(|x| x.as_slice().unwrap()).collect();
    let cs: Vec<usize> = xs.iter().map(|x| x.dim().3).collect();
    let n_px = b * h * w;
    for p in 0..n_px {
        let mut off = p * co;
        for (src, &ci) in srcs.iter().zip(&cs) {
            os[off..off + ci].copy_from_slice(&src[p * ci..p * ci + ci]);
            off += ci;
        }
    }
    Ok(out)
}

pub fn concat_backward<T: Scalar>(dy: &Array4<T>, channels: &[usize]) -> Vec<Array4<T>> {
    let (b, h, w, co) = dy.dim();
    let dys = dy.as_slice().unwrap();
    let n_px = b * h * w;
    let mut outs = Vec::with_capacity(channels.len());
    let mut offset = 0usize;
    for &ci in channels {
        let mut out = Array4::<T>::zeros((b, h, w, ci));
        {
            let os = out.as_slice_mut().unwrap();
            for p in 0..n_px {
                os[p * ci..p * ci + ci]
                    .copy_from_slice(&dys[p * co + offset..p * co + offset + ci]);
            }
        }
        outs.push(out);
        offset += ci;
    }
    outs
}

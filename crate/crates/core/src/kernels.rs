//! Numeric kernels behind the tape's structured ops: direct/im2col convolution,
//! bilinear 2x upsampling, softmax, and group normalization, each with its
//! reverse-mode counterpart. All buffers are row-major `f64` slices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Resolved convolution geometry.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_dims(
    xshape: &[usize],
    wshape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if xshape.len() != 4 || wshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects 4-d input and weight, got {:?} / {:?}",
            xshape, wshape
        )));
    }
    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (k, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {} vs weight {}",
            c, wc
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel must be odd, got {}x{}", kh, kw)));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d stride must be positive".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d input {}x{} (pad {}) smaller than kernel {}x{}",
            h, w, pad, kh, kw
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        k,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Unpack one sample into column form [C*kh*kw, OH*OW] with zero padding.
fn im2col(x_n: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let ohow = d.oh * d.ow;
    for c in 0..d.c {
        let plane = &x_n[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * ohow;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let out_row = &mut cols[row + oy * d.ow..row + (oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        out_row[ox] = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            plane[iy * d.w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add column-form gradients back onto the input plane.
fn col2im_add(dcols: &[f64], d: &ConvDims, dx_n: &mut [f64]) {
    let ohow = d.oh * d.ow;
    for c in 0..d.c {
        let plane = &mut dx_n[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * ohow;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        plane[iy * d.w + ix as usize] += dcols[row + oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let ckk = d.c * d.kh * d.kw;
    let ohow = d.oh * d.ow;
    let mut y = vec![0.0; d.n * d.k * ohow];
    let w_view = ArrayView2::from_shape((d.k, ckk), weight).expect("weight view");
    y.par_chunks_mut(d.k * ohow)
        .enumerate()
        .for_each(|(n, y_n)| {
            let mut cols = vec![0.0; ckk * ohow];
            im2col(&x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w], d, &mut cols);
            let cols_v = ArrayView2::from_shape((ckk, ohow), &cols[..]).expect("cols view");
            let mut y_view = ArrayViewMut2::from_shape((d.k, ohow), y_n).expect("y view");
            general_mat_mul(1.0, &w_view, &cols_v, 0.0, &mut y_view);
            if let Some(b) = bias {
                for k in 0..d.k {
                    let bk = b[k];
                    for v in &mut y_n[k * ohow..(k + 1) * ohow] {
                        *v += bk;
                    }
                }
            }
        });
    y
}

/// Gradients of conv2d w.r.t. input, weight, and bias. The weight gradient is
/// reduced over samples in index order so the result is deterministic under
/// the parallel per-sample split.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ckk = d.c * d.kh * d.kw;
    let ohow = d.oh * d.ow;
    let w_view = ArrayView2::from_shape((d.k, ckk), weight).expect("weight view");

    let mut dx = vec![0.0; d.n * d.c * d.h * d.w];
    let per_sample: Vec<Array2<f64>> = dx
        .par_chunks_mut(d.c * d.h * d.w)
        .enumerate()
        .map(|(n, dx_n)| {
            let mut cols = vec![0.0; ckk * ohow];
            im2col(&x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w], d, &mut cols);
            let cols_v = ArrayView2::from_shape((ckk, ohow), &cols[..]).expect("cols view");
            let dy_n = ArrayView2::from_shape((d.k, ohow), &dy[n * d.k * ohow..(n + 1) * d.k * ohow])
                .expect("dy view");
            // explicit row-major outputs: `dot` may allocate column-major
            // results for transposed operands
            let mut dw_n = Array2::<f64>::zeros((d.k, ckk));
            general_mat_mul(1.0, &dy_n, &cols_v.t(), 0.0, &mut dw_n);
            let mut dcols = Array2::<f64>::zeros((ckk, ohow));
            general_mat_mul(1.0, &w_view.t(), &dy_n, 0.0, &mut dcols);
            col2im_add(dcols.as_slice().expect("contiguous"), d, dx_n);
            dw_n
        })
        .collect();

    let mut dw = vec![0.0; d.k * ckk];
    for dw_n in &per_sample {
        let s = dw_n.as_slice().expect("contiguous");
        for (acc, v) in dw.iter_mut().zip(s) {
            *acc += v;
        }
    }
    let mut db = vec![0.0; d.k];
    for n in 0..d.n {
        for k in 0..d.k {
            let base = (n * d.k + k) * ohow;
            db[k] += dy[base..base + ohow].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Per-axis sample positions for 2x bilinear upsampling, align-corners-false:
/// output i reads input coordinate (i + 0.5)/2 - 0.5, clamped to the valid range.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub fn upsample2x_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let rows = upsample_taps(h);
    let cols = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            for (ox, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                yp[oy * ow + ox] = wr0 * (wc0 * xp[r0 * w + c0] + wc1 * xp[r0 * w + c1])
                    + wr1 * (wc0 * xp[r1 * w + c0] + wc1 * xp[r1 * w + c1]);
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let rows = upsample_taps(h);
    let cols = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            for (ox, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let g = dyp[oy * ow + ox];
                dxp[r0 * w + c0] += g * wr0 * wc0;
                dxp[r0 * w + c1] += g * wr0 * wc1;
                dxp[r1 * w + c0] += g * wr1 * wc0;
                dxp[r1 * w + c1] += g * wr1 * wc1;
            }
        }
    }
    dx
}

/// Decompose a shape around `axis` into (outer, axis extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, m, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * m * inner + j * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                mx = mx.max(x[at(j)]);
            }
            let mut s = 0.0;
            for j in 0..m {
                let e = (x[at(j)] - mx).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..m {
                y[at(j)] /= s;
            }
        }
    }
    y
}

pub fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, m, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * m * inner + j * inner + i;
            let mut dot = 0.0;
            for j in 0..m {
                dot += y[at(j)] * dy[at(j)];
            }
            for j in 0..m {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Group normalization over [n, c, sp] with per-channel affine parameters.
/// Layer norm reuses this with sp = 1 and a single group.
pub fn groupnorm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    sp: usize,
    groups: usize,
    eps: f64,
) -> Vec<f64> {
    let cg = c / groups;
    let m = cg * sp;
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for g in 0..groups {
            let base = b * c * sp + g * cg * sp;
            let group = &x[base..base + m];
            let mean = group.iter().sum::<f64>() / m as f64;
            let var = group.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for cc in 0..cg {
                let ch = g * cg + cc;
                for s in 0..sp {
                    let idx = base + cc * sp + s;
                    y[idx] = gamma[ch] * (x[idx] - mean) * inv + beta[ch];
                }
            }
        }
    }
    y
}

pub fn groupnorm_backward(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    sp: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = cg * sp;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for g in 0..groups {
            let base = b * c * sp + g * cg * sp;
            let group = &x[base..base + m];
            let mean = group.iter().sum::<f64>() / m as f64;
            let var = group.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            // u = dy * gamma; dx = inv * (u - mean(u) - xhat * mean(u * xhat))
            let mut mu_u = 0.0;
            let mut mu_ux = 0.0;
            for cc in 0..cg {
                let ch = g * cg + cc;
                for s in 0..sp {
                    let idx = base + cc * sp + s;
                    let xhat = (x[idx] - mean) * inv;
                    let u = dy[idx] * gamma[ch];
                    mu_u += u;
                    mu_ux += u * xhat;
                    dgamma[ch] += dy[idx] * xhat;
                    dbeta[ch] += dy[idx];
                }
            }
            mu_u /= m as f64;
            mu_ux /= m as f64;
            for cc in 0..cg {
                let ch = g * cg + cc;
                for s in 0..sp {
                    let idx = base + cc * sp + s;
                    let xhat = (x[idx] - mean) * inv;
                    let u = dy[idx] * gamma[ch];
                    dx[idx] = inv * (u - mu_u - xhat * mu_ux);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

//! Loop-nest kernels for the convolution and pooling primitives.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{arg_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    pub fn plain(stride: usize, padding: usize) -> Self {
        Self::new(stride, padding, 1, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output length of a strided, padded, dilated window sweep.
pub fn out_extent(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<usize> {
    if stride < 1 {
        return Err(arg_err(format!("stride must be >= 1, got {stride}")));
    }
    if dilation < 1 {
        return Err(arg_err(format!("dilation must be >= 1, got {dilation}")));
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    if span > padded {
        return Err(shape_err(format!(
            "window span {span} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + offset`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo.max(0) as usize).min(out_len);
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(input: &[usize], weight: &[usize], geom: ConvGeom) -> Result<ConvDims> {
    let (n, cin, h, w) = match input {
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(shape_err(format!("conv2d input must be NCHW, got {s:?}"))),
    };
    let (cout, cin_g, kh, kw) = match weight {
        &[o, i, kh, kw] => (o, i, kh, kw),
        s => return Err(shape_err(format!("conv2d weight must be [out, in/groups, kh, kw], got {s:?}"))),
    };
    if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 {
        return Err(shape_err(format!(
            "groups {} must divide input channels {cin} and output channels {cout}",
            geom.groups
        )));
    }
    if cin / geom.groups != cin_g {
        return Err(shape_err(format!(
            "weight expects {cin_g} input channels per group but input has {} ({cin} channels / {} groups)",
            cin / geom.groups,
            geom.groups
        )));
    }
    let oh = out_extent(h, kh, geom.stride, geom.padding, geom.dilation)?;
    let ow = out_extent(w, kw, geom.stride, geom.padding, geom.dilation)?;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Unfolds the receptive fields of one (sample, group) into a
/// `[cin_g·kh·kw, oh·ow]` matrix, zero where the window hangs over padding.
fn im2col<T: Real>(input: &[T], d: &ConvDims, geom: ConvGeom, b: usize, g: usize, col: &mut [T]) {
    let cin_g = d.cin / geom.groups;
    let plane = d.oh * d.ow;
    let (s, p, dil) = (geom.stride, geom.padding as isize, geom.dilation);
    for icl in 0..cin_g {
        let ic = g * cin_g + icl;
        let src = &input[(b * d.cin + ic) * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            let off_y = (ky * dil) as isize - p;
            let (y0, y1) = valid_range(d.oh, d.h, s, off_y);
            for kx in 0..d.kw {
                let off_x = (kx * dil) as isize - p;
                let (x0, x1) = valid_range(d.ow, d.w, s, off_x);
                let row = &mut col[((icl * d.kh + ky) * d.kw + kx) * plane..][..plane];
                row.fill(T::zero());
                for oy in y0..y1 {
                    let iy = (oy as isize * s as isize + off_y) as usize;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if x0 == x1 {
                        continue;
                    }
                    if s == 1 {
                        let start = (iy * d.w) as isize + x0 as isize + off_x;
                        dst[x0..x1].copy_from_slice(&src[start as usize..start as usize + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            dst[ox] = src[iy * d.w + ((ox * s) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(col: &[T], d: &ConvDims, geom: ConvGeom, b: usize, g: usize, grad_in: &mut [T]) {
    let cin_g = d.cin / geom.groups;
    let plane = d.oh * d.ow;
    let (s, p, dil) = (geom.stride, geom.padding as isize, geom.dilation);
    for icl in 0..cin_g {
        let ic = g * cin_g + icl;
        let dst = &mut grad_in[(b * d.cin + ic) * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            let off_y = (ky * dil) as isize - p;
            let (y0, y1) = valid_range(d.oh, d.h, s, off_y);
            for kx in 0..d.kw {
                let off_x = (kx * dil) as isize - p;
                let (x0, x1) = valid_range(d.ow, d.w, s, off_x);
                let row = &col[((icl * d.kh + ky) * d.kw + kx) * plane..][..plane];
                for oy in y0..y1 {
                    let iy = (oy as isize * s as isize + off_y) as usize;
                    let src = &row[oy * d.ow..(oy + 1) * d.ow];
                    for ox in x0..x1 {
                        let ix = iy * d.w + ((ox * s) as isize + off_x) as usize;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

/// 1×1, stride 1, unpadded: the input planes already are the column matrix.
fn is_pointwise(d: &ConvDims, geom: ConvGeom) -> bool {
    d.kh == 1 && d.kw == 1 && geom.stride == 1 && geom.padding == 0
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &[T],
    in_shape: &[usize],
    weight: &[T],
    w_shape: &[usize],
    geom: ConvGeom,
) -> Result<(Vec<T>, Vec<usize>)> {
    let d = conv_dims(in_shape, w_shape, geom)?;
    let plane = d.oh * d.ow;
    let cin_g = d.cin / geom.groups;
    let cout_g = d.cout / geom.groups;
    let k = cin_g * d.kh * d.kw;
    let pointwise = is_pointwise(&d, geom);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut out = vec![T::zero(); d.n * d.cout * plane];
    for b in 0..d.n {
        for g in 0..geom.groups {
            let cols: &[T] = if pointwise {
                &input[(b * d.cin + g * cin_g) * plane..][..k * plane]
            } else {
                im2col(input, &d, geom, b, g, &mut col);
                &col
            };
            for ocl in 0..cout_g {
                let oc = g * cout_g + ocl;
                let dst = &mut out[(b * d.cout + oc) * plane..][..plane];
                for (j, &wv) in weight[oc * k..(oc + 1) * k].iter().enumerate() {
                    axpy(dst, wv, &cols[j * plane..(j + 1) * plane]);
                }
            }
        }
    }
    Ok((out, vec![d.n, d.cout, d.oh, d.ow]))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    in_shape: &[usize],
    weight: &[T],
    w_shape: &[usize],
    geom: ConvGeom,
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let d = conv_dims(in_shape, w_shape, geom)?;
    let plane = d.oh * d.ow;
    let cin_g = d.cin / geom.groups;
    let cout_g = d.cout / geom.groups;
    let k = cin_g * d.kh * d.kw;
    let pointwise = is_pointwise(&d, geom);
    let mut gin = want_input.then(|| vec![T::zero(); input.len()]);
    let mut gw = want_weight.then(|| vec![T::zero(); weight.len()]);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut gcol = vec![T::zero(); if want_input && !pointwise { k * plane } else { 0 }];
    for b in 0..d.n {
        for g in 0..geom.groups {
            let base = (b * d.cin + g * cin_g) * plane;
            if want_weight && !pointwise {
                im2col(input, &d, geom, b, g, &mut col);
            }
            gcol.fill(T::zero());
            for ocl in 0..cout_g {
                let oc = g * cout_g + ocl;
                let go = &grad_out[(b * d.cout + oc) * plane..][..plane];
                for j in 0..k {
                    if let Some(gw) = gw.as_mut() {
                        let cols: &[T] = if pointwise { &input[base..base + k * plane] } else { &col };
                        gw[oc * k + j] = gw[oc * k + j] + dot(go, &cols[j * plane..(j + 1) * plane]);
                    }
                    if let Some(gin) = gin.as_mut() {
                        let wv = weight[oc * k + j];
                        let dst = if pointwise {
                            &mut gin[base + j * plane..base + (j + 1) * plane]
                        } else {
                            &mut gcol[j * plane..(j + 1) * plane]
                        };
                        axpy(dst, wv, go);
                    }
                }
            }
            if let (Some(gin), false) = (gin.as_mut(), pointwise) {
                col2im(&gcol, &d, geom, b, g, gin);
            }
        }
    }
    Ok((gin, gw))
}

pub(crate) struct PoolDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn pool_dims(in_shape: &[usize], geom: PoolGeom) -> Result<PoolDims> {
    let (n, c, h, w) = match in_shape {
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(shape_err(format!("pool2d input must be NCHW, got {s:?}"))),
    };
    if geom.kernel < 1 {
        return Err(arg_err("pool kernel must be >= 1"));
    }
    if geom.padding >= geom.kernel {
        return Err(arg_err(format!(
            "pool padding {} must be smaller than kernel {}",
            geom.padding, geom.kernel
        )));
    }
    if geom.kernel > h + 2 * geom.padding || geom.kernel > w + 2 * geom.padding {
        return Err(arg_err(format!(
            "pool kernel {} larger than padded input {}x{}",
            geom.kernel,
            h + 2 * geom.padding,
            w + 2 * geom.padding
        )));
    }
    let oh = out_extent(h, geom.kernel, geom.stride, geom.padding, 1)?;
    let ow = out_extent(w, geom.kernel, geom.stride, geom.padding, 1)?;
    Ok(PoolDims { n, c, h, w, oh, ow })
}

/// Forward pooling. For max pooling also returns the flat input index chosen
/// for every output; for average pooling the per-output divisor (padding is
/// excluded from the count).
pub(crate) fn pool2d_forward<T: Real>(
    input: &[T],
    in_shape: &[usize],
    kind: PoolKind,
    geom: PoolGeom,
) -> Result<(Vec<T>, Vec<usize>, Vec<usize>)> {
    let d = pool_dims(in_shape, geom)?;
    let mut out = Vec::with_capacity(d.n * d.c * d.oh * d.ow);
    let mut aux = Vec::with_capacity(out.capacity());
    for plane in 0..d.n * d.c {
        let base = plane * d.h * d.w;
        for oy in 0..d.oh {
            let y0 = (oy * geom.stride) as isize - geom.padding as isize;
            for ox in 0..d.ow {
                let x0 = (ox * geom.stride) as isize - geom.padding as isize;
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                let mut sum = T::zero();
                let mut count = 0usize;
                for ky in 0..geom.kernel as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let at = base + iy as usize * d.w + ix as usize;
                        let v = input[at];
                        if v > best || best_at == usize::MAX {
                            best = v;
                            best_at = at;
                        }
                        sum = sum + v;
                        count += 1;
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out.push(best);
                        aux.push(best_at);
                    }
                    PoolKind::Avg => {
                        out.push(sum / T::from_usize(count).unwrap());
                        aux.push(count);
                    }
                }
            }
        }
    }
    Ok((out, vec![d.n, d.c, d.oh, d.ow], aux))
}

pub(crate) fn pool2d_backward<T: Real>(
    in_shape: &[usize],
    kind: PoolKind,
    geom: PoolGeom,
    aux: &[usize],
    grad_out: &[T],
) -> Result<Vec<T>> {
    let d = pool_dims(in_shape, geom)?;
    let mut gin = vec![T::zero(); d.n * d.c * d.h * d.w];
    match kind {
        PoolKind::Max => {
            for (&at, &g) in aux.iter().zip(grad_out) {
                gin[at] = gin[at] + g;
            }
        }
        PoolKind::Avg => {
            let mut o = 0;
            for plane in 0..d.n * d.c {
                let base = plane * d.h * d.w;
                for oy in 0..d.oh {
                    let y0 = (oy * geom.stride) as isize - geom.padding as isize;
                    for ox in 0..d.ow {
                        let x0 = (ox * geom.stride) as isize - geom.padding as isize;
                        let share = grad_out[o] / T::from_usize(aux[o]).unwrap();
                        o += 1;
                        for ky in 0..geom.kernel as isize {
                            let iy = y0 + ky;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel as isize {
                                let ix = x0 + kx;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let at = base + iy as usize * d.w + ix as usize;
                                gin[at] = gin[at] + share;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

//! Raw numeric kernels behind the autodiff ops: im2col-based convolutions,
//! transposed convolutions, pooling and resampling. All single-threaded and
//! deterministic; GEMMs go through `ndarray::linalg::general_mat_mul`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4};

/// Asymmetric zero padding (top, left, bottom, right). Stride-2 blocks pad
/// the bottom/right edge one extra pixel when needed so output dims are
/// ceil(input/2) for every input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad4 {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Pad4 {
    pub fn uniform(p: usize) -> Self {
        Pad4 {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }

    /// Padding for a k×k stride-2 conv producing ceil(h/2) × ceil(w/2).
    pub fn ceil_half(k: usize, h: usize, w: usize) -> Self {
        // Want (h + pt + pb - k)/2 + 1 = ceil(h/2) with pt fixed at k/2 - 1
        // (i.e. 1 for both k=3 and k=4). Solve for pb, clamped at pt.
        let pt = k / 2 - 1;
        let need = |dim: usize| {
            let out = dim.div_ceil(2);
            let span = (out - 1) * 2 + k;
            (span - dim).saturating_sub(pt).max(pt)
        };
        Pad4 {
            top: pt,
            left: pt,
            bottom: need(h),
            right: need(w),
        }
    }
}

pub fn conv_out_dim(dim: usize, k: usize, stride: usize, pad_lo: usize, pad_hi: usize) -> usize {
    (dim + pad_lo + pad_hi - k) / stride + 1
}

/// Unfold one sample into a [C·kh·kw, Ho·Wo] patch matrix.
pub fn im2col(
    x: ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad4,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, kh, stride, pad.top, pad.bottom);
    let wo = conv_out_dim(w, kw, stride, pad.left, pad.right);
    let mut cols = Array2::<f32>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad.top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad.left as isize;
                        if ix >= 0 && ix < w as isize {
                            out_row[oy * wo + ox] = plane[(iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch matrix back onto the image grid, accumulating overlaps
/// (adjoint of `im2col`).
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: ArrayView2<f32>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad4,
) -> Array3<f32> {
    let ho = conv_out_dim(h, kh, stride, pad.top, pad.bottom);
    let wo = conv_out_dim(w, kw, stride, pad.left, pad.right);
    debug_assert_eq!(cols.dim(), (c * kh * kw, ho * wo));
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = out.index_axis_mut(ndarray::Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = cols.row((ci * kh + ky) * kw + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad.top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad.left as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[(iy as usize, ix as usize)] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward: x [N,C,H,W] * w [F,C,kh,kw] + b [F] → [N,F,Ho,Wo].
pub fn conv2d_fwd(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    b: ArrayView1<f32>,
    stride: usize,
    pad: Pad4,
) -> Array4<f32> {
    let (n, c, h, wd) = x.dim();
    let (f, cw, kh, kw) = w.dim();
    assert_eq!(c, cw, "conv input channels");
    let ho = conv_out_dim(h, kh, stride, pad.top, pad.bottom);
    let wo = conv_out_dim(wd, kw, stride, pad.left, pad.right);
    let w2d = w.into_shape_with_order((f, c * kh * kw)).unwrap();
    let mut out = Array4::<f32>::zeros((n, f, ho, wo));
    for ni in 0..n {
        let cols = im2col(x.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad);
        let mut out2d = out
            .index_axis_mut(ndarray::Axis(0), ni)
            .into_shape_with_order((f, ho * wo))
            .unwrap();
        general_mat_mul(1.0, &w2d, &cols.view(), 0.0, &mut out2d);
        for fi in 0..f {
            let bias = b[fi];
            out2d.row_mut(fi).mapv_inplace(|v| v + bias);
        }
    }
    out
}

/// Convolution backward. The patch matrix is recomputed from `x` rather than
/// cached at forward time, trading FLOPs for a much smaller tape.
pub fn conv2d_bwd(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    dout: ArrayView4<f32>,
    stride: usize,
    pad: Pad4,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (n, c, h, wd) = x.dim();
    let (f, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = dout.dim();
    let w2d = w.into_shape_with_order((f, c * kh * kw)).unwrap();
    let mut dx = Array4::<f32>::zeros((n, c, h, wd));
    let mut dw2d = Array2::<f32>::zeros((f, c * kh * kw));
    let mut db = Array1::<f32>::zeros(f);
    for ni in 0..n {
        let cols = im2col(x.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad);
        let dout2d = dout
            .index_axis(ndarray::Axis(0), ni)
            .into_shape_with_order((f, ho * wo))
            .unwrap();
        // dW += dY · colsᵀ
        general_mat_mul(1.0, &dout2d, &cols.view().reversed_axes(), 1.0, &mut dw2d.view_mut());
        // dX = fold(Wᵀ · dY)
        let mut dcols = Array2::<f32>::zeros((c * kh * kw, ho * wo));
        general_mat_mul(1.0, &w2d.reversed_axes(), &dout2d, 0.0, &mut dcols.view_mut());
        dx.index_axis_mut(ndarray::Axis(0), ni)
            .assign(&col2im(dcols.view(), c, h, wd, kh, kw, stride, pad));
        for fi in 0..f {
            db[fi] += dout2d.row(fi).sum();
        }
    }
    let dw = dw2d.into_shape_with_order((f, c, kh, kw)).unwrap();
    (dx, dw, db)
}

/// Transposed convolution (3×3, stride 2, pad 1, output padding 1), the
/// stride-½ upsampling block: x [N,Cin,H,W] * w [Cin,Cout,3,3] → [N,Cout,2H,2W].
pub fn convt2d_fwd(x: ArrayView4<f32>, w: ArrayView4<f32>, b: ArrayView1<f32>) -> Array4<f32> {
    let (n, cin, h, wd) = x.dim();
    let (cw, cout, kh, kw) = w.dim();
    assert_eq!(cin, cw, "transposed conv input channels");
    let (ho, wo) = (2 * h, 2 * wd);
    let pad = Pad4::uniform(1);
    let w2d = w.into_shape_with_order((cin, cout * kh * kw)).unwrap();
    let mut out = Array4::<f32>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        let x2d = x
            .index_axis(ndarray::Axis(0), ni)
            .into_shape_with_order((cin, h * wd))
            .unwrap();
        let mut prod = Array2::<f32>::zeros((cout * kh * kw, h * wd));
        general_mat_mul(1.0, &w2d.reversed_axes(), &x2d, 0.0, &mut prod.view_mut());
        // scatter: the adjoint of im2col(out, k=3, s=2, p=1), whose output
        // grid is exactly the input grid of the transposed conv
        let folded = col2im(prod.view(), cout, ho, wo, kh, kw, 2, pad);
        let mut out_n = out.index_axis_mut(ndarray::Axis(0), ni);
        out_n.assign(&folded);
        for co in 0..cout {
            let bias = b[co];
            out_n
                .index_axis_mut(ndarray::Axis(0), co)
                .mapv_inplace(|v| v + bias);
        }
    }
    out
}

pub fn convt2d_bwd(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    dout: ArrayView4<f32>,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (n, cin, h, wd) = x.dim();
    let (_, cout, kh, kw) = w.dim();
    let pad = Pad4::uniform(1);
    let w2d = w.into_shape_with_order((cin, cout * kh * kw)).unwrap();
    let mut dx = Array4::<f32>::zeros((n, cin, h, wd));
    let mut dw2d = Array2::<f32>::zeros((cin, cout * kh * kw));
    let mut db = Array1::<f32>::zeros(cout);
    for ni in 0..n {
        let dcols = im2col(dout.index_axis(ndarray::Axis(0), ni), kh, kw, 2, pad);
        let x2d = x
            .index_axis(ndarray::Axis(0), ni)
            .into_shape_with_order((cin, h * wd))
            .unwrap();
        // dX = W · unfold(dY)
        let mut dx2d = dx
            .index_axis_mut(ndarray::Axis(0), ni)
            .into_shape_with_order((cin, h * wd))
            .unwrap();
        general_mat_mul(1.0, &w2d, &dcols.view(), 0.0, &mut dx2d);
        // dW += X · unfold(dY)ᵀ
        general_mat_mul(1.0, &x2d, &dcols.view().reversed_axes(), 1.0, &mut dw2d.view_mut());
        let dout_n = dout.index_axis(ndarray::Axis(0), ni);
        for co in 0..cout {
            db[co] += dout_n.index_axis(ndarray::Axis(0), co).sum();
        }
    }
    let dw = dw2d.into_shape_with_order((cin, cout, kh, kw)).unwrap();
    (dx, dw, db)
}

/// Mean over factor×factor blocks (the aligned-bilinear downsampling).
pub fn block_mean_fwd(x: ArrayView4<f32>, factor: usize) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    assert!(h % factor == 0 && w % factor == 0);
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = Array4::<f32>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            let mut oplane = out.slice_mut(s![ni, ci, .., ..]);
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0f32;
                    for by in 0..factor {
                        for bx in 0..factor {
                            acc += plane[(y * factor + by, xx * factor + bx)];
                        }
                    }
                    oplane[(y, xx)] = acc * norm;
                }
            }
        }
    }
    out
}

pub fn block_mean_bwd(dout: ArrayView4<f32>, factor: usize) -> Array4<f32> {
    let (n, c, ho, wo) = dout.dim();
    let norm = 1.0 / (factor * factor) as f32;
    let mut dx = Array4::<f32>::zeros((n, c, ho * factor, wo * factor));
    for ni in 0..n {
        for ci in 0..c {
            let dplane = dout.slice(s![ni, ci, .., ..]);
            let mut xplane = dx.slice_mut(s![ni, ci, .., ..]);
            for y in 0..ho {
                for xx in 0..wo {
                    let g = dplane[(y, xx)] * norm;
                    for by in 0..factor {
                        for bx in 0..factor {
                            xplane[(y * factor + by, xx * factor + bx)] = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-axis source index/weight pairs for 2× bilinear upsampling with
/// half-pixel centers (indices clamped at the borders).
fn up2_taps(out_dim: usize, in_dim: usize) -> Vec<(usize, usize, f32)> {
    (0..out_dim)
        .map(|o| {
            let src = (o as f32 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = (floor.max(0.0) as usize).min(in_dim - 1);
            let i1 = (i0 + 1).min(in_dim - 1);
            let i0 = if floor < 0.0 { 0 } else { i0 };
            (i0, i1, t)
        })
        .collect()
}

/// 2× bilinear upsampling, [N,C,H,W] → [N,C,2H,2W].
pub fn upsample2_bilinear_fwd(x: ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let ys = up2_taps(2 * h, h);
    let xs = up2_taps(2 * w, w);
    let mut out = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            let mut oplane = out.slice_mut(s![ni, ci, .., ..]);
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let top = plane[(y0, x0)] * (1.0 - tx) + plane[(y0, x1)] * tx;
                    let bot = plane[(y1, x0)] * (1.0 - tx) + plane[(y1, x1)] * tx;
                    oplane[(oy, ox)] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    out
}

pub fn upsample2_bilinear_bwd(dout: ArrayView4<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c, _, _) = dout.dim();
    let ys = up2_taps(2 * h, h);
    let xs = up2_taps(2 * w, w);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let dplane = dout.slice(s![ni, ci, .., ..]);
            let mut xplane = dx.slice_mut(s![ni, ci, .., ..]);
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let g = dplane[(oy, ox)];
                    xplane[(y0, x0)] += g * (1.0 - ty) * (1.0 - tx);
                    xplane[(y0, x1)] += g * (1.0 - ty) * tx;
                    xplane[(y1, x0)] += g * ty * (1.0 - tx);
                    xplane[(y1, x1)] += g * ty * tx;
                }
            }
        }
    }
    dx
}

/// 2×2 max pooling (stride 2); returns the pooled map and the flat index of
/// each winner for the backward scatter.
pub fn maxpool2_fwd(x: ArrayView4<f32>) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((n, c, ho, wo));
    let mut argmax = vec![0u32; n * c * ho * wo];
    let mut k = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            let mut oplane = out.slice_mut(s![ni, ci, .., ..]);
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for by in 0..2 {
                        for bx in 0..2 {
                            let (iy, ix) = (2 * y + by, 2 * xx + bx);
                            let v = plane[(iy, ix)];
                            if v > best {
                                best = v;
                                best_idx = (iy * w + ix) as u32;
                            }
                        }
                    }
                    oplane[(y, xx)] = best;
                    argmax[k] = best_idx;
                    k += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_bwd(dout: ArrayView4<f32>, argmax: &[u32], h: usize, w: usize) -> Array4<f32> {
    let (n, c, ho, wo) = dout.dim();
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let mut k = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let dplane = dout.slice(s![ni, ci, .., ..]);
            let mut xplane = dx.slice_mut(s![ni, ci, .., ..]);
            for y in 0..ho {
                for xx in 0..wo {
                    let flat = argmax[k] as usize;
                    xplane[(flat / w, flat % w)] += dplane[(y, xx)];
                    k += 1;
                }
            }
        }
    }
    dx
}

/// Zero padding on the spatial axes.
pub fn pad_zero_fwd(x: ArrayView4<f32>, pad: Pad4) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((n, c, h + pad.top + pad.bottom, w + pad.left + pad.right));
    out.slice_mut(s![.., .., pad.top..pad.top + h, pad.left..pad.left + w])
        .assign(&x);
    out
}

pub fn pad_zero_bwd(dout: ArrayView4<f32>, pad: Pad4, h: usize, w: usize) -> Array4<f32> {
    dout.slice(s![.., .., pad.top..pad.top + h, pad.left..pad.left + w])
        .to_owned()
}

//! Structural tensor kernels: convolution, resampling, warping, attention
//! primitives, and the Gaussian rate model. Forward and backward versions
//! live side by side and are shared by the inference path and the autograd
//! tape, so a trained graph and a plain inference call produce bit-identical
//! outputs.
//!
//! Determinism rules: every reduction accumulates in a fixed left-to-right
//! scalar order (Rust never reassociates floats, so the compiler may only
//! vectorize independent output lanes, which does not change results).
//! Shape preconditions are programmer errors and assert.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Convolution

/// 2-D convolution, zero padding, square-free kernels allowed.
/// `x` is `[N, Cin, H, W]`, `w` is `[Cout, Cin/groups, KH, KW]`,
/// `bias` is `[1, Cout, 1, 1]` when present.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<S> {
    let [n, cin, h, wid] = x.shape();
    let [cout, cing, kh, kw] = w.shape();
    assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0);
    assert_eq!(cing, cin / groups, "weight in-channels vs input/groups");
    if let Some(b) = bias {
        assert_eq!(b.shape(), [1, cout, 1, 1]);
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wid + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    let cpg_out = cout / groups;

    for ni in 0..n {
        for oc in 0..cout {
            let g = oc / cpg_out;
            let ic0 = g * cing;
            let b0 = bias.map_or(S::ZERO, |b| b.data()[oc]);
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    // Clip the kernel window against the borders once.
                    let ky_lo = (-iy0).max(0) as usize;
                    let ky_hi = kh.min((h as isize - iy0).max(0) as usize);
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = kw.min((wid as isize - ix0).max(0) as usize);
                    let mut acc = b0;
                    if kx_hi > kx_lo {
                        for icg in 0..cing {
                            let ic = ic0 + icg;
                            for ky in ky_lo..ky_hi {
                                let iy = (iy0 + ky as isize) as usize;
                                let xrow = x.idx(ni, ic, iy, (ix0 + kx_lo as isize) as usize);
                                let wrow = ((oc * cing + icg) * kh + ky) * kw + kx_lo;
                                let xs = &xd[xrow..xrow + (kx_hi - kx_lo)];
                                let ws = &wd[wrow..wrow + (kx_hi - kx_lo)];
                                for (xv, wv) in xs.iter().zip(ws) {
                                    acc += *xv * *wv;
                                }
                            }
                        }
                    }
                    od[((ni * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] with respect to the input.
pub fn conv2d_bwd_input<S: Scalar>(
    gy: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    pad: usize,
    groups: usize,
    x_shape: [usize; 4],
) -> Tensor<S> {
    let [n, cin, h, wid] = x_shape;
    let [cout, cing, kh, kw] = w.shape();
    let [gn, gc, oh, ow] = gy.shape();
    assert_eq!((gn, gc), (n, cout));
    let mut gx = Tensor::zeros(x_shape);
    let gyd = gy.data();
    let wd = w.data();
    let gxd = gx.data_mut();
    let cpg_out = cout / groups;

    for ni in 0..n {
        for oc in 0..cout {
            let g = oc / cpg_out;
            let ic0 = g * cing;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let gv = gyd[((ni * cout + oc) * oh + oy) * ow + ox];
                    let ky_lo = (-iy0).max(0) as usize;
                    let ky_hi = kh.min((h as isize - iy0).max(0) as usize);
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = kw.min((wid as isize - ix0).max(0) as usize);
                    if kx_hi <= kx_lo {
                        continue;
                    }
                    for icg in 0..cing {
                        let ic = ic0 + icg;
                        for ky in ky_lo..ky_hi {
                            let iy = (iy0 + ky as isize) as usize;
                            let xrow =
                                ((ni * cin + ic) * h + iy) * wid + (ix0 + kx_lo as isize) as usize;
                            let wrow = ((oc * cing + icg) * kh + ky) * kw + kx_lo;
                            let gxs = &mut gxd[xrow..xrow + (kx_hi - kx_lo)];
                            let ws = &wd[wrow..wrow + (kx_hi - kx_lo)];
                            for (gxv, wv) in gxs.iter_mut().zip(ws) {
                                *gxv += gv * *wv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of [`conv2d`] with respect to the weight.
pub fn conv2d_bwd_weight<S: Scalar>(
    gy: &Tensor<S>,
    x: &Tensor<S>,
    stride: usize,
    pad: usize,
    groups: usize,
    w_shape: [usize; 4],
) -> Tensor<S> {
    let [n, cin, h, wid] = x.shape();
    let [cout, cing, kh, kw] = w_shape;
    let [_, _, oh, ow] = gy.shape();
    let mut gw = Tensor::zeros(w_shape);
    let gyd = gy.data();
    let xd = x.data();
    let gwd = gw.data_mut();
    let cpg_out = cout / groups;

    for ni in 0..n {
        for oc in 0..cout {
            let g = oc / cpg_out;
            let ic0 = g * cing;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let gv = gyd[((ni * cout + oc) * oh + oy) * ow + ox];
                    let ky_lo = (-iy0).max(0) as usize;
                    let ky_hi = kh.min((h as isize - iy0).max(0) as usize);
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = kw.min((wid as isize - ix0).max(0) as usize);
                    if kx_hi <= kx_lo {
                        continue;
                    }
                    for icg in 0..cing {
                        let ic = ic0 + icg;
                        for ky in ky_lo..ky_hi {
                            let iy = (iy0 + ky as isize) as usize;
                            let xrow =
                                ((ni * cin + ic) * h + iy) * wid + (ix0 + kx_lo as isize) as usize;
                            let wrow = ((oc * cing + icg) * kh + ky) * kw + kx_lo;
                            let xs = &xd[xrow..xrow + (kx_hi - kx_lo)];
                            let gws = &mut gwd[wrow..wrow + (kx_hi - kx_lo)];
                            for (gwv, xv) in gws.iter_mut().zip(xs) {
                                *gwv += gv * *xv;
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Gradient of [`conv2d`] with respect to the bias: sum over `n, h, w`.
pub fn conv2d_bwd_bias<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = gy.shape();
    let mut gb = Tensor::zeros([1, c, 1, 1]);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = S::ZERO;
            let base = (ni * c + ci) * h * w;
            for &v in &gy.data()[base..base + h * w] {
                acc += v;
            }
            gb.data_mut()[ci] += acc;
        }
    }
    gb
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear 2x upsample, `align_corners=false`, replicate border.
/// Output pixel `2j` mixes source `j` and `j-1` at 3:1; `2j+1` mixes `j` and
/// `j+1` at 3:1 (separably in x and y).
pub fn up2_bilinear<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy0) = tap2::<S>(oy, h);
                let wy1 = S::ONE - wy0;
                for ox in 0..ow {
                    let (x0, x1, wx0) = tap2::<S>(ox, w);
                    let wx1 = S::ONE - wx0;
                    let v = wy0 * (wx0 * x.at(ni, ci, y0, x0) + wx1 * x.at(ni, ci, y0, x1))
                        + wy1 * (wx0 * x.at(ni, ci, y1, x0) + wx1 * x.at(ni, ci, y1, x1));
                    *out.at_mut(ni, ci, oy, ox) = v;
                }
            }
        }
    }
    out
}

/// Source taps for output index `o` of a 2x upsample over `len` samples:
/// `(first, second, weight_of_first)`, borders clamped.
#[inline]
fn tap2<S: Scalar>(o: usize, len: usize) -> (usize, usize, S) {
    let j = o / 2;
    if o % 2 == 0 {
        // Source position j - 0.25: neighbors j-1 (weight 1/4) and j (3/4).
        (j.saturating_sub(1), j, S::from_f64(0.25))
    } else {
        // Source position j + 0.25: neighbors j (3/4) and j+1 (1/4).
        (j, (j + 1).min(len - 1), S::from_f64(0.75))
    }
}

/// Adjoint of [`up2_bilinear`]: scatters output gradients back to sources.
pub fn up2_bilinear_bwd<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    let [n, c, oh, ow] = gy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy0) = tap2::<S>(oy, h);
                let wy1 = S::ONE - wy0;
                for ox in 0..ow {
                    let (x0, x1, wx0) = tap2::<S>(ox, w);
                    let wx1 = S::ONE - wx0;
                    let g = gy.at(ni, ci, oy, ox);
                    *gx.at_mut(ni, ci, y0, x0) += g * wy0 * wx0;
                    *gx.at_mut(ni, ci, y0, x1) += g * wy0 * wx1;
                    *gx.at_mut(ni, ci, y1, x0) += g * wy1 * wx0;
                    *gx.at_mut(ni, ci, y1, x1) += g * wy1 * wx1;
                }
            }
        }
    }
    gx
}

/// 2x2 average pooling, stride 2. Height and width must be even.
pub fn avgpool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 on odd extent {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64(0.25);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let s = x.at(ni, ci, 2 * oy, 2 * ox)
                        + x.at(ni, ci, 2 * oy, 2 * ox + 1)
                        + x.at(ni, ci, 2 * oy + 1, 2 * ox)
                        + x.at(ni, ci, 2 * oy + 1, 2 * ox + 1);
                    *out.at_mut(ni, ci, oy, ox) = s * quarter;
                }
            }
        }
    }
    out
}

pub fn avgpool2_bwd<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    let [n, c, oh, ow] = gy.shape();
    let mut gx = Tensor::zeros([n, c, oh * 2, ow * 2]);
    let quarter = S::from_f64(0.25);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy.at(ni, ci, oy, ox) * quarter;
                    *gx.at_mut(ni, ci, 2 * oy, 2 * ox) = g;
                    *gx.at_mut(ni, ci, 2 * oy, 2 * ox + 1) = g;
                    *gx.at_mut(ni, ci, 2 * oy + 1, 2 * ox) = g;
                    *gx.at_mut(ni, ci, 2 * oy + 1, 2 * ox + 1) = g;
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Warping

/// Backward warp: `out(p) = src(p + flow(p))`, bilinear, border replicate.
/// `flow` is `[N, 2, H, W]` in pixels; channel 0 is dx, channel 1 is dy.
pub fn warp_bilinear<S: Scalar>(src: &Tensor<S>, flow: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = src.shape();
    assert_eq!(flow.shape(), [n, 2, h, w], "flow shape");
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let sx = S::from_usize(x) + flow.at(ni, 0, y, x);
                let sy = S::from_usize(y) + flow.at(ni, 1, y, x);
                let x0f = sx.floor();
                let y0f = sy.floor();
                let fx = sx - x0f;
                let fy = sy - y0f;
                let (x0, x1) = clamp_pair(x0f.to_f64(), w);
                let (y0, y1) = clamp_pair(y0f.to_f64(), h);
                let one = S::ONE;
                for ci in 0..c {
                    let v00 = src.at(ni, ci, y0, x0);
                    let v01 = src.at(ni, ci, y0, x1);
                    let v10 = src.at(ni, ci, y1, x0);
                    let v11 = src.at(ni, ci, y1, x1);
                    let top = v00 * (one - fx) + v01 * fx;
                    let bot = v10 * (one - fx) + v11 * fx;
                    *out.at_mut(ni, ci, y, x) = top * (one - fy) + bot * fy;
                }
            }
        }
    }
    out
}

#[inline]
fn clamp_pair(i0: f64, len: usize) -> (usize, usize) {
    let max = (len - 1) as f64;
    let a = i0.clamp(0.0, max) as usize;
    let b = (i0 + 1.0).clamp(0.0, max) as usize;
    (a, b)
}

/// Gradients of [`warp_bilinear`] with respect to source and flow.
pub fn warp_bilinear_bwd<S: Scalar>(
    gy: &Tensor<S>,
    src: &Tensor<S>,
    flow: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let [n, c, h, w] = src.shape();
    assert_eq!(gy.shape(), [n, c, h, w]);
    let mut gsrc = Tensor::zeros([n, c, h, w]);
    let mut gflow = Tensor::zeros([n, 2, h, w]);
    let one = S::ONE;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let sx = S::from_usize(x) + flow.at(ni, 0, y, x);
                let sy = S::from_usize(y) + flow.at(ni, 1, y, x);
                let x0f = sx.floor();
                let y0f = sy.floor();
                let fx = sx - x0f;
                let fy = sy - y0f;
                let (x0, x1) = clamp_pair(x0f.to_f64(), w);
                let (y0, y1) = clamp_pair(y0f.to_f64(), h);
                let mut gfx = S::ZERO;
                let mut gfy = S::ZERO;
                for ci in 0..c {
                    let g = gy.at(ni, ci, y, x);
                    let v00 = src.at(ni, ci, y0, x0);
                    let v01 = src.at(ni, ci, y0, x1);
                    let v10 = src.at(ni, ci, y1, x0);
                    let v11 = src.at(ni, ci, y1, x1);
                    *gsrc.at_mut(ni, ci, y0, x0) += g * (one - fx) * (one - fy);
                    *gsrc.at_mut(ni, ci, y0, x1) += g * fx * (one - fy);
                    *gsrc.at_mut(ni, ci, y1, x0) += g * (one - fx) * fy;
                    *gsrc.at_mut(ni, ci, y1, x1) += g * fx * fy;
                    let top = v01 - v00;
                    let bot = v11 - v10;
                    gfx += g * (top * (one - fy) + bot * fy);
                    gfy += g * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                }
                *gflow.at_mut(ni, 0, y, x) = gfx;
                *gflow.at_mut(ni, 1, y, x) = gfy;
            }
        }
    }
    (gsrc, gflow)
}

// ---------------------------------------------------------------------------
// Shifts (census loss)

/// Shift by `(dx, dy)` with replicate border: `out(y, x) = in(y+dy, x+dx)`
/// clamped to the frame.
pub fn shift2d<S: Scalar>(x: &Tensor<S>, dx: isize, dy: isize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for xph in 0..w {
                    let sxp = (xph as isize + dx).clamp(0, w as isize - 1) as usize;
                    *out.at_mut(ni, ci, y, xph) = x.at(ni, ci, sy, sxp);
                }
            }
        }
    }
    out
}

/// Adjoint of [`shift2d`]: scatter-add back to clamped sources.
pub fn shift2d_bwd<S: Scalar>(gy: &Tensor<S>, dx: isize, dy: isize) -> Tensor<S> {
    let [n, c, h, w] = gy.shape();
    let mut gx = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for xph in 0..w {
                    let sxp = (xph as isize + dx).clamp(0, w as isize - 1) as usize;
                    *gx.at_mut(ni, ci, sy, sxp) += gy.at(ni, ci, y, xph);
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Channel mixing

/// Mean over the channel axis: `[N, C, H, W] -> [N, 1, H, W]`.
pub fn mean_channels<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let inv = S::ONE / S::from_usize(c);
    let mut out = Tensor::zeros([n, 1, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xph in 0..w {
                    *out.at_mut(ni, 0, y, xph) += x.at(ni, ci, y, xph);
                }
            }
        }
    }
    out.scale_in_place(inv);
    out
}

pub fn mean_channels_bwd<S: Scalar>(gy: &Tensor<S>, c: usize) -> Tensor<S> {
    let [n, _, h, w] = gy.shape();
    let inv = S::ONE / S::from_usize(c);
    let mut gx = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xph in 0..w {
                    *gx.at_mut(ni, ci, y, xph) = gy.at(ni, 0, y, xph) * inv;
                }
            }
        }
    }
    gx
}

/// Concatenate along channels.
pub fn concat_ch<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    let plane = h * w;
    for ni in 0..n {
        let src_a = &a.data()[ni * ca * plane..(ni + 1) * ca * plane];
        let src_b = &b.data()[ni * cb * plane..(ni + 1) * cb * plane];
        let dst = &mut out.data_mut()[ni * (ca + cb) * plane..(ni + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(src_a);
        dst[ca * plane..].copy_from_slice(src_b);
    }
    out
}

/// Channels `c0..c1` of `x`.
pub fn slice_ch<S: Scalar>(x: &Tensor<S>, c0: usize, c1: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    assert!(c0 < c1 && c1 <= c);
    let plane = h * w;
    let mut out = Tensor::zeros([n, c1 - c0, h, w]);
    for ni in 0..n {
        let src = &x.data()[(ni * c + c0) * plane..(ni * c + c1) * plane];
        out.data_mut()[ni * (c1 - c0) * plane..(ni + 1) * (c1 - c0) * plane]
            .copy_from_slice(src);
    }
    out
}

/// Scatter gradients of a channel slice back into the full shape.
pub fn slice_ch_bwd<S: Scalar>(gy: &Tensor<S>, c0: usize, full_c: usize) -> Tensor<S> {
    let [n, cs, h, w] = gy.shape();
    let plane = h * w;
    let mut gx = Tensor::zeros([n, full_c, h, w]);
    for ni in 0..n {
        let dst = &mut gx.data_mut()[(ni * full_c + c0) * plane..(ni * full_c + c0 + cs) * plane];
        dst.copy_from_slice(&gy.data()[ni * cs * plane..(ni + 1) * cs * plane]);
    }
    gx
}

/// Broadcast a per-channel parameter `[1, C, 1, 1]` to `[n, C, h, w]`.
pub fn broadcast_ch<S: Scalar>(p: &Tensor<S>, n: usize, h: usize, w: usize) -> Tensor<S> {
    let [_, c, _, _] = p.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let v = p.data()[ci];
            let base = (ni * c + ci) * h * w;
            for o in &mut out.data_mut()[base..base + h * w] {
                *o = v;
            }
        }
    }
    out
}

/// Adjoint of [`broadcast_ch`]: sum over `n, h, w`.
pub fn broadcast_ch_bwd<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    conv2d_bwd_bias(gy)
}

/// Multiply `x` `[N, C, H, W]` by a single-channel mask `[N, 1, H, W]`.
pub fn mul_bcast1<S: Scalar>(x: &Tensor<S>, m: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    assert_eq!(m.shape(), [n, 1, h, w]);
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xph in 0..w {
                    *out.at_mut(ni, ci, y, xph) = x.at(ni, ci, y, xph) * m.at(ni, 0, y, xph);
                }
            }
        }
    }
    out
}

/// Gradients of [`mul_bcast1`]: `(gx, gm)`.
pub fn mul_bcast1_bwd<S: Scalar>(
    gy: &Tensor<S>,
    x: &Tensor<S>,
    m: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let [n, c, h, w] = x.shape();
    let mut gx = Tensor::zeros([n, c, h, w]);
    let mut gm = Tensor::zeros([n, 1, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xph in 0..w {
                    let g = gy.at(ni, ci, y, xph);
                    *gx.at_mut(ni, ci, y, xph) = g * m.at(ni, 0, y, xph);
                    *gm.at_mut(ni, 0, y, xph) += g * x.at(ni, ci, y, xph);
                }
            }
        }
    }
    (gx, gm)
}

// ---------------------------------------------------------------------------
// Normalization

/// LayerNorm over the channel axis at every pixel, learned per-channel
/// `gamma` and `beta` (`[1, C, 1, 1]`).
pub fn layer_norm_ch<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    assert_eq!(gamma.shape(), [1, c, 1, 1]);
    assert_eq!(beta.shape(), [1, c, 1, 1]);
    let invc = S::ONE / S::from_usize(c);
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for y in 0..h {
            for xph in 0..w {
                let mut mean = S::ZERO;
                for ci in 0..c {
                    mean += x.at(ni, ci, y, xph);
                }
                mean *= invc;
                let mut var = S::ZERO;
                for ci in 0..c {
                    let d = x.at(ni, ci, y, xph) - mean;
                    var += d * d;
                }
                var *= invc;
                let inv_std = S::ONE / (var + eps).sqrt();
                for ci in 0..c {
                    let xhat = (x.at(ni, ci, y, xph) - mean) * inv_std;
                    *out.at_mut(ni, ci, y, xph) = gamma.data()[ci] * xhat + beta.data()[ci];
                }
            }
        }
    }
    out
}

/// Gradients of [`layer_norm_ch`]: `(gx, ggamma, gbeta)`.
pub fn layer_norm_ch_bwd<S: Scalar>(
    gy: &Tensor<S>,
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    eps: S,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [n, c, h, w] = x.shape();
    let invc = S::ONE / S::from_usize(c);
    let mut gx = Tensor::zeros([n, c, h, w]);
    let mut gg = Tensor::zeros([1, c, 1, 1]);
    let mut gb = Tensor::zeros([1, c, 1, 1]);
    for ni in 0..n {
        for y in 0..h {
            for xph in 0..w {
                let mut mean = S::ZERO;
                for ci in 0..c {
                    mean += x.at(ni, ci, y, xph);
                }
                mean *= invc;
                let mut var = S::ZERO;
                for ci in 0..c {
                    let d = x.at(ni, ci, y, xph) - mean;
                    var += d * d;
                }
                var *= invc;
                let inv_std = S::ONE / (var + eps).sqrt();
                // Accumulate the two reduction terms of the standard formula.
                let mut sum_gxhat = S::ZERO;
                let mut sum_gxhat_xhat = S::ZERO;
                for ci in 0..c {
                    let xhat = (x.at(ni, ci, y, xph) - mean) * inv_std;
                    let gxhat = gy.at(ni, ci, y, xph) * gamma.data()[ci];
                    sum_gxhat += gxhat;
                    sum_gxhat_xhat += gxhat * xhat;
                    gg.data_mut()[ci] += gy.at(ni, ci, y, xph) * xhat;
                    gb.data_mut()[ci] += gy.at(ni, ci, y, xph);
                }
                for ci in 0..c {
                    let xhat = (x.at(ni, ci, y, xph) - mean) * inv_std;
                    let gxhat = gy.at(ni, ci, y, xph) * gamma.data()[ci];
                    let v = (gxhat - (sum_gxhat + xhat * sum_gxhat_xhat) * invc) * inv_std;
                    *gx.at_mut(ni, ci, y, xph) = v;
                }
            }
        }
    }
    (gx, gg, gb)
}

// ---------------------------------------------------------------------------
// Attention primitives (tensors viewed as 2-D: `[1, 1, rows, cols]`)

fn as2d<S: Scalar>(x: &Tensor<S>) -> (usize, usize) {
    let [n, c, r, k] = x.shape();
    assert!(n == 1 && c == 1, "2-D view expects [1,1,r,c], got {:?}", x.shape());
    (r, k)
}

/// `a [M,K] x b^T [N,K] -> [M,N]`; rows of both operands are contiguous.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = as2d(a);
    let (n, kb) = as2d(b);
    assert_eq!(k, kb);
    let mut out = Tensor::zeros([1, 1, m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            od[i * n + j] = acc;
        }
    }
    out
}

/// `a [M,K] x b [K,N] -> [M,N]`.
pub fn matmul_nn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = as2d(a);
    let (kb, n) = as2d(b);
    assert_eq!(k, kb);
    let mut out = Tensor::zeros([1, 1, m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// `a^T [K,M] x b [K,N] -> [M,N]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (k, m) = as2d(a);
    let (kb, n) = as2d(b);
    assert_eq!(k, kb);
    let mut out = Tensor::zeros([1, 1, m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for kk in 0..k {
        let arow = &ad[kk * m..(kk + 1) * m];
        let brow = &bd[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (r, c) = as2d(x);
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..r {
        let row = &mut d[i * c..(i + 1) * c];
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max_s(v);
        }
        let mut sum = S::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = S::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Softmax backward from the forward output `y`.
pub fn softmax_rows_bwd<S: Scalar>(gy: &Tensor<S>, y: &Tensor<S>) -> Tensor<S> {
    let (r, c) = as2d(y);
    let mut gx = Tensor::zeros([1, 1, r, c]);
    for i in 0..r {
        let yrow = &y.data()[i * c..(i + 1) * c];
        let grow = &gy.data()[i * c..(i + 1) * c];
        let mut dot = S::ZERO;
        for (yv, gv) in yrow.iter().zip(grow) {
            dot += *yv * *gv;
        }
        let out = &mut gx.data_mut()[i * c..(i + 1) * c];
        for ((o, yv), gv) in out.iter_mut().zip(yrow).zip(grow) {
            *o = *yv * (*gv - dot);
        }
    }
    gx
}

/// L2-normalize each row: `y_i = x_i / sqrt(sum x_i^2 + eps)`.
pub fn l2norm_rows<S: Scalar>(x: &Tensor<S>, eps: S) -> Tensor<S> {
    let (r, c) = as2d(x);
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..r {
        let row = &mut d[i * c..(i + 1) * c];
        let mut ss = S::ZERO;
        for &v in row.iter() {
            ss += v * v;
        }
        let inv = S::ONE / (ss + eps).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn l2norm_rows_bwd<S: Scalar>(gy: &Tensor<S>, x: &Tensor<S>, eps: S) -> Tensor<S> {
    let (r, c) = as2d(x);
    let mut gx = Tensor::zeros([1, 1, r, c]);
    for i in 0..r {
        let xrow = &x.data()[i * c..(i + 1) * c];
        let grow = &gy.data()[i * c..(i + 1) * c];
        let mut ss = S::ZERO;
        for &v in xrow.iter() {
            ss += v * v;
        }
        let norm2 = ss + eps;
        let inv = S::ONE / norm2.sqrt();
        let mut dot = S::ZERO;
        for (xv, gv) in xrow.iter().zip(grow) {
            dot += *xv * *gv;
        }
        let out = &mut gx.data_mut()[i * c..(i + 1) * c];
        for ((o, xv), gv) in out.iter_mut().zip(xrow).zip(grow) {
            *o = (*gv - *xv * dot / norm2) * inv;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Gaussian rate model

/// Floor applied to interval probabilities before taking the log.
pub const P_FLOOR: f64 = 1e-12;
/// Scale lower bound: `sigma = SIGMA_MIN + exp(s)`.
pub const SIGMA_MIN: f64 = 0.11;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_2: f64 = std::f64::consts::LN_2;

/// Bits to code `y` (a unit-width interval around it) under
/// `N(mu, (SIGMA_MIN + exp(s))^2)`:
/// `-log2( Phi((y + 0.5 - mu)/sigma) - Phi((y - 0.5 - mu)/sigma) )`.
/// All three tensors share one shape; output is per-element bits.
pub fn gaussian_rate<S: Scalar>(y: &Tensor<S>, mu: &Tensor<S>, s: &Tensor<S>) -> Tensor<S> {
    assert_eq!(y.shape(), mu.shape());
    assert_eq!(y.shape(), s.shape());
    let mut out = Tensor::zeros(y.shape());
    for i in 0..y.numel() {
        let yv = y.data()[i].to_f64();
        let muv = mu.data()[i].to_f64();
        let sv = s.data()[i].to_f64();
        let sigma = SIGMA_MIN + crate::scalar::det::exp(sv);
        let zp = (yv + 0.5 - muv) / sigma;
        let zm = (yv - 0.5 - muv) / sigma;
        let p = (crate::scalar::det::norm_cdf(zp) - crate::scalar::det::norm_cdf(zm)).max(P_FLOOR);
        out.data_mut()[i] = S::from_f64(-crate::scalar::det::ln(p) / LN_2);
    }
    out
}

/// Gradients of [`gaussian_rate`]: `(gy_in, gmu, gs)`.
pub fn gaussian_rate_bwd<S: Scalar>(
    g: &Tensor<S>,
    y: &Tensor<S>,
    mu: &Tensor<S>,
    s: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let mut gy_in = Tensor::zeros(y.shape());
    let mut gmu = Tensor::zeros(y.shape());
    let mut gs = Tensor::zeros(y.shape());
    for i in 0..y.numel() {
        let gv = g.data()[i].to_f64();
        let yv = y.data()[i].to_f64();
        let muv = mu.data()[i].to_f64();
        let sv = s.data()[i].to_f64();
        let es = crate::scalar::det::exp(sv);
        let sigma = SIGMA_MIN + es;
        let zp = (yv + 0.5 - muv) / sigma;
        let zm = (yv - 0.5 - muv) / sigma;
        let p_raw = crate::scalar::det::norm_cdf(zp) - crate::scalar::det::norm_cdf(zm);
        if p_raw <= P_FLOOR {
            continue; // Clamped region: zero gradient.
        }
        let pdf_p = INV_SQRT_2PI * crate::scalar::det::exp(-0.5 * zp * zp);
        let pdf_m = INV_SQRT_2PI * crate::scalar::det::exp(-0.5 * zm * zm);
        // d bits / d p = -1 / (p ln 2)
        let dbits_dp = -1.0 / (p_raw * LN_2);
        let dp_dy = (pdf_p - pdf_m) / sigma;
        let dp_dmu = -dp_dy;
        let dp_dsigma = -(pdf_p * zp - pdf_m * zm) / sigma;
        gy_in.data_mut()[i] = S::from_f64(gv * dbits_dp * dp_dy);
        gmu.data_mut()[i] = S::from_f64(gv * dbits_dp * dp_dmu);
        gs.data_mut()[i] = S::from_f64(gv * dbits_dp * dp_dsigma * es);
    }
    (gy_in, gmu, gs)
}

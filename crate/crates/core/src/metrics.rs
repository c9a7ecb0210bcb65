//! Quality metrics and rate-distortion comparison: PSNR, multi-scale SSIM
//! (evaluation and differentiable in-graph forms), BD-rate, and R-D plots.
//!
//! The two MS-SSIM implementations follow one frozen recipe: an 11x11
//! Gaussian window with sigma 1.5 applied in valid mode, constants
//! C1 = 0.01^2 and C2 = 0.03^2 on a unit data range, contrast-structure
//! means at every scale, luminance only at the coarsest, exponents
//! 0.0448 / 0.2856 / 0.3001 / 0.2363 / 0.1333. Frames shorter than 176
//! pixels on a side cannot fit all five scales; the scale count shrinks so
//! the window always fits and the exponents are renormalized to sum to one.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::scalar::{det, Scalar};
use crate::tensor::Tensor;

/// PSNR on identical inputs is reported as this cap instead of infinity.
pub const PSNR_CAP: f64 = 100.0;

/// Side length needed for the full five MS-SSIM scales: `11 * 2^4`.
pub const MSSSIM_FULL_SCALE_MIN: usize = 176;

const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f64 = 1e-4;
const C2: f64 = 9e-4;
/// Stability floor for the per-scale means before exponentiation.
const TERM_FLOOR: f64 = 1e-6;

// ---------------------------------------------------------------------------
// PSNR

/// Peak signal-to-noise ratio in dB for unit-range data, accumulated in
/// f64 regardless of the tensor's scalar type. Capped at [`PSNR_CAP`].
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0f64;
    for i in 0..a.numel() {
        let d = a.data()[i].to_f64() - b.data()[i].to_f64();
        acc += d * d;
    }
    let mse = acc / a.numel() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * det::ln(mse) / std::f64::consts::LN_10).min(PSNR_CAP)
}

// ---------------------------------------------------------------------------
// MS-SSIM (evaluation form, f64 internals)

/// MS-SSIM value plus how many scales actually fit the frame.
#[derive(Clone, Copy, Debug)]
pub struct MsSsim {
    pub value: f64,
    pub scales: usize,
}

fn gauss_1d() -> [f64; 11] {
    let mut g = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        *v = det::exp(-((i as f64 - 5.0) * (i as f64 - 5.0)) / (2.0 * 1.5 * 1.5));
        sum += *v;
    }
    for v in g.iter_mut() {
        *v /= sum;
    }
    g
}

/// Number of scales (1..=5) for which the 11x11 window fits.
fn usable_scales(mut h: usize, mut w: usize) -> usize {
    let mut s = 0;
    while s < 5 && h.min(w) >= 11 {
        s += 1;
        h = (h - h % 2) / 2;
        w = (w - w % 2) / 2;
    }
    s
}

fn scale_weights(scales: usize) -> Vec<f64> {
    if scales == 5 {
        return MSSSIM_WEIGHTS.to_vec();
    }
    let total: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    MSSSIM_WEIGHTS[..scales].iter().map(|w| w / total).collect()
}

/// Separable valid-mode blur of `(c, h, w)` data.
fn blur_valid(x: &[f64], c: usize, h: usize, w: usize, g: &[f64; 11]) -> Vec<f64> {
    let oh = h - 10;
    let ow = w - 10;
    let mut tmp = vec![0.0; c * oh * w];
    for ci in 0..c {
        for y in 0..oh {
            let dst = &mut tmp[(ci * oh + y) * w..(ci * oh + y + 1) * w];
            for (i, &gv) in g.iter().enumerate() {
                let src = &x[(ci * h + y + i) * w..(ci * h + y + i + 1) * w];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += gv * s;
                }
            }
        }
    }
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let src = &tmp[(ci * oh + y) * w..(ci * oh + y + 1) * w];
            let dst = &mut out[(ci * oh + y) * ow..(ci * oh + y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, &gv) in g.iter().enumerate() {
                    acc += gv * src[xo + j];
                }
                *d = acc;
            }
        }
    }
    out
}

/// Mean contrast-structure and luminance terms of one scale.
fn ssim_terms(a: &[f64], b: &[f64], c: usize, h: usize, w: usize, g: &[f64; 11]) -> (f64, f64) {
    let n = a.len();
    let mut aa = vec![0.0; n];
    let mut bb = vec![0.0; n];
    let mut ab = vec![0.0; n];
    for i in 0..n {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    let mu1 = blur_valid(a, c, h, w, g);
    let mu2 = blur_valid(b, c, h, w, g);
    let saa = blur_valid(&aa, c, h, w, g);
    let sbb = blur_valid(&bb, c, h, w, g);
    let sab = blur_valid(&ab, c, h, w, g);
    let mut cs_sum = 0.0;
    let mut l_sum = 0.0;
    for i in 0..mu1.len() {
        let v1 = saa[i] - mu1[i] * mu1[i];
        let v2 = sbb[i] - mu2[i] * mu2[i];
        let v12 = sab[i] - mu1[i] * mu2[i];
        cs_sum += (2.0 * v12 + C2) / (v1 + v2 + C2);
        l_sum += (2.0 * mu1[i] * mu2[i] + C1) / (mu1[i] * mu1[i] + mu2[i] * mu2[i] + C1);
    }
    let m = mu1.len() as f64;
    (cs_sum / m, l_sum / m)
}

/// Crop to even extents and 2x2 mean-pool.
fn downsample(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let he = h - h % 2;
    let we = w - w % 2;
    let oh = he / 2;
    let ow = we / 2;
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let base = (ci * h + 2 * y) * w + 2 * xo;
                out[(ci * oh + y) * ow + xo] =
                    0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    (out, oh, ow)
}

/// MS-SSIM with the scale count that fits the frame.
pub fn msssim_detailed<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> MsSsim {
    assert_eq!(a.shape(), b.shape());
    let [n, c, h, w] = a.shape();
    assert_eq!(n, 1, "metrics run one frame at a time");
    assert!(h.min(w) >= 11, "frame {h}x{w} too small for an 11x11 window");
    let g = gauss_1d();
    let scales = usable_scales(h, w);
    let weights = scale_weights(scales);
    let mut xa: Vec<f64> = a.data().iter().map(|v| v.to_f64()).collect();
    let mut xb: Vec<f64> = b.data().iter().map(|v| v.to_f64()).collect();
    let (mut ch, mut cw) = (h, w);
    let mut value = 1.0;
    for (s, &wt) in weights.iter().enumerate() {
        let (cs, l) = ssim_terms(&xa, &xb, c, ch, cw, &g);
        value *= cs.max(TERM_FLOOR).powf(wt);
        if s == scales - 1 {
            value *= l.max(TERM_FLOOR).powf(wt);
        } else {
            let (na, nh, nw) = downsample(&xa, c, ch, cw);
            let (nb, _, _) = downsample(&xb, c, ch, cw);
            xa = na;
            xb = nb;
            ch = nh;
            cw = nw;
        }
    }
    MsSsim { value, scales }
}

/// MS-SSIM value alone.
pub fn msssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    msssim_detailed(a, b).value
}

// ---------------------------------------------------------------------------
// MS-SSIM (differentiable in-graph form)

/// Depthwise valid-mode Gaussian window for `c` channels.
fn gauss_window_depthwise<S: Scalar>(c: usize) -> Tensor<S> {
    let g = gauss_1d();
    let mut t = Tensor::zeros([c, 1, 11, 11]);
    for ci in 0..c {
        for i in 0..11 {
            for j in 0..11 {
                *t.at_mut(ci, 0, i, j) = S::from_f64(g[i] * g[j]);
            }
        }
    }
    t
}

/// Differentiable MS-SSIM built from graph operators: the same recipe as
/// [`msssim`], so the trained objective is the reported metric. Every scale
/// must have even extents (pad the frame first); training frames sized as
/// multiples of 64 satisfy this.
pub fn msssim_graph<S: Scalar, C: Ctx<S>>(ctx: &mut C, a: C::H, b: C::H) -> C::H {
    let [n, c, h, w] = ctx.shape(a);
    assert_eq!(n, 1, "metrics run one frame at a time");
    assert_eq!(ctx.shape(b), [n, c, h, w]);
    let scales = usable_scales(h, w);
    let weights = scale_weights(scales);
    let win = ctx.input(gauss_window_depthwise(c));

    let mut xa = a;
    let mut xb = b;
    let mut acc: Option<C::H> = None;
    for (s, &wt) in weights.iter().enumerate() {
        let mu1 = ctx.conv2d(xa, win, None, 1, 0, c);
        let mu2 = ctx.conv2d(xb, win, None, 1, 0, c);
        let aa = ctx.mul(xa, xa);
        let bb = ctx.mul(xb, xb);
        let ab = ctx.mul(xa, xb);
        let saa = ctx.conv2d(aa, win, None, 1, 0, c);
        let sbb = ctx.conv2d(bb, win, None, 1, 0, c);
        let sab = ctx.conv2d(ab, win, None, 1, 0, c);
        let m11 = ctx.mul(mu1, mu1);
        let m22 = ctx.mul(mu2, mu2);
        let m12 = ctx.mul(mu1, mu2);
        let v1 = ctx.sub(saa, m11);
        let v2 = ctx.sub(sbb, m22);
        let v12 = ctx.sub(sab, m12);

        let num = ctx.scalar_mul(v12, 2.0);
        let num = ctx.scalar_add(num, C2);
        let den = ctx.add(v1, v2);
        let den = ctx.scalar_add(den, C2);
        let cs_map = ctx.div(num, den);
        let cs = ctx.mean_all(cs_map);
        let cs = ctx.max_const(cs, TERM_FLOOR);
        let ln_cs = ctx.ln(cs);
        let term = ctx.scalar_mul(ln_cs, wt);
        acc = Some(match acc {
            None => term,
            Some(t) => ctx.add(t, term),
        });

        if s == scales - 1 {
            let num = ctx.scalar_mul(m12, 2.0);
            let num = ctx.scalar_add(num, C1);
            let den = ctx.add(m11, m22);
            let den = ctx.scalar_add(den, C1);
            let l_map = ctx.div(num, den);
            let l = ctx.mean_all(l_map);
            let l = ctx.max_const(l, TERM_FLOOR);
            let ln_l = ctx.ln(l);
            let term = ctx.scalar_mul(ln_l, wt);
            let t = acc.take().unwrap();
            acc = Some(ctx.add(t, term));
        } else {
            let [_, _, hh, ww] = ctx.shape(xa);
            assert!(hh % 2 == 0 && ww % 2 == 0, "odd extent {hh}x{ww} in scale chain");
            xa = ctx.avgpool2(xa);
            xb = ctx.avgpool2(xb);
        }
    }
    ctx.exp(acc.unwrap())
}

// ---------------------------------------------------------------------------
// BD-rate

/// Curve-fit family for BD-rate integration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdMethod {
    /// Least-squares cubic of log-rate in distortion (exact interpolation
    /// for four points).
    Cubic,
    /// Monotone piecewise-cubic Hermite interpolation.
    Pchip,
}

/// Average rate difference of `test` against `anchor` in percent, computed
/// by integrating fitted log10-rate curves over the shared distortion span.
/// Points are `(bits_per_pixel, psnr_db)`; at least two per curve, strictly
/// distinct PSNRs, overlapping PSNR ranges.
pub fn bd_rate(anchor: &[(f64, f64)], test: &[(f64, f64)], method: BdMethod) -> Result<f64> {
    let a = prepare_curve(anchor)?;
    let t = prepare_curve(test)?;
    let lo = a.0[0].max(t.0[0]);
    let hi = a.0[a.0.len() - 1].min(t.0[t.0.len() - 1]);
    if hi <= lo {
        return Err(Error::InvalidArg("R-D curves do not overlap in PSNR".into()));
    }
    let ia = integrate(&a.0, &a.1, lo, hi, method);
    let it = integrate(&t.0, &t.1, lo, hi, method);
    let diff = (it - ia) / (hi - lo);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

/// Sorted (psnr, log10 rate) arrays after validation.
fn prepare_curve(points: &[(f64, f64)]) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "BD-rate needs at least 2 points, got {}",
            points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .map(|&(r, d)| {
            if r <= 0.0 || !r.is_finite() || !d.is_finite() {
                return Err(Error::InvalidArg(format!("bad R-D point ({r}, {d})")));
            }
            Ok((d, det::ln(r) / std::f64::consts::LN_10))
        })
        .collect::<Result<_>>()?;
    pts.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    for i in 1..pts.len() {
        if pts[i].0 == pts[i - 1].0 {
            return Err(Error::InvalidArg(format!("duplicate PSNR {}", pts[i].0)));
        }
    }
    Ok(pts.iter().map(|p| p.0).collect::<Vec<_>>().into_iter().zip(pts.iter().map(|p| p.1)).fold(
        (Vec::new(), Vec::new()),
        |(mut xs, mut ys), (x, y)| {
            xs.push(x);
            ys.push(y);
            (xs, ys)
        },
    ))
}

fn integrate(x: &[f64], y: &[f64], lo: f64, hi: f64, method: BdMethod) -> f64 {
    match method {
        BdMethod::Cubic => {
            let deg = (x.len() - 1).min(3);
            let coef = polyfit(x, y, deg);
            poly_integral(&coef, hi) - poly_integral(&coef, lo)
        }
        BdMethod::Pchip => pchip_integral(x, y, lo, hi),
    }
}

/// Least-squares polynomial fit by normal equations with partial-pivot
/// Gaussian elimination. Degrees here are at most 3.
fn polyfit(x: &[f64], y: &[f64], deg: usize) -> Vec<f64> {
    let m = deg + 1;
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    for (&xi, &yi) in x.iter().zip(y) {
        let mut pows = vec![1.0; 2 * m - 1];
        for k in 1..2 * m - 1 {
            pows[k] = pows[k - 1] * xi;
        }
        for r in 0..m {
            for c in 0..m {
                ata[r][c] += pows[r + c];
            }
            atb[r] += pows[r] * yi;
        }
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| ata[i][col].abs().partial_cmp(&ata[j][col].abs()).unwrap()).unwrap();
        ata.swap(col, piv);
        atb.swap(col, piv);
        for row in col + 1..m {
            let f = ata[row][col] / ata[col][col];
            for c in col..m {
                ata[row][c] -= f * ata[col][c];
            }
            atb[row] -= f * atb[col];
        }
    }
    let mut coef = vec![0.0; m];
    for row in (0..m).rev() {
        let mut v = atb[row];
        for c in row + 1..m {
            v -= ata[row][c] * coef[c];
        }
        coef[row] = v / ata[row][row];
    }
    coef
}

/// Antiderivative of `sum coef[k] x^k` at `x`.
fn poly_integral(coef: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    let mut xp = x;
    for (k, &c) in coef.iter().enumerate() {
        acc += c * xp / (k + 1) as f64;
        xp *= x;
    }
    acc
}

/// Fritsch-Carlson monotone slopes.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    if n == 2 {
        m[0] = d[0];
        m[1] = d[0];
        return m;
    }
    for i in 1..n - 1 {
        if d[i - 1] * d[i] <= 0.0 {
            m[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let mut m0 = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if m0 * d0 <= 0.0 {
            m0 = 0.0;
        } else if d0 * d1 < 0.0 && m0.abs() > 3.0 * d0.abs() {
            m0 = 3.0 * d0;
        }
        m0
    };
    m[0] = end(h[0], h[1], d[0], d[1]);
    m[n - 1] = end(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    m
}

/// Integral of the PCHIP interpolant over `[lo, hi]`, which must lie inside
/// the knot range.
fn pchip_integral(x: &[f64], y: &[f64], lo: f64, hi: f64) -> f64 {
    let m = pchip_slopes(x, y);
    let mut acc = 0.0;
    for i in 0..x.len() - 1 {
        let a = x[i].max(lo);
        let b = x[i + 1].min(hi);
        if b <= a {
            continue;
        }
        let h = x[i + 1] - x[i];
        let ta = (a - x[i]) / h;
        let tb = (b - x[i]) / h;
        // Antiderivative of the Hermite basis combination in unit time.
        let f = |t: f64| {
            let t2 = t * t;
            let t3 = t2 * t;
            let t4 = t3 * t;
            y[i] * (0.5 * t4 - t3 + t)
                + h * m[i] * (0.25 * t4 - 2.0 / 3.0 * t3 + 0.5 * t2)
                + y[i + 1] * (-0.5 * t4 + t3)
                + h * m[i + 1] * (0.25 * t4 - t3 / 3.0)
        };
        acc += h * (f(tb) - f(ta));
    }
    acc
}

// ---------------------------------------------------------------------------
// Plots

/// One labeled R-D curve: `(bits_per_pixel, psnr_db)` points.
#[derive(Clone, Debug)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Render R-D curves to an SVG file with PSNR on the quality axis.
pub fn plot_rd_svg(path: &Path, curves: &[RdCurve]) -> Result<()> {
    plot_curves(path, curves, "Rate-distortion", "PSNR (dB)")
}

fn plot_curves(path: &Path, curves: &[RdCurve], caption: &str, y_desc: &str) -> Result<()> {
    use plotters::prelude::*;
    if curves.iter().all(|c| c.points.is_empty()) {
        return Err(Error::InvalidArg("nothing to plot".into()));
    }
    let all: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(r, d) in &all {
        x0 = x0.min(r);
        x1 = x1.max(r);
        y0 = y0.min(d);
        y1 = y1.max(d);
    }
    let xm = (x1 - x0).max(1e-3) * 0.08;
    let ym = (y1 - y0).max(1e-3) * 0.08;
    let err = |e: String| Error::Format(format!("plot: {e}"));
    let root = SVGBackend::new(path, (820, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 26))
        .margin(18)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .build_cartesian_2d(x0 - xm..x1 + xm, y0 - ym..y1 + ym)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("bits per pixel")
        .y_desc(y_desc)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, curve) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(curve.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(curve.label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart
            .draw_series(curve.points.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(|e| err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK.stroke_width(1))
        .background_style(WHITE.mix(0.85).filled())
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation reports

/// One measured operating point: rate plus both quality metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

/// A labeled sweep of operating points, one per rate setting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

/// Validate a curve for reporting. Structural problems (no points, rates
/// that are not positive and strictly increasing, label characters that
/// would break the CSV) are errors; quality dropping as rate grows is
/// legitimate if surprising, so it comes back as a warning string instead.
pub fn check_curve(curve: &EvalCurve) -> Result<Vec<String>> {
    if curve.points.is_empty() {
        return Err(Error::InvalidArg(format!("curve '{}' has no points", curve.label)));
    }
    if curve.label.is_empty() || curve.label.contains([',', '"', '\n', '\r']) {
        return Err(Error::InvalidArg(format!(
            "curve label {:?} is empty or contains CSV delimiters",
            curve.label
        )));
    }
    let mut warnings = Vec::new();
    for (i, p) in curve.points.iter().enumerate() {
        if !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.psnr_db.is_finite() || !p.ms_ssim.is_finite()
        {
            return Err(Error::InvalidArg(format!(
                "curve '{}' point {i} is not finite with positive bpp: \
                 ({}, {}, {})",
                curve.label, p.bpp, p.psnr_db, p.ms_ssim
            )));
        }
        if i > 0 {
            let q = &curve.points[i - 1];
            if p.bpp <= q.bpp {
                return Err(Error::InvalidArg(format!(
                    "curve '{}' bpp not strictly increasing at point {i}: \
                     {} after {}",
                    curve.label, p.bpp, q.bpp
                )));
            }
            if p.psnr_db < q.psnr_db {
                warnings.push(format!(
                    "curve '{}': psnr drops from {} to {} as bpp rises to {}",
                    curve.label, q.psnr_db, p.psnr_db, p.bpp
                ));
            }
            if p.ms_ssim < q.ms_ssim {
                warnings.push(format!(
                    "curve '{}': ms_ssim drops from {} to {} as bpp rises to {}",
                    curve.label, q.ms_ssim, p.ms_ssim, p.bpp
                ));
            }
        }
    }
    if curve.points.len() < 4 {
        warnings.push(format!(
            "curve '{}' has only {} points; BD-rate needs 4 for a stable fit",
            curve.label,
            curve.points.len()
        ));
    }
    Ok(warnings)
}

const REPORT_HEADER: &str = "label,bpp,psnr_db,ms_ssim";

/// Write `<dataset>.csv`, `<dataset>_psnr.svg`, and `<dataset>_msssim.svg`
/// under `dir` and return the paths in that order. The CSV serializes every
/// float through the shortest-roundtrip formatter, so parsing the file back
/// recovers bit-identical values, and identical input yields identical file
/// bytes. Returns the collected curve warnings alongside the paths.
pub fn emit_report(
    dir: &Path,
    dataset: &str,
    curves: &[EvalCurve],
) -> Result<(Vec<std::path::PathBuf>, Vec<String>)> {
    if curves.is_empty() {
        return Err(Error::InvalidArg("report needs at least one curve".into()));
    }
    if dataset.is_empty() || dataset.contains(['/', '\\']) {
        return Err(Error::InvalidArg(format!("bad dataset name {dataset:?}")));
    }
    let mut warnings = Vec::new();
    for curve in curves {
        warnings.extend(check_curve(curve)?);
    }
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for curve in curves {
        for p in &curve.points {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                curve.label, p.bpp, p.psnr_db, p.ms_ssim
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{dataset}.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let psnr_path = dir.join(format!("{dataset}_psnr.svg"));
    let psnr_curves: Vec<RdCurve> = curves
        .iter()
        .map(|c| RdCurve {
            label: c.label.clone(),
            points: c.points.iter().map(|p| (p.bpp, p.psnr_db)).collect(),
        })
        .collect();
    plot_curves(&psnr_path, &psnr_curves, &format!("{dataset}: PSNR"), "PSNR (dB)")?;
    let ssim_path = dir.join(format!("{dataset}_msssim.svg"));
    let ssim_curves: Vec<RdCurve> = curves
        .iter()
        .map(|c| RdCurve {
            label: c.label.clone(),
            points: c.points.iter().map(|p| (p.bpp, p.ms_ssim)).collect(),
        })
        .collect();
    plot_curves(&ssim_path, &ssim_curves, &format!("{dataset}: MS-SSIM"), "MS-SSIM")?;
    Ok((vec![csv_path, psnr_path, ssim_path], warnings))
}

/// Parse a CSV written by [`emit_report`] back into curves. Rows sharing a
/// label merge into one curve; first appearance fixes curve order.
pub fn parse_report_csv(path: &Path) -> Result<Vec<EvalCurve>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == REPORT_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "{}: expected header {REPORT_HEADER:?}, got {other:?}",
                path.display()
            )))
        }
    }
    let mut curves: Vec<EvalCurve> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "{} line {}: expected 4 fields, got {}",
                path.display(),
                ln + 2,
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{} line {}: bad {what} value {s:?}",
                    path.display(),
                    ln + 2
                ))
            })
        };
        let point = RdPoint {
            bpp: num(fields[1], "bpp")?,
            psnr_db: num(fields[2], "psnr_db")?,
            ms_ssim: num(fields[3], "ms_ssim")?,
        };
        match curves.iter_mut().find(|c| c.label == fields[0]) {
            Some(c) => c.points.push(point),
            None => curves.push(EvalCurve { label: fields[0].to_string(), points: vec![point] }),
        }
    }
    if curves.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::{InferCtx, ParamStore, TrainCtx};

    /// Mirrors the generator the reference values were produced with.
    fn lcg_frame(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut state = seed | 1;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        Tensor::from_vec([1, c, h, w], (0..c * h * w).map(|_| next()).collect()).unwrap()
    }

    #[test]
    fn psnr_anchors() {
        let a = lcg_frame(1, 3, 16, 16);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
        assert!((psnr(&b, &a) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn msssim_matches_reference_values() {
        // Reference values computed with an independent implementation of
        // the recipe in the module docs.
        let a = lcg_frame(101, 3, 64, 64);
        let noise = lcg_frame(202, 3, 64, 64);
        let b = a
            .zip_map(&noise, |x, n| (x + 0.1 * (n - 0.5)).clamp(0.0, 1.0))
            .unwrap();
        let d = msssim_detailed(&a, &b);
        assert_eq!(d.scales, 3);
        assert!((d.value - 0.9952659535683638).abs() < 1e-9, "got {}", d.value);

        let a2 = lcg_frame(303, 1, 32, 32);
        let b2 = a2.map(|v| (v * 0.9 + 0.05).clamp(0.0, 1.0));
        let d2 = msssim_detailed(&a2, &b2);
        assert_eq!(d2.scales, 2);
        assert!((d2.value - 0.9945811157894255).abs() < 1e-9, "got {}", d2.value);

        assert_eq!(msssim(&a, &a), 1.0);

        // Full five scales with a smooth pattern against its noisy version.
        let (h, w) = (192, 192);
        let mut a3 = Tensor::zeros([1, 3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    *a3.at_mut(0, c, y, x) =
                        0.5 + 0.4 * (x as f64 / 17.0).sin() * (y as f64 / 13.0).cos();
                }
            }
        }
        let n3 = lcg_frame(404, 3, h, w);
        let b3 = a3
            .zip_map(&n3, |x, n| (x + 0.08 * (n - 0.5)).clamp(0.0, 1.0))
            .unwrap();
        let d3 = msssim_detailed(&a3, &b3);
        assert_eq!(d3.scales, 5);
        assert!((d3.value - 0.9842610332003352).abs() < 1e-9, "got {}", d3.value);
    }

    #[test]
    fn msssim_orders_degradations() {
        let a = lcg_frame(7, 3, 64, 64);
        let n = lcg_frame(8, 3, 64, 64);
        let light = a.zip_map(&n, |x, v| (x + 0.05 * (v - 0.5)).clamp(0.0, 1.0)).unwrap();
        let heavy = a.zip_map(&n, |x, v| (x + 0.4 * (v - 0.5)).clamp(0.0, 1.0)).unwrap();
        let s_light = msssim(&a, &light);
        let s_heavy = msssim(&a, &heavy);
        assert!(s_light > s_heavy);
        assert!(s_heavy > 0.0 && s_light < 1.0);
    }

    #[test]
    fn graph_msssim_agrees_with_eval_form() {
        let a = lcg_frame(11, 3, 64, 64);
        let n = lcg_frame(12, 3, 64, 64);
        let b = a.zip_map(&n, |x, v| (x + 0.2 * (v - 0.5)).clamp(0.0, 1.0)).unwrap();
        let want = msssim(&a, &b);
        let ps = ParamStore::<f64>::new();
        let mut ctx = InferCtx::new(&ps);
        let ha = ctx.input(a);
        let hb = ctx.input(b);
        let h = msssim_graph(&mut ctx, ha, hb);
        let got = ctx.value(h).data()[0];
        assert!((got - want).abs() < 1e-9, "graph {got} vs eval {want}");
    }

    #[test]
    fn graph_msssim_gradient_matches_fd() {
        // Single scale at 16x16; finite differences on a pixel subset.
        let a = lcg_frame(21, 1, 16, 16);
        let b = lcg_frame(22, 1, 16, 16);
        let ps = ParamStore::<f64>::new();
        let eval = |at: &Tensor<f64>| {
            let mut ctx = InferCtx::new(&ps);
            let ha = ctx.input(at.clone());
            let hb = ctx.input(b.clone());
            let h = msssim_graph(&mut ctx, ha, hb);
            ctx.value(h).data()[0]
        };
        let mut graph = Graph::new();
        let mut ctx = TrainCtx::new(&mut graph, &ps);
        let ha = ctx.graph.param(a.clone());
        let hb = ctx.input(b.clone());
        let h = msssim_graph(&mut ctx, ha, hb);
        ctx.graph.backward(h);
        let grad = ctx.graph.grad(ha).unwrap().clone();
        let eps = 1e-6;
        for &i in &[0usize, 5, 40, 77, 128, 200, 255] {
            let mut ap = a.clone();
            ap.data_mut()[i] += eps;
            let mut am = a.clone();
            am.data_mut()[i] -= eps;
            let fd = (eval(&ap) - eval(&am)) / (2.0 * eps);
            let an = grad.data()[i];
            let tol = 1e-5 * fd.abs().max(an.abs()).max(1e-4);
            assert!((fd - an).abs() < tol, "pixel {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn bd_rate_anchor_cases() {
        let anchor = [(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)];
        let double: Vec<_> = anchor.iter().map(|&(r, d)| (2.0 * r, d)).collect();
        let half: Vec<_> = anchor.iter().map(|&(r, d)| (0.5 * r, d)).collect();
        for method in [BdMethod::Cubic, BdMethod::Pchip] {
            let same = bd_rate(&anchor, &anchor, method).unwrap();
            assert!(same.abs() < 1e-9, "{method:?} same: {same}");
            let up = bd_rate(&anchor, &double, method).unwrap();
            assert!((up - 100.0).abs() < 1e-6, "{method:?} double: {up}");
            let down = bd_rate(&anchor, &half, method).unwrap();
            assert!((down + 50.0).abs() < 1e-6, "{method:?} half: {down}");
        }
    }

    #[test]
    fn bd_rate_matches_reference_fit() {
        // Reference value from an independent cubic-fit implementation.
        let anchor = [(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)];
        let test = [(0.09, 30.5), (0.18, 33.2), (0.35, 36.1), (0.7, 38.9)];
        let got = bd_rate(&anchor, &test, BdMethod::Cubic).unwrap();
        assert!((got - -14.51474327813237).abs() < 1e-6, "got {got}");
        // The monotone fit should tell the same broad story.
        let p = bd_rate(&anchor, &test, BdMethod::Pchip).unwrap();
        assert!((p - got).abs() < 3.0, "pchip {p} vs cubic {got}");
    }

    #[test]
    fn bd_rate_rejects_bad_input() {
        let a = [(0.1, 30.0), (0.2, 33.0)];
        assert!(bd_rate(&a, &[(0.1, 40.0), (0.2, 45.0)], BdMethod::Cubic).is_err());
        assert!(bd_rate(&a, &[(0.1, 30.0)], BdMethod::Cubic).is_err());
        assert!(bd_rate(&[(0.1, 30.0), (0.2, 30.0)], &a, BdMethod::Pchip).is_err());
        assert!(bd_rate(&[(0.0, 30.0), (0.2, 33.0)], &a, BdMethod::Cubic).is_err());
    }

    #[test]
    fn rd_plot_writes_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.svg");
        let curves = [
            RdCurve { label: "ours".into(), points: vec![(0.1, 30.0), (0.2, 33.0), (0.4, 36.0)] },
            RdCurve { label: "baseline".into(), points: vec![(0.15, 30.0), (0.3, 33.0)] },
        ];
        plot_rd_svg(&path, &curves).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.contains("<svg"));
        assert!(body.contains("bits per pixel"));
    }

    /// Curves with deliberately awkward floats for roundtrip checks.
    fn awkward_curves() -> Vec<EvalCurve> {
        vec![
            EvalCurve {
                label: "ours".into(),
                points: vec![
                    RdPoint { bpp: 0.1 + 0.2, psnr_db: 100.0 / 3.0, ms_ssim: 0.911 },
                    RdPoint { bpp: 0.5, psnr_db: 36.125, ms_ssim: 1.0 - 1e-12 },
                ],
            },
            EvalCurve {
                label: "baseline".into(),
                points: vec![
                    RdPoint { bpp: 1.0 / 7.0, psnr_db: 31.0, ms_ssim: 0.9 },
                    RdPoint { bpp: 0.625, psnr_db: 35.5, ms_ssim: 0.98 },
                ],
            },
        ]
    }

    #[test]
    fn report_roundtrips_exactly_and_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let curves = awkward_curves();
        let (paths, _) = emit_report(dir.path(), "synthetic", &curves).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.exists()));
        let parsed = parse_report_csv(&paths[0]).unwrap();
        assert_eq!(parsed.len(), curves.len());
        for (got, want) in parsed.iter().zip(&curves) {
            assert_eq!(got.label, want.label);
            assert_eq!(got.points.len(), want.points.len());
            for (g, w) in got.points.iter().zip(&want.points) {
                // Bit equality, not approximate: the CSV must not lose precision.
                assert_eq!(g.bpp.to_bits(), w.bpp.to_bits());
                assert_eq!(g.psnr_db.to_bits(), w.psnr_db.to_bits());
                assert_eq!(g.ms_ssim.to_bits(), w.ms_ssim.to_bits());
            }
        }
        let first = std::fs::read(&paths[0]).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let (paths2, _) = emit_report(dir2.path(), "synthetic", &curves).unwrap();
        assert_eq!(first, std::fs::read(&paths2[0]).unwrap(), "CSV bytes must be deterministic");
        for svg in &paths[1..] {
            assert!(std::fs::read_to_string(svg).unwrap().contains("<svg"));
        }
    }

    #[test]
    fn report_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(dir.path(), "d", &[]).is_err());
        let empty = EvalCurve { label: "x".into(), points: Vec::new() };
        assert!(emit_report(dir.path(), "d", &[empty]).is_err());
        let mut bad_label = awkward_curves();
        bad_label[0].label = "a,b".into();
        assert!(emit_report(dir.path(), "d", &bad_label).is_err());
        assert!(emit_report(dir.path(), "a/b", &awkward_curves()).is_err());
        let missing = dir.path().join("nope.csv");
        assert!(parse_report_csv(&missing).is_err());
        let garbled = dir.path().join("garbled.csv");
        std::fs::write(&garbled, "label,bpp\nx,1\n").unwrap();
        assert!(parse_report_csv(&garbled).is_err());
        let bad_row = dir.path().join("badrow.csv");
        std::fs::write(&bad_row, format!("{REPORT_HEADER}\nx,oops,30,0.9\n")).unwrap();
        assert!(parse_report_csv(&bad_row).is_err());
    }

    #[test]
    fn curve_checks_separate_errors_from_warnings() {
        let clean = EvalCurve {
            label: "ok".into(),
            points: (0..4)
                .map(|i| RdPoint {
                    bpp: 0.1 * (i + 1) as f64,
                    psnr_db: 30.0 + i as f64,
                    ms_ssim: 0.9 + 0.01 * i as f64,
                })
                .collect(),
        };
        assert!(check_curve(&clean).unwrap().is_empty());

        let mut sagging = clean.clone();
        sagging.points[2].psnr_db = 25.0;
        let warnings = check_curve(&sagging).unwrap();
        assert_eq!(warnings.len(), 1, "{warnings:?}");
        assert!(warnings[0].contains("psnr drops"));

        let mut short = clean.clone();
        short.points.truncate(3);
        assert!(check_curve(&short).unwrap().iter().any(|w| w.contains("BD-rate")));

        let mut flat = clean.clone();
        flat.points[1].bpp = flat.points[0].bpp;
        assert!(check_curve(&flat).is_err());
        let mut negative = clean.clone();
        negative.points[0].bpp = -0.1;
        assert!(check_curve(&negative).is_err());
        let mut nan = clean;
        nan.points[3].ms_ssim = f64::NAN;
        assert!(check_curve(&nan).is_err());
    }

    #[test]
    fn independent_noise_scores_below_half() {
        // Empirical anchor: two unrelated full-scale noise frames share no
        // structure, so MS-SSIM should land well under 0.5.
        let a = lcg_frame(11, 3, 176, 176);
        let b = lcg_frame(12, 3, 176, 176);
        let m = msssim_detailed(&a, &b);
        assert_eq!(m.scales, 5);
        assert!(m.value < 0.5, "noise pair scored {}", m.value);
        assert!(m.value > 0.0);
    }
}

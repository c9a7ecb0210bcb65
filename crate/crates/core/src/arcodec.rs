//! Artifact-reduction codec: the conditional coder that turns an
//! interpolated prediction into a faithful reconstruction.
//!
//! The encoder never transmits motion. It sees the target frame `x` and the
//! interpolation `xbar`, weights their concatenation by a confidence map
//! derived from their absolute difference, and analyzes that into a latent
//! at 1/16 resolution. A hyperprior latent at 1/64 plus the previous decoded
//! latent of the same group supply the Gaussian entropy parameters. The
//! decoder fuses the quantized latent with `xbar` through an upsampling
//! chain, a three-row grid of residual exchanges, and channel attention,
//! then adds the result onto `xbar` as a correction.
//!
//! Inference entry points quantize with round-to-integer and produce real
//! payloads through the range coder; the training path swaps rounding for
//! additive uniform noise and scores rate with the matching differentiable
//! estimate. Both paths share every operator, so a trained model's
//! reconstruction is the same tensor the decoder will compute from bytes.

use rand::RngCore;

use crate::entropy::{decode_gaussian, encode_gaussian, gaussian_cdf, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::nn::{conv, conv_act, init_conv, init_layer_norm, layer_norm, Ctx, InferCtx, ParamStore};
use crate::ops::SIGMA_MIN;
use crate::scalar::{det, Scalar};
use crate::tensor::Tensor;

/// Channel widths for the codec. Defaults are sized for CPU training.
#[derive(Clone, Copy, Debug)]
pub struct CodecCfg {
    /// Hidden width of the analysis transform.
    pub enc: usize,
    /// Latent channels at 1/16 resolution.
    pub latent: usize,
    /// Hyper-latent channels at 1/64 resolution.
    pub hyper: usize,
    /// Hidden width of the synthesis transform.
    pub dec: usize,
    /// Channel-attention layers at the tail of the synthesis transform.
    pub att_layers: usize,
}

impl Default for CodecCfg {
    fn default() -> Self {
        CodecCfg { enc: 16, latent: 16, hyper: 8, dec: 16, att_layers: 4 }
    }
}

/// Insert freshly initialized codec weights.
///
/// Output layers start at zero: the synthesis correction, the attention
/// residual branches, and the entropy-parameter fusion. A fresh codec is
/// therefore the identity onto `xbar` with a unit-scale zero-mean prior,
/// and training only ever moves away from that baseline.
pub fn init_params<S: Scalar>(cfg: &CodecCfg, ps: &mut ParamStore<S>, rng: &mut impl RngCore) {
    let c = cfg.latent;
    let f = cfg.enc;
    let cz = cfg.hyper;
    let g = cfg.dec;
    init_conv(ps, "enc.c1", f, 6, 3, rng);
    init_conv(ps, "enc.c2", f, f, 3, rng);
    init_conv(ps, "enc.c3", f, f, 3, rng);
    init_conv(ps, "enc.c4", c, f, 3, rng);

    init_conv(ps, "henc.c1", c, c, 3, rng);
    init_conv(ps, "henc.c2", cz, c, 3, rng);
    init_conv(ps, "hdec.c0", c, cz, 3, rng);
    init_conv(ps, "hdec.c1", c, c, 3, rng);
    init_conv(ps, "hdec.c2", 2 * c, c, 3, rng);
    init_conv(ps, "prior.tp", 2 * c, c, 3, rng);
    init_conv(ps, "prior.fuse", 2 * c, 4 * c, 1, rng);
    *ps.get_mut("prior.fuse.w") = Tensor::zeros([2 * c, 4 * c, 1, 1]);
    ps.insert("prior.z.mu", Tensor::zeros([1, cz, 1, 1]));
    ps.insert("prior.z.s", Tensor::zeros([1, cz, 1, 1]));

    init_conv(ps, "dec.fuse", c, 2 * c, 1, rng);
    init_conv(ps, "dec.up8", g, c, 3, rng);
    init_conv(ps, "dec.up4", g, g, 3, rng);
    init_conv(ps, "dec.up2", g, g, 3, rng);
    init_conv(ps, "dec.xb2", g, 3, 3, rng);
    init_conv(ps, "dec.r2in", g, 2 * g, 1, rng);
    init_conv(ps, "dec.r4in", g, g + c, 1, rng);
    for j in 0..2 {
        init_conv(ps, &format!("dec.g{j}.d4"), g, 2 * g, 3, rng);
        init_conv(ps, &format!("dec.g{j}.d8"), g, 2 * g, 3, rng);
    }
    for j in 2..4 {
        init_conv(ps, &format!("dec.g{j}.u4"), g, 2 * g, 3, rng);
        init_conv(ps, &format!("dec.g{j}.u2"), g, 2 * g, 3, rng);
    }
    init_conv(ps, "dec.fr", g, g, 3, rng);
    init_conv(ps, "dec.ref1", g, g + 3, 3, rng);
    init_conv(ps, "dec.ref2", g, g, 3, rng);
    for i in 0..cfg.att_layers {
        let p = format!("dec.att{i}");
        init_layer_norm(ps, &format!("{p}.ln1"), g);
        init_conv(ps, &format!("{p}.qkv"), 3 * g, g, 1, rng);
        ps.insert(&format!("{p}.tau"), Tensor::full([1, 1, 1, 1], S::ONE));
        init_conv(ps, &format!("{p}.proj"), g, g, 1, rng);
        *ps.get_mut(&format!("{p}.proj.w")) = Tensor::zeros([g, g, 1, 1]);
        init_layer_norm(ps, &format!("{p}.ln2"), g);
        init_conv(ps, &format!("{p}.ff1"), 2 * g, g, 1, rng);
        init_conv(ps, &format!("{p}.ff2"), g, 2 * g, 1, rng);
        *ps.get_mut(&format!("{p}.ff2.w")) = Tensor::zeros([g, 2 * g, 1, 1]);
    }
    init_conv(ps, "dec.out", 3, g, 3, rng);
    *ps.get_mut("dec.out.w") = Tensor::zeros([3, g, 3, 3]);
}

/// Number of attention layers a parameter store was built with.
pub fn att_layer_count<S: Scalar>(ps: &ParamStore<S>) -> usize {
    let mut i = 0;
    while ps.contains(&format!("dec.att{i}.qkv.w")) {
        i += 1;
    }
    i
}

/// Latent channels a parameter store was built with.
pub fn latent_channels<S: Scalar>(ps: &ParamStore<S>) -> usize {
    ps.get("enc.c4.w").shape()[0]
}

/// Hyper-latent channels a parameter store was built with.
pub fn hyper_channels<S: Scalar>(ps: &ParamStore<S>) -> usize {
    ps.get("henc.c2.w").shape()[0]
}

// ---------------------------------------------------------------------------
// Network pieces (shared by training and inference)

/// Confidence weighting of the encoder input: `sigmoid` of the channel-mean
/// absolute difference between target and prediction. Equal inputs give 0.5
/// everywhere; the map rises monotonically where the prediction is wrong.
pub fn weight_map<S: Scalar, C: Ctx<S>>(ctx: &mut C, x: C::H, xbar: C::H) -> C::H {
    let d = ctx.sub(x, xbar);
    let a = ctx.abs(d);
    let m = ctx.mean_channels(a);
    ctx.sigmoid(m)
}

/// Target plus prediction, confidence weighted, analyzed to 1/16.
fn analysis<S: Scalar, C: Ctx<S>>(ctx: &mut C, x: C::H, xbar: C::H) -> C::H {
    let wmap = weight_map(ctx, x, xbar);
    let cat = ctx.concat_ch(x, xbar);
    let m = ctx.mul_bcast1(cat, wmap);
    let h = conv_act(ctx, "enc.c1", m, 2, 1);
    let h = conv_act(ctx, "enc.c2", h, 2, 1);
    let h = conv_act(ctx, "enc.c3", h, 2, 1);
    conv(ctx, "enc.c4", h, 2, 1)
}

/// Latent to hyper-latent at 1/64.
fn hyper_analysis<S: Scalar, C: Ctx<S>>(ctx: &mut C, y: C::H) -> C::H {
    let h = conv_act(ctx, "henc.c1", y, 2, 1);
    conv(ctx, "henc.c2", h, 2, 1)
}

/// Gaussian entropy parameters `(mu, s)` for the latent, conditioned on the
/// quantized hyper-latent and the previous decoded latent of the group.
fn entropy_params<S: Scalar, C: Ctx<S>>(ctx: &mut C, zq: C::H, prior: C::H) -> (C::H, C::H) {
    let h = conv_act(ctx, "hdec.c0", zq, 1, 1);
    let u = ctx.up2(h);
    let h = conv_act(ctx, "hdec.c1", u, 1, 1);
    let u = ctx.up2(h);
    let h = conv(ctx, "hdec.c2", u, 1, 1);
    let tp = conv_act(ctx, "prior.tp", prior, 1, 1);
    let cat = ctx.concat_ch(h, tp);
    let ms = conv(ctx, "prior.fuse", cat, 1, 0);
    let c = ctx.shape(ms)[1] / 2;
    (ctx.slice_ch(ms, 0, c), ctx.slice_ch(ms, c, 2 * c))
}

/// One transposed-attention block: attention over channels with l2-normed
/// queries and keys, then a pointwise feed-forward, both residual.
fn attention_layer<S: Scalar, C: Ctx<S>>(ctx: &mut C, i: usize, x: C::H) -> C::H {
    let [n, g, h, w] = ctx.shape(x);
    assert_eq!(n, 1, "channel attention runs one frame at a time");
    let p = format!("dec.att{i}");
    let nx = layer_norm(ctx, &format!("{p}.ln1"), x);
    let qkv = conv(ctx, &format!("{p}.qkv"), nx, 1, 0);
    let q = ctx.slice_ch(qkv, 0, g);
    let k = ctx.slice_ch(qkv, g, 2 * g);
    let v = ctx.slice_ch(qkv, 2 * g, 3 * g);
    let hw = h * w;
    let q = ctx.reshape(q, [1, 1, g, hw]);
    let k = ctx.reshape(k, [1, 1, g, hw]);
    let v = ctx.reshape(v, [1, 1, g, hw]);
    let q = ctx.l2norm_rows(q, 1e-6);
    let k = ctx.l2norm_rows(k, 1e-6);
    let scores = ctx.matmul_nt(q, k);
    let tau = ctx.bind(&format!("{p}.tau"));
    let scores = ctx.mul_scalar_t(scores, tau);
    let attn = ctx.softmax_rows(scores);
    let o = ctx.matmul_nn(attn, v);
    let o = ctx.reshape(o, [1, g, h, w]);
    let o = conv(ctx, &format!("{p}.proj"), o, 1, 0);
    let x = ctx.add(x, o);
    let nx = layer_norm(ctx, &format!("{p}.ln2"), x);
    let f = conv_act(ctx, &format!("{p}.ff1"), nx, 1, 0);
    let f = conv(ctx, &format!("{p}.ff2"), f, 1, 0);
    ctx.add(x, f)
}

/// Synthesis: latent and entropy mean meet `xbar` across three scales, a
/// residual grid exchanges information between the rows, and the result is
/// refined at full resolution and added onto `xbar`.
fn synthesis<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    yq: C::H,
    mu: C::H,
    xbar: C::H,
    att_layers: usize,
) -> C::H {
    let cat = ctx.concat_ch(yq, mu);
    let lat = conv_act(ctx, "dec.fuse", cat, 1, 0);
    let u = ctx.up2(lat);
    let m8 = conv_act(ctx, "dec.up8", u, 1, 1);
    let u = ctx.up2(m8);
    let m4 = conv_act(ctx, "dec.up4", u, 1, 1);
    let u = ctx.up2(m4);
    let m2 = conv_act(ctx, "dec.up2", u, 1, 1);

    let yu = ctx.up2(yq);
    let yup4 = ctx.up2(yu);
    let xp = ctx.avgpool2(xbar);
    let xb2 = conv_act(ctx, "dec.xb2", xp, 1, 1);

    let cat = ctx.concat_ch(m2, xb2);
    let mut r2 = conv_act(ctx, "dec.r2in", cat, 1, 0);
    let cat = ctx.concat_ch(m4, yup4);
    let mut r4 = conv_act(ctx, "dec.r4in", cat, 1, 0);
    let mut r8 = m8;

    for j in 0..2 {
        let d = ctx.avgpool2(r2);
        let cat = ctx.concat_ch(d, r4);
        let t = conv_act(ctx, &format!("dec.g{j}.d4"), cat, 1, 1);
        r4 = ctx.add(r4, t);
        let d = ctx.avgpool2(r4);
        let cat = ctx.concat_ch(d, r8);
        let t = conv_act(ctx, &format!("dec.g{j}.d8"), cat, 1, 1);
        r8 = ctx.add(r8, t);
    }
    for j in 2..4 {
        let u = ctx.up2(r8);
        let cat = ctx.concat_ch(u, r4);
        let t = conv_act(ctx, &format!("dec.g{j}.u4"), cat, 1, 1);
        r4 = ctx.add(r4, t);
        let u = ctx.up2(r4);
        let cat = ctx.concat_ch(u, r2);
        let t = conv_act(ctx, &format!("dec.g{j}.u2"), cat, 1, 1);
        r2 = ctx.add(r2, t);
    }

    let u = ctx.up2(r2);
    let f = conv_act(ctx, "dec.fr", u, 1, 1);
    let cat = ctx.concat_ch(f, xbar);
    let f = conv_act(ctx, "dec.ref1", cat, 1, 1);
    let mut f = conv_act(ctx, "dec.ref2", f, 1, 1);
    for i in 0..att_layers {
        f = attention_layer(ctx, i, f);
    }
    let delta = conv(ctx, "dec.out", f, 1, 1);
    ctx.add(xbar, delta)
}

// ---------------------------------------------------------------------------
// Training path

/// Handles produced by one training-mode pass.
pub struct TrainOut<H> {
    /// Unclamped reconstruction.
    pub xhat: H,
    /// Noisy latent; feed it as `prior` of the next cascaded step.
    pub y_noisy: H,
    /// Total latent bits (differentiable estimate), scalar.
    pub rate_y: H,
    /// Total hyper-latent bits (differentiable estimate), scalar.
    pub rate_z: H,
}

/// Shape of the latent for a frame of `h` by `w` pixels.
pub fn latent_shape(c: usize, h: usize, w: usize) -> [usize; 4] {
    [1, c, h / 16, w / 16]
}

/// Shape of the hyper-latent for a frame of `h` by `w` pixels.
pub fn hyper_shape(cz: usize, h: usize, w: usize) -> [usize; 4] {
    [1, cz, h / 64, w / 64]
}

/// Build the full training-mode codec pass. `noise_y` and `noise_z` are the
/// quantization surrogates, uniform in [-0.5, 0.5], shaped by
/// [`latent_shape`] / [`hyper_shape`]. `prior` is the previous latent of the
/// group (zeros for the first frame).
pub fn forward_train<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    x: C::H,
    xbar: C::H,
    prior: C::H,
    noise_y: Tensor<S>,
    noise_z: Tensor<S>,
    att_layers: usize,
) -> TrainOut<C::H> {
    let y = analysis(ctx, x, xbar);
    assert_eq!(ctx.shape(y), noise_y.shape(), "latent noise shape");
    let ny = ctx.input(noise_y);
    let yq = ctx.add(y, ny);
    let z = hyper_analysis(ctx, y);
    assert_eq!(ctx.shape(z), noise_z.shape(), "hyper noise shape");
    let nz = ctx.input(noise_z);
    let zq = ctx.add(z, nz);

    let [n, cz, hz, wz] = ctx.shape(z);
    let zmu = ctx.bind("prior.z.mu");
    let zs = ctx.bind("prior.z.s");
    let zmu = ctx.broadcast_ch(zmu, n, hz, wz);
    let zs = ctx.broadcast_ch(zs, n, hz, wz);
    let rz = ctx.gaussian_rate(zq, zmu, zs);
    let mz = ctx.mean_all(rz);
    let rate_z = ctx.scalar_mul(mz, (n * cz * hz * wz) as f64);

    let (mu, s) = entropy_params(ctx, zq, prior);
    let ry = ctx.gaussian_rate(yq, mu, s);
    let [yn, yc, yh, yw] = ctx.shape(yq);
    let my = ctx.mean_all(ry);
    let rate_y = ctx.scalar_mul(my, (yn * yc * yh * yw) as f64);

    let xhat = synthesis(ctx, yq, mu, xbar, att_layers);
    TrainOut { xhat, y_noisy: yq, rate_y, rate_z }
}

// ---------------------------------------------------------------------------
// Inference path

/// Output of encoding one frame.
pub struct EncodedFrame<S: Scalar> {
    /// Range-coded hyper-latent.
    pub hyper: Vec<u8>,
    /// Range-coded latent.
    pub main: Vec<u8>,
    /// Quantized latent, for the next frame's temporal prior.
    pub y_hat: Tensor<S>,
    /// Reconstruction, bit-identical to what the decoder will produce.
    pub x_hat: Tensor<S>,
    /// Model-estimated bits for the coded latent, before range coding.
    pub est_main_bits: f64,
    /// Model-estimated bits for the coded hyper-latent.
    pub est_hyper_bits: f64,
}

/// Output of decoding one frame.
pub struct DecodedFrame<S: Scalar> {
    pub y_hat: Tensor<S>,
    pub x_hat: Tensor<S>,
}

fn check_frame_dims<S: Scalar>(t: &Tensor<S>) -> Result<()> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("codec wants [1,3,H,W], got {:?}", t.shape())));
    }
    if h % 64 != 0 || w % 64 != 0 {
        return Err(Error::Shape(format!("frame {h}x{w} not divisible by 64; pad first")));
    }
    Ok(())
}

fn round_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    for &v in t.data() {
        if !v.is_finite() {
            return Err(Error::InvalidArg("non-finite latent (diverged model?)".into()));
        }
    }
    // The `+ 0` normalizes -0.0 to +0.0, so the encoder-side latent is
    // byte-identical to the one the decoder rebuilds from integers.
    Ok(t.map(|v| v.round_ties_away() + S::ZERO))
}

fn clamp01<S: Scalar>(t: Tensor<S>) -> Tensor<S> {
    t.map(|v| v.clamp_s(S::ZERO, S::ONE))
}

/// Code a quantized hyper-latent under the learned per-channel prior.
/// Per-channel scalar prior expanded to the hyper-latent's shape.
fn broadcast_z<S: Scalar>(ps: &ParamStore<S>, name: &str, shape: [usize; 4]) -> Tensor<S> {
    let p = ps.get(name);
    let [_, cz, hz, wz] = shape;
    let mut out = Tensor::zeros(shape);
    for c in 0..cz {
        let v = p.data()[c];
        for y in 0..hz {
            for x in 0..wz {
                *out.at_mut(0, c, y, x) = v;
            }
        }
    }
    out
}

fn code_z<S: Scalar>(ps: &ParamStore<S>, z_hat: &Tensor<S>) -> Result<Vec<u8>> {
    let mu = ps.get("prior.z.mu");
    let s = ps.get("prior.z.s");
    let [n, cz, hz, wz] = z_hat.shape();
    debug_assert_eq!(n, 1);
    let mut enc = RangeEncoder::new();
    for c in 0..cz {
        let m = mu.data()[c].to_f64();
        let sg = SIGMA_MIN + det::exp(s.data()[c].to_f64());
        let cdf = gaussian_cdf(m, sg);
        for y in 0..hz {
            for x in 0..wz {
                encode_gaussian(&mut enc, &cdf, m, z_hat.at(0, c, y, x).to_f64() as i32)?;
            }
        }
    }
    Ok(enc.finish())
}

fn decode_z<S: Scalar>(ps: &ParamStore<S>, payload: &[u8], shape: [usize; 4]) -> Result<Tensor<S>> {
    let mu = ps.get("prior.z.mu");
    let s = ps.get("prior.z.s");
    let [n, cz, hz, wz] = shape;
    debug_assert_eq!(n, 1);
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Tensor::zeros(shape);
    for c in 0..cz {
        let m = mu.data()[c].to_f64();
        let sg = SIGMA_MIN + det::exp(s.data()[c].to_f64());
        let cdf = gaussian_cdf(m, sg);
        for y in 0..hz {
            for x in 0..wz {
                *out.at_mut(0, c, y, x) = S::from_f64(decode_gaussian(&mut dec, &cdf, m)? as f64);
            }
        }
    }
    Ok(out)
}

/// Code a quantized latent under per-element `(mu, s)`.
fn code_y<S: Scalar>(y_hat: &Tensor<S>, mu: &Tensor<S>, s: &Tensor<S>) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for i in 0..y_hat.numel() {
        let m = mu.data()[i].to_f64();
        let sg = SIGMA_MIN + det::exp(s.data()[i].to_f64());
        let cdf = gaussian_cdf(m, sg);
        encode_gaussian(&mut enc, &cdf, m, y_hat.data()[i].to_f64() as i32)?;
    }
    Ok(enc.finish())
}

fn decode_y<S: Scalar>(
    payload: &[u8],
    mu: &Tensor<S>,
    s: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Tensor::zeros(mu.shape());
    for i in 0..out.numel() {
        let m = mu.data()[i].to_f64();
        let sg = SIGMA_MIN + det::exp(s.data()[i].to_f64());
        let cdf = gaussian_cdf(m, sg);
        out.data_mut()[i] = S::from_f64(decode_gaussian(&mut dec, &cdf, m)? as f64);
    }
    Ok(out)
}

fn prior_or_zeros<S: Scalar>(prior: Option<&Tensor<S>>, shape: [usize; 4]) -> Result<Tensor<S>> {
    match prior {
        Some(p) => {
            if p.shape() != shape {
                return Err(Error::Shape(format!(
                    "prior latent {:?}, expected {:?}",
                    p.shape(),
                    shape
                )));
            }
            Ok(p.clone())
        }
        None => Ok(Tensor::zeros(shape)),
    }
}

/// Encode one frame against its interpolated prediction. The returned
/// reconstruction is exactly what [`decode_frame`] will produce from the
/// payloads, so the encoder can use it as a reference without decoding.
pub fn encode_frame<S: Scalar>(
    ps: &ParamStore<S>,
    x: &Tensor<S>,
    xbar: &Tensor<S>,
    prior: Option<&Tensor<S>>,
) -> Result<EncodedFrame<S>> {
    check_frame_dims(x)?;
    if x.shape() != xbar.shape() {
        return Err(Error::Shape("target and prediction differ in shape".into()));
    }
    let att = att_layer_count(ps);
    let [_, _, h, w] = x.shape();
    let c = latent_channels(ps);
    let prior_t = prior_or_zeros(prior, latent_shape(c, h, w))?;

    let mut ctx = InferCtx::new(ps);
    let hx = ctx.input(x.clone());
    let hb = ctx.input(xbar.clone());
    let y = analysis(&mut ctx, hx, hb);
    let z = hyper_analysis(&mut ctx, y);
    let z_hat = round_tensor(ctx.value(z))?;
    let hyper = code_z(ps, &z_hat)?;
    let est_hyper_bits = analytic_bits(
        &z_hat,
        &broadcast_z(ps, "prior.z.mu", z_hat.shape()),
        &broadcast_z(ps, "prior.z.s", z_hat.shape()),
    );

    let hz = ctx.input(z_hat);
    let hp = ctx.input(prior_t);
    let (mu, s) = entropy_params(&mut ctx, hz, hp);
    let y_hat = round_tensor(ctx.value(y))?;
    let main = code_y(&y_hat, ctx.value(mu), ctx.value(s))?;
    let est_main_bits = analytic_bits(&y_hat, ctx.value(mu), ctx.value(s));

    let hy = ctx.input(y_hat.clone());
    let xh = synthesis(&mut ctx, hy, mu, hb, att);
    let x_hat = clamp01(ctx.take(xh));
    Ok(EncodedFrame { hyper, main, y_hat, x_hat, est_main_bits, est_hyper_bits })
}

/// Decode one frame from its payloads and the same interpolated prediction
/// the encoder used.
pub fn decode_frame<S: Scalar>(
    ps: &ParamStore<S>,
    hyper: &[u8],
    main: &[u8],
    xbar: &Tensor<S>,
    prior: Option<&Tensor<S>>,
) -> Result<DecodedFrame<S>> {
    check_frame_dims(xbar)?;
    let att = att_layer_count(ps);
    let [_, _, h, w] = xbar.shape();
    let c = latent_channels(ps);
    let cz = hyper_channels(ps);
    let prior_t = prior_or_zeros(prior, latent_shape(c, h, w))?;

    let z_hat = decode_z(ps, hyper, hyper_shape(cz, h, w))?;
    let mut ctx = InferCtx::new(ps);
    let hz = ctx.input(z_hat);
    let hp = ctx.input(prior_t);
    let (mu, s) = entropy_params(&mut ctx, hz, hp);
    let y_hat = decode_y(main, ctx.value(mu), ctx.value(s))?;

    let hb = ctx.input(xbar.clone());
    let hy = ctx.input(y_hat.clone());
    let xh = synthesis(&mut ctx, hy, mu, hb, att);
    let x_hat = clamp01(ctx.take(xh));
    Ok(DecodedFrame { y_hat, x_hat })
}

/// Differentiable-estimate bits for an already-quantized latent pair, the
/// quantity the payload size is held against in tests.
pub fn analytic_bits<S: Scalar>(y_hat: &Tensor<S>, mu: &Tensor<S>, s: &Tensor<S>) -> f64 {
    let bits = crate::ops::gaussian_rate(y_hat, mu, s);
    bits.data().iter().map(|&b| b.to_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::{init_conv_weight, TrainCtx};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const CFG: CodecCfg = CodecCfg { enc: 6, latent: 4, hyper: 4, dec: 6, att_layers: 2 };

    fn frame(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut state = seed | 1;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        Tensor::from_vec([1, 3, h, w], (0..3 * h * w).map(|_| next() as f32).collect()).unwrap()
    }

    fn store(seed: u64) -> ParamStore<f32> {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        init_params(&CFG, &mut ps, &mut rng);
        ps
    }

    /// Store with the zero-initialized layers nudged off zero, so entropy
    /// parameters and synthesis are nontrivial.
    fn lively_store(seed: u64) -> ParamStore<f32> {
        let mut ps = store(seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xAB);
        for name in ["prior.fuse.w", "dec.out.w", "dec.att0.proj.w", "dec.att0.ff2.w", "dec.att1.proj.w", "dec.att1.ff2.w"] {
            let shape = ps.get(name).shape();
            let t: Tensor<f32> = init_conv_weight(shape, &mut rng);
            *ps.get_mut(name) = t.map(|v| v * 0.3);
        }
        ps
    }

    #[test]
    fn weight_map_anchors_and_monotonicity() {
        let ps = ParamStore::<f64>::new();
        let mut ctx = InferCtx::new(&ps);
        let x = ctx.input(Tensor::full([1, 3, 2, 2], 0.4));
        let same = ctx.input(Tensor::full([1, 3, 2, 2], 0.4));
        let w = weight_map(&mut ctx, x, same);
        for &v in ctx.value(w).data() {
            assert_eq!(v, 0.5);
        }
        // Mean absolute difference of exactly 1.
        let far = ctx.input(Tensor::full([1, 3, 2, 2], 1.4));
        let w = weight_map(&mut ctx, x, far);
        for &v in ctx.value(w).data() {
            assert!((v - 0.7310585786300049).abs() < 1e-12);
        }
        // Larger differences weigh strictly more.
        let mut prev = 0.5;
        for d in [0.1, 0.3, 0.8, 2.0] {
            let other = ctx.input(Tensor::full([1, 3, 2, 2], 0.4 + d));
            let w = weight_map(&mut ctx, x, other);
            let v = ctx.value(w).data()[0];
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn fresh_codec_reconstructs_prediction_exactly() {
        let ps = store(1);
        let x = frame(10, 64, 64);
        let xbar = frame(11, 64, 64);
        let enc = encode_frame(&ps, &x, &xbar, None).unwrap();
        // Zero-initialized correction head: reconstruction is xbar itself.
        assert_eq!(enc.x_hat.data(), xbar.data());
        let dec = decode_frame(&ps, &enc.hyper, &enc.main, &xbar, None).unwrap();
        assert_eq!(dec.x_hat.data(), xbar.data());
    }

    #[test]
    fn encode_decode_bit_identical() {
        let ps = lively_store(2);
        let x = frame(20, 64, 64);
        let xbar = {
            // Prediction correlated with the target, as in real use.
            let n = frame(21, 64, 64);
            x.zip_map(&n, |a, b| 0.9 * a + 0.1 * b).unwrap()
        };
        for prior in [None, Some(frame(22, 64, 64))] {
            let prior_t = prior.map(|p| {
                // An integer-valued latent-shaped tensor.
                let [_, _, h, w] = p.shape();
                Tensor::from_vec(
                    latent_shape(CFG.latent, h, w),
                    (0..CFG.latent * (h / 16) * (w / 16)).map(|i| ((i % 5) as f32) - 2.0).collect(),
                )
                .unwrap()
            });
            let enc = encode_frame(&ps, &x, &xbar, prior_t.as_ref()).unwrap();
            let dec = decode_frame(&ps, &enc.hyper, &enc.main, &xbar, prior_t.as_ref()).unwrap();
            // Bit equality, not ==: a -0.0 on one side would corrupt the
            // hash-chained prior buffer while comparing equal numerically.
            let enc_y: Vec<u32> = enc.y_hat.data().iter().map(|v| v.to_bits()).collect();
            let dec_y: Vec<u32> = dec.y_hat.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(enc_y, dec_y, "latents differ");
            let enc_bits: Vec<u32> = enc.x_hat.data().iter().map(|v| v.to_bits()).collect();
            let dec_bits: Vec<u32> = dec.x_hat.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(enc_bits, dec_bits, "reconstructions differ");
            assert!(!enc.main.is_empty() && !enc.hyper.is_empty());
        }
    }

    #[test]
    fn tampered_payloads_are_rejected() {
        let ps = lively_store(3);
        let x = frame(30, 64, 64);
        let xbar = frame(31, 64, 64);
        let enc = encode_frame(&ps, &x, &xbar, None).unwrap();
        let mut bad = enc.main.clone();
        bad[0] ^= 0x10;
        assert!(decode_frame(&ps, &enc.hyper, &bad, &xbar, None).is_err());
        let mut bad = enc.hyper.clone();
        let n = bad.len();
        bad.truncate(n - 2);
        assert!(decode_frame(&ps, &bad, &enc.main, &xbar, None).is_err());
    }

    #[test]
    fn payload_size_tracks_analytic_rate() {
        let ps = lively_store(4);
        let x = frame(40, 64, 64);
        let xbar = x.map(|v| (v * 0.92 + 0.03) as f32);
        let enc = encode_frame(&ps, &x, &xbar, None).unwrap();

        // Recompute the entropy parameters the coder used.
        let mut ctx = InferCtx::new(&ps);
        let hx = ctx.input(x.clone());
        let hb = ctx.input(xbar.clone());
        let y = analysis(&mut ctx, hx, hb);
        let z = hyper_analysis(&mut ctx, y);
        let z_hat = round_tensor(ctx.value(z)).unwrap();
        let hz = ctx.input(z_hat);
        let hp = ctx.input(Tensor::zeros(latent_shape(CFG.latent, 64, 64)));
        let (mu, s) = entropy_params(&mut ctx, hz, hp);
        // s leaves as log-scale; analytic_bits applies the same mapping the
        // coder does.
        let ideal = analytic_bits(&enc.y_hat, ctx.value(mu), ctx.value(s));
        let actual = (enc.main.len() * 8) as f64;
        assert!(
            actual <= ideal * 1.05 + 200.0,
            "coded {actual} bits vs analytic {ideal}"
        );
        assert!(actual + 1.0 >= ideal * 0.95, "coded {actual} below analytic {ideal}?");
    }

    #[test]
    fn training_graph_reaches_all_parameters() {
        let mut ps = store(5).cast::<f64>();
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        for name in ["prior.fuse.w", "dec.out.w", "dec.att0.proj.w", "dec.att0.ff2.w", "dec.att1.proj.w", "dec.att1.ff2.w"] {
            let shape = ps.get(name).shape();
            *ps.get_mut(name) = init_conv_weight(shape, &mut rng);
        }
        let mut graph = Graph::new();
        let mut ctx = TrainCtx::new(&mut graph, &ps);
        let x = ctx.input(frame(50, 64, 64).cast());
        let xbar = ctx.input(frame(51, 64, 64).cast());
        // Nonzero prior: a zero prior would starve prior.tp.w of gradient
        // (conv weight gradients scale with the input).
        let prior_t = Tensor::from_vec(
            latent_shape(CFG.latent, 64, 64),
            (0..CFG.latent * 4 * 4).map(|i| ((i % 7) as f64) - 3.0).collect(),
        )
        .unwrap();
        let prior = ctx.input(prior_t);
        let mut noise = ChaCha20Rng::seed_from_u64(56);
        let mut uni = |shape: [usize; 4]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(
                shape,
                (0..n).map(|_| (noise.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5).collect(),
            )
            .unwrap()
        };
        let out = forward_train(
            &mut ctx,
            x,
            xbar,
            prior,
            uni(latent_shape(CFG.latent, 64, 64)),
            uni(hyper_shape(CFG.hyper, 64, 64)),
            CFG.att_layers,
        );
        let d = ctx.graph.mse(out.xhat, x);
        let d = ctx.graph.scalar_mul(d, 100.0);
        let r = ctx.graph.add(out.rate_y, out.rate_z);
        let r = ctx.graph.scalar_mul(r, 1.0 / (3.0 * 64.0 * 64.0));
        let loss = ctx.graph.add(d, r);
        let bound: Vec<(String, _)> = ctx.bound_params().map(|(n, i)| (n.to_string(), i)).collect();
        ctx.graph.backward(loss);
        assert_eq!(bound.len(), ps.len(), "some parameters never bound");
        for (name, id) in &bound {
            let g = ctx.graph.grad(*id).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "all-zero grad for {name}"
            );
        }
    }

    #[test]
    fn prior_changes_entropy_parameters() {
        // The temporal prior must actually condition the rate: same frame,
        // different prior, different payload.
        let ps = lively_store(6);
        let x = frame(60, 64, 64);
        let xbar = frame(61, 64, 64);
        let p1 = Tensor::full(latent_shape(CFG.latent, 64, 64), 1.0f32);
        let a = encode_frame(&ps, &x, &xbar, None).unwrap();
        let b = encode_frame(&ps, &x, &xbar, Some(&p1)).unwrap();
        assert_eq!(a.y_hat.data(), b.y_hat.data(), "prior must not change the latent itself");
        assert_ne!(a.main, b.main, "prior had no effect on coding");
    }
}

//! Training: the rate-distortion objective, a procedural clip corpus, the
//! optimization loop with additive-noise quantization, and construction of
//! the per-lambda checkpoint ladder.
//!
//! Train-time references are the clean neighboring frames; coded references
//! enter the loop only at test time. Each sample is five consecutive frames
//! with the second and fourth as coding targets: both are interpolated from
//! their clean neighbors, pushed through the artifact codec with uniform
//! noise standing in for quantization, and scored by the average of
//! `rate_bpp + lambda * distortion` over the targets. The second target's
//! latent prior is the first target's noisy latent, mirroring the
//! decode-order conditioning of the sequence coder.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::arcodec::{self, CodecCfg};
use crate::autograd::{Graph, NodeId};
use crate::ckpt;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Adam, Ctx, ParamStore, TrainCtx};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vfi::{self, VfiCfg};
use crate::video_io;

// ---------------------------------------------------------------------------
// Lambda ladders

/// Rate-distortion tradeoffs trained for the squared-error objective, as
/// `(bitstream lambda id, lambda)`.
pub const MSE_LADDER: [(u8, f64); 4] = [(0, 256.0), (1, 512.0), (2, 1024.0), (3, 2048.0)];

/// Tradeoffs trained for the structural-similarity objective.
pub const MSSSIM_LADDER: [(u8, f64); 4] = [(8, 8.0), (9, 16.0), (10, 32.0), (11, 64.0)];

/// Which distortion term the objective uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Mse,
    MsSsim,
}

impl Distortion {
    pub fn name(self) -> &'static str {
        match self {
            Distortion::Mse => "mse",
            Distortion::MsSsim => "ms-ssim",
        }
    }

    pub fn ladder(self) -> &'static [(u8, f64); 4] {
        match self {
            Distortion::Mse => &MSE_LADDER,
            Distortion::MsSsim => &MSSSIM_LADDER,
        }
    }
}

impl std::str::FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Distortion::Mse),
            "ms-ssim" | "msssim" => Ok(Distortion::MsSsim),
            other => Err(Error::InvalidArg(format!("unknown distortion {other:?}"))),
        }
    }
}

/// Lambda and objective for a bitstream lambda id.
pub fn lambda_for_id(id: u8) -> Result<(f64, Distortion)> {
    for &(i, l) in &MSE_LADDER {
        if i == id {
            return Ok((l, Distortion::Mse));
        }
    }
    for &(i, l) in &MSSSIM_LADDER {
        if i == id {
            return Ok((l, Distortion::MsSsim));
        }
    }
    Err(Error::InvalidArg(format!("unknown lambda id {id}")))
}

/// Bitstream id for a ladder lambda; the inverse of [`lambda_for_id`].
pub fn id_for_lambda(lambda: f64, distortion: Distortion) -> Result<u8> {
    distortion
        .ladder()
        .iter()
        .find(|&&(_, l)| l == lambda)
        .map(|&(i, _)| i)
        .ok_or_else(|| {
            Error::InvalidArg(format!(
                "lambda {lambda} is not in the {} ladder",
                distortion.name()
            ))
        })
}

/// Quality step of the reference-frame stub paired with a lambda id, chosen
/// so reference fidelity rises with lambda.
pub fn intra_quality_for_id(id: u8) -> Result<u8> {
    match id {
        0..=3 => Ok(4 - id),
        8..=11 => Ok(12 - id),
        other => Err(Error::InvalidArg(format!("unknown lambda id {other}"))),
    }
}

// ---------------------------------------------------------------------------
// Configuration and samples

/// Hyperparameters of one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Rate-distortion tradeoff; must come from the ladder of `distortion`.
    pub lambda: f64,
    pub distortion: Distortion,
    pub epochs_main: usize,
    pub epochs_finetune: usize,
    pub lr_main: f64,
    pub lr_finetune: f64,
    pub batch: usize,
    pub betas: (f64, f64),
    /// Training frame side length; the codec needs multiples of 64.
    pub crop: usize,
    /// Coding targets per sample: 1 (second frame) or 2 (second and fourth).
    pub t: usize,
    /// Unfreeze the interpolator during the fine-tune epochs.
    pub joint_finetune_vfi: bool,
    /// Stop each run early after this many optimizer steps, for smoke runs.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 256.0,
            distortion: Distortion::Mse,
            epochs_main: 5,
            epochs_finetune: 1,
            lr_main: 1e-4,
            lr_finetune: 1e-5,
            batch: 4,
            betas: (0.9, 0.999),
            crop: 256,
            t: 2,
            joint_finetune_vfi: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        id_for_lambda(self.lambda, self.distortion)?;
        if self.batch == 0 {
            return Err(Error::InvalidArg("batch size must be at least 1".into()));
        }
        if !(self.t == 1 || self.t == 2) {
            return Err(Error::InvalidArg(format!("t must be 1 or 2, got {}", self.t)));
        }
        if self.crop == 0 || self.crop % 64 != 0 {
            return Err(Error::InvalidArg(format!(
                "crop {} is not a positive multiple of 64",
                self.crop
            )));
        }
        for (what, v) in [("lr_main", self.lr_main), ("lr_finetune", self.lr_finetune)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArg(format!("{what} {v} out of range")));
            }
        }
        for (what, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArg(format!("{what} {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Five consecutive frames; the second and fourth are the coding targets.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub frames: Vec<Tensor<f32>>,
}

impl TrainSample {
    pub fn new(frames: Vec<Tensor<f32>>) -> Result<Self> {
        if frames.len() != 5 {
            return Err(Error::InvalidArg(format!(
                "a training sample is 5 consecutive frames, got {}",
                frames.len()
            )));
        }
        let [n, c, h, w] = frames[0].shape();
        if n != 1 || c != 3 || h == 0 || h % 64 != 0 || w % 64 != 0 {
            return Err(Error::Shape(format!(
                "sample frames must be [1,3,h,w] with sides multiples of 64, \
                 got {:?}",
                frames[0].shape()
            )));
        }
        if frames.iter().any(|f| f.shape() != frames[0].shape()) {
            return Err(Error::Shape("sample frames differ in shape".into()));
        }
        Ok(TrainSample { frames })
    }
}

// ---------------------------------------------------------------------------
// Objective

/// Average rate-distortion cost over coding targets: each pair is
/// `(rate in bits per pixel, distortion)` and contributes `R + lambda * D`.
pub fn rd_loss(pairs: &[(f64, f64)], lambda: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("rd_loss needs at least one target".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArg(format!("lambda {lambda} out of range")));
    }
    let mut sum = 0.0;
    for &(r, d) in pairs {
        if !r.is_finite() || !d.is_finite() {
            return Err(Error::InvalidArg(format!("non-finite R-D pair ({r}, {d})")));
        }
        sum += r + lambda * d;
    }
    Ok(sum / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// Procedural corpus

fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn range(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

struct Sprite {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    theta: f64,
    omega: f64,
    half: f64,
    freq_u: f64,
    freq_v: f64,
    phase: f64,
    base: [f64; 3],
}

/// Deterministic clip of textured sprites translating and rotating over a
/// textured background, all channels in `[0, 1]`. Motion is evaluated in
/// closed form per frame, so any frame count yields consistent trajectories.
pub fn synth_clip(seed: u64, count: usize, h: usize, w: usize) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (bk1x, bk1y, bp1) = (range(&mut rng, 0.05, 0.2), range(&mut rng, 0.05, 0.2), unit(&mut rng) * 6.0);
    let (bk2x, bk2y, bp2) = (range(&mut rng, 0.02, 0.1), range(&mut rng, 0.02, 0.1), unit(&mut rng) * 6.0);
    let side = h.min(w) as f64;
    let sprites: Vec<Sprite> = (0..3)
        .map(|_| Sprite {
            cx: range(&mut rng, 0.2, 0.8) * w as f64,
            cy: range(&mut rng, 0.2, 0.8) * h as f64,
            vx: range(&mut rng, -2.5, 2.5),
            vy: range(&mut rng, -2.5, 2.5),
            theta: unit(&mut rng) * 6.0,
            omega: range(&mut rng, -0.12, 0.12),
            half: range(&mut rng, side / 8.0, side / 4.0),
            freq_u: range(&mut rng, 0.15, 0.5),
            freq_v: range(&mut rng, 0.15, 0.5),
            phase: unit(&mut rng) * 6.0,
            base: [
                range(&mut rng, 0.25, 0.75),
                range(&mut rng, 0.25, 0.75),
                range(&mut rng, 0.25, 0.75),
            ],
        })
        .collect();

    (0..count)
        .map(|t| {
            let t = t as f64;
            let mut f = Tensor::zeros([1, 3, h, w]);
            for y in 0..h {
                for x in 0..w {
                    let (xf, yf) = (x as f64, y as f64);
                    let b1 = (bk1x * xf + bk1y * yf + bp1).sin();
                    let b2 = (bk2x * xf - bk2y * yf + bp2).sin();
                    // Foremost sprite covering the pixel wins; None = background.
                    let mut hit: Option<(&Sprite, f64, f64)> = None;
                    for s in &sprites {
                        let (cx, cy) = (s.cx + s.vx * t, s.cy + s.vy * t);
                        let th = s.theta + s.omega * t;
                        let (dx, dy) = (xf - cx, yf - cy);
                        let u = th.cos() * dx + th.sin() * dy;
                        let v = -th.sin() * dx + th.cos() * dy;
                        if u.abs() <= s.half && v.abs() <= s.half {
                            hit = Some((s, u, v));
                        }
                    }
                    for c in 0..3 {
                        let val = match hit {
                            Some((s, u, v)) => {
                                s.base[c]
                                    + 0.18 * (s.freq_u * u + s.phase + c as f64).sin()
                                    + 0.12 * (s.freq_v * v - s.phase).cos()
                            }
                            None => 0.45 + 0.16 * b1 + 0.12 * b2 + 0.04 * c as f64,
                        };
                        *f.at_mut(0, c, y, x) = val.clamp(0.01, 0.99) as f32;
                    }
                }
            }
            f
        })
        .collect()
}

/// A corpus of `clips` five-frame samples at `crop` by `crop` pixels.
pub fn synth_corpus(seed: u64, clips: usize, crop: usize) -> Result<Vec<TrainSample>> {
    (0..clips)
        .map(|i| TrainSample::new(synth_clip(seed.wrapping_add(7919 * i as u64), 5, crop, crop)))
        .collect()
}

fn crop_at(t: &Tensor<f32>, oy: usize, ox: usize, h: usize, w: usize) -> Tensor<f32> {
    let [_, c, _, _] = t.shape();
    let mut out = Tensor::zeros([1, c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(0, ci, y, x) = t.at(0, ci, oy + y, ox + x);
            }
        }
    }
    out
}

/// Load user clips from `dir/<clip>/*.png`, slicing each into five-frame
/// windows cropped to `crop` by `crop` at seeded offsets. Clips shorter than
/// five frames or smaller than the crop are rejected by name.
pub fn samples_from_dir(dir: &Path, crop: usize, seed: u64) -> Result<Vec<TrainSample>> {
    if crop == 0 || crop % 64 != 0 {
        return Err(Error::InvalidArg(format!("crop {crop} is not a positive multiple of 64")));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::InvalidArg(format!("no clip directories under {}", dir.display())));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for sub in &subdirs {
        let frames = video_io::read_png_dir(sub)?;
        let [_, _, h, w] = frames
            .first()
            .map(|f| f.shape())
            .unwrap_or([0, 0, 0, 0]);
        if frames.len() < 5 || h < crop || w < crop {
            return Err(Error::InvalidArg(format!(
                "clip {} needs at least 5 frames of at least {crop}x{crop}",
                sub.display()
            )));
        }
        let mut start = 0;
        while start + 5 <= frames.len() {
            let oy = (rng.next_u64() % (h - crop + 1) as u64) as usize;
            let ox = (rng.next_u64() % (w - crop + 1) as u64) as usize;
            let window = frames[start..start + 5]
                .iter()
                .map(|f| crop_at(f, oy, ox, crop, crop))
                .collect();
            samples.push(TrainSample::new(window)?);
            start += 2;
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Optimization

/// Scalar diagnostics of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Mean estimated rate over the coding targets, bits per pixel.
    pub rate_bpp: f64,
    /// Mean distortion over the coding targets.
    pub distortion: f64,
}

/// Mutable state of a training run: parameters, optimizer, noise source.
pub struct TrainState {
    pub ps: ParamStore<f32>,
    pub opt: Adam,
    pub cfg: TrainConfig,
    pub step: u64,
    rng: ChaCha20Rng,
    finetune_phase: bool,
}

impl TrainState {
    /// `ps` must hold both interpolator (`vfi.`) and codec parameters.
    pub fn new(ps: ParamStore<f32>, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let has_vfi = ps.names().iter().any(|n| n.starts_with(vfi::PREFIX));
        let has_codec = ps.names().iter().any(|n| !n.starts_with(vfi::PREFIX));
        if !has_vfi || !has_codec {
            return Err(Error::InvalidArg(
                "parameter store must hold interpolator and codec weights".into(),
            ));
        }
        let mut opt = Adam::new(cfg.lr_main);
        opt.beta1 = cfg.betas.0;
        opt.beta2 = cfg.betas.1;
        Ok(TrainState { ps, opt, cfg, step: 0, rng: ChaCha20Rng::seed_from_u64(seed), finetune_phase: false })
    }

    /// Restart the noise stream, e.g. to replay a step exactly.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha20Rng::seed_from_u64(seed);
    }

    fn noise(&mut self, shape: [usize; 4]) -> Tensor<f32> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| (unit(&mut self.rng) - 0.5) as f32).collect();
        Tensor::from_vec(shape, data).expect("noise shape")
    }

    /// Forward, loss, and gradients for one sample. Returns
    /// `(loss, mean rate bpp, mean distortion, per-parameter gradients)`.
    fn sample_pass(&mut self, sample: &TrainSample) -> Result<(f64, f64, f64, Vec<(String, Tensor<f32>)>)> {
        let [_, _, h, w] = sample.frames[0].shape();
        let cy = arcodec::latent_channels(&self.ps);
        let cz = arcodec::hyper_channels(&self.ps);
        let att = arcodec::att_layer_count(&self.ps);
        // Draw all noise before borrowing the store for the graph.
        let targets: &[(usize, usize, usize)] =
            if self.cfg.t == 1 { &[(1, 0, 2)] } else { &[(1, 0, 2), (3, 2, 4)] };
        let noises: Vec<(Tensor<f32>, Tensor<f32>)> = targets
            .iter()
            .map(|_| {
                (self.noise(arcodec::latent_shape(cy, h, w)), self.noise(arcodec::hyper_shape(cz, h, w)))
            })
            .collect();

        let mut graph = Graph::new();
        let mut ctx = TrainCtx::new(&mut graph, &self.ps);
        if !(self.cfg.joint_finetune_vfi && self.finetune_phase) {
            ctx.freeze_prefix(vfi::PREFIX);
        }
        let xs: Vec<NodeId> = sample.frames.iter().map(|f| ctx.input(f.clone())).collect();
        let mut prior = ctx.input(Tensor::zeros(arcodec::latent_shape(cy, h, w)));
        let mut total: Option<NodeId> = None;
        let mut rate_sum = 0.0;
        let mut dist_sum = 0.0;
        for (&(ti, r0, r1), (ny, nz)) in targets.iter().zip(noises) {
            let v = vfi::forward(&mut ctx, xs[r0], xs[r1]);
            let out = arcodec::forward_train(&mut ctx, xs[ti], v.xbar, prior, ny, nz, att);
            let bits = ctx.add(out.rate_y, out.rate_z);
            let rate = ctx.scalar_mul(bits, 1.0 / (h * w) as f64);
            let dist = match self.cfg.distortion {
                Distortion::Mse => {
                    let d = ctx.sub(out.xhat, xs[ti]);
                    let sq = ctx.mul(d, d);
                    ctx.mean_all(sq)
                }
                Distortion::MsSsim => {
                    let m = metrics::msssim_graph(&mut ctx, out.xhat, xs[ti]);
                    let neg = ctx.scalar_mul(m, -1.0);
                    ctx.scalar_add(neg, 1.0)
                }
            };
            rate_sum += ctx.value(rate).data()[0].to_f64();
            dist_sum += ctx.value(dist).data()[0].to_f64();
            let weighted = ctx.scalar_mul(dist, self.cfg.lambda);
            let cost = ctx.add(rate, weighted);
            total = Some(match total {
                None => cost,
                Some(t) => ctx.add(t, cost),
            });
            prior = out.y_noisy;
        }
        let loss = ctx.scalar_mul(total.expect("at least one target"), 1.0 / targets.len() as f64);
        let bound: Vec<(String, NodeId)> =
            ctx.bound_params().map(|(n, id)| (n.to_string(), id)).collect();
        ctx.graph.backward(loss);
        let loss_val = graph.value(loss).data()[0].to_f64();
        let grads: Vec<(String, Tensor<f32>)> = bound
            .into_iter()
            .filter_map(|(n, id)| graph.grad(id).map(|g| (n, g.clone())))
            .collect();
        Ok((loss_val, rate_sum / targets.len() as f64, dist_sum / targets.len() as f64, grads))
    }

    /// One optimizer update from a batch of samples; gradients are averaged
    /// across the batch. Aborts without updating on any non-finite gradient,
    /// naming the parameter it appeared in.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidArg("empty batch".into()));
        }
        let mut acc: HashMap<String, Tensor<f32>> = HashMap::new();
        let (mut loss, mut rate, mut dist) = (0.0, 0.0, 0.0);
        for sample in batch {
            let (l, r, d, grads) = self.sample_pass(sample)?;
            loss += l;
            rate += r;
            dist += d;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(t) => t.add_assign(&g)?,
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mut names: Vec<&String> = acc.keys().collect();
        names.sort();
        for name in &names {
            if acc[*name].data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "non-finite gradient in parameter {name} at step {}",
                    self.step
                )));
            }
        }
        let loss = loss * inv;
        if !loss.is_finite() {
            return Err(Error::Format(format!("non-finite loss at step {}", self.step)));
        }
        let mut scaled: HashMap<String, Tensor<f32>> = HashMap::new();
        for (name, g) in acc {
            scaled.insert(name, g.map(|v| v * inv as f32));
        }
        self.opt.step(&mut self.ps, &scaled);
        self.step += 1;
        Ok(StepMetrics { step: self.step, loss, rate_bpp: rate * inv, distortion: dist * inv })
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (self.rng.next_u64() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        idx
    }
}

/// Run the two-phase schedule (main epochs, then fine-tune epochs at the
/// lower rate) over `samples`, shuffling each epoch. Returns one metrics row
/// per optimizer step.
pub fn run_training(state: &mut TrainState, samples: &[TrainSample]) -> Result<Vec<StepMetrics>> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("no training samples".into()));
    }
    let mut rows = Vec::new();
    let phases = [
        (state.cfg.epochs_main, state.cfg.lr_main, false),
        (state.cfg.epochs_finetune, state.cfg.lr_finetune, true),
    ];
    'all: for (epochs, lr, finetune) in phases {
        state.opt.lr = lr;
        state.finetune_phase = finetune;
        for _ in 0..epochs {
            let order = state.shuffled(samples.len());
            for chunk in order.chunks(state.cfg.batch) {
                let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
                rows.push(state.train_step(&batch)?);
                if state.cfg.max_steps.is_some_and(|m| state.step >= m) {
                    break 'all;
                }
            }
        }
    }
    state.finetune_phase = false;
    Ok(rows)
}

/// Write step metrics as a `step,loss,rate_bpp,distortion` CSV.
pub fn write_training_log(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut out = String::from("step,loss,rate_bpp,distortion\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.rate_bpp, r.distortion));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pre-train the interpolator alone with the census-plus-pixel loss on both
/// target positions of each sample. Codec parameters are never bound, so
/// only `vfi.` weights move.
pub fn pretrain_vfi(
    ps: &mut ParamStore<f32>,
    samples: &[TrainSample],
    epochs: usize,
    lr: f64,
    seed: u64,
    max_steps: Option<u64>,
) -> Result<Vec<StepMetrics>> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("no training samples".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut opt = Adam::new(lr);
    let mut rows = Vec::new();
    let mut step = 0u64;
    for _ in 0..epochs {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        for &si in &idx {
            let sample = &samples[si];
            let mut graph = Graph::new();
            let mut ctx = TrainCtx::new(&mut graph, ps);
            let xs: Vec<NodeId> = sample.frames.iter().map(|f| ctx.input(f.clone())).collect();
            let mut total: Option<NodeId> = None;
            for (ti, r0, r1) in [(1usize, 0usize, 2usize), (3, 2, 4)] {
                let v = vfi::forward(&mut ctx, xs[r0], xs[r1]);
                let l = vfi::census_loss(&mut ctx, v.xbar, xs[ti]);
                total = Some(match total {
                    None => l,
                    Some(t) => ctx.add(t, l),
                });
            }
            let loss = ctx.scalar_mul(total.expect("two targets"), 0.5);
            let bound: Vec<(String, NodeId)> =
                ctx.bound_params().map(|(n, id)| (n.to_string(), id)).collect();
            ctx.graph.backward(loss);
            let loss_val = graph.value(loss).data()[0].to_f64();
            let mut grads = HashMap::new();
            for (name, id) in bound {
                if let Some(g) = graph.grad(id) {
                    if g.data().iter().any(|v| !v.is_finite()) {
                        return Err(Error::Format(format!(
                            "non-finite gradient in parameter {name} at step {step}"
                        )));
                    }
                    grads.insert(name, g.clone());
                }
            }
            opt.step(ps, &grads);
            step += 1;
            rows.push(StepMetrics { step, loss: loss_val, rate_bpp: 0.0, distortion: loss_val });
            if max_steps.is_some_and(|m| step >= m) {
                return Ok(rows);
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Checkpoint ladder

/// The codec half of a combined store: every name outside `vfi.`.
pub fn codec_params(ps: &ParamStore<f32>) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for (n, t) in ps.iter() {
        if !n.starts_with(vfi::PREFIX) {
            out.insert(n, t.clone());
        }
    }
    out
}

/// Combine an interpolator store (unprefixed, as saved in `vfi.ckpt`) with
/// a codec store into the layout the pipeline expects.
pub fn merge_params(vfi_ps: &ParamStore<f32>, codec_ps: &ParamStore<f32>) -> ParamStore<f32> {
    let mut ps = ParamStore::new();
    ps.adopt("vfi", vfi_ps);
    for (n, t) in codec_ps.iter() {
        ps.insert(n, t.clone());
    }
    ps
}

/// One trained rate point of the ladder.
#[derive(Clone, Debug)]
pub struct LadderRung {
    pub lambda_id: u8,
    pub lambda: f64,
    pub path: PathBuf,
    pub hash: [u8; 32],
}

/// All artifacts of [`build_model_ladder`].
#[derive(Clone, Debug)]
pub struct Ladder {
    pub vfi_path: PathBuf,
    pub vfi_hash: [u8; 32],
    pub rungs: Vec<LadderRung>,
}

fn ladder_meta(d: Distortion) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for &(id, l) in d.ladder() {
        map.insert(id.to_string(), json!(l));
    }
    serde_json::Value::Object(map)
}

/// Pre-train the interpolator once, then train one codec per lambda of the
/// configured distortion's ladder, all from identical initializations so the
/// rungs differ only by objective weight. Writes `vfi.ckpt`,
/// `codec_<id>.ckpt`, and `train_<id>.csv` under `out_dir`.
pub fn build_model_ladder(
    out_dir: &Path,
    base: &TrainConfig,
    vfi_cfg: &VfiCfg,
    codec_cfg: &CodecCfg,
    samples: &[TrainSample],
    seed: u64,
) -> Result<Ladder> {
    if samples.is_empty() {
        return Err(Error::InvalidArg("no training samples".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut vfi_ps = ParamStore::new();
    vfi::init_params(vfi_cfg, &mut vfi_ps, &mut rng);
    pretrain_vfi(
        &mut vfi_ps,
        samples,
        base.epochs_main.max(1),
        base.lr_main,
        seed ^ 0x7666_6931,
        base.max_steps,
    )?;
    let vfi_path = out_dir.join("vfi.ckpt");
    let vfi_meta = json!({
        "kind": "vfi",
        "arch": { "feat": vfi_cfg.feat, "est": vfi_cfg.est },
    });
    let vfi_hash = ckpt::save(&vfi_path, &vfi_meta, &vfi_ps.extract("vfi"))?;

    let mut rungs = Vec::new();
    for &(id, lambda) in base.distortion.ladder() {
        let cfg = TrainConfig { lambda, ..base.clone() };
        let mut ps = ParamStore::new();
        // Same init seed on every rung: rungs differ only by lambda.
        let mut crng = ChaCha20Rng::seed_from_u64(seed ^ 0x636f_6465);
        arcodec::init_params(codec_cfg, &mut ps, &mut crng);
        for (n, t) in vfi_ps.iter() {
            ps.insert(n, t.clone());
        }
        let mut state = TrainState::new(ps, cfg, seed.wrapping_add(0x1000 + id as u64))?;
        let rows = run_training(&mut state, samples)?;
        write_training_log(&out_dir.join(format!("train_{id}.csv")), &rows)?;
        let meta = json!({
            "kind": "codec",
            "lambda_id": id,
            "lambda": lambda,
            "distortion": base.distortion.name(),
            "intra_quality": intra_quality_for_id(id)?,
            "ladder": ladder_meta(base.distortion),
            "arch": {
                "enc": codec_cfg.enc,
                "latent": codec_cfg.latent,
                "hyper": codec_cfg.hyper,
                "dec": codec_cfg.dec,
                "att_layers": codec_cfg.att_layers,
            },
        });
        let path = out_dir.join(format!("codec_{id}.ckpt"));
        let hash = ckpt::save(&path, &meta, &codec_params(&state.ps))?;
        rungs.push(LadderRung { lambda_id: id, lambda, path, hash });
    }
    Ok(Ladder { vfi_path, vfi_hash, rungs })
}

//! Built-in reference-frame codec: 8x8 block DCT, uniform quantization, and
//! range-coded coefficients.
//!
//! This is the pluggable stand-in for a learned intra/predictive coder. Intra
//! frames are coded directly; predicted frames code the residual against a
//! single reference reconstruction and add it back. The encoder derives its
//! reconstruction from the quantized integers it just wrote, through the same
//! dequantize + inverse transform path the decoder runs, so both sides agree
//! bit for bit.
//!
//! Coefficient statistics are fixed rather than adaptive: the DC of each
//! block is delta-coded against the previous block's DC under a wide zero
//! mean Gaussian, and AC terms at diagonal `u + v` share a Gaussian whose
//! scale shrinks with frequency. Each block first announces the raster
//! position of its last nonzero AC under a geometric prior, so flat blocks
//! (coarse quality, near-perfect prediction residuals) cost a few bits
//! instead of 63 zero symbols. Quality `q` in `0..=5` sets the quantizer
//! step to `2^q / 256`.

use crate::entropy::{
    self, gaussian_cdf, Cdf16, RangeDecoder, RangeEncoder,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orthonormal 8-point DCT-II basis, rows indexed by frequency. Frozen
/// constants: row `u`, column `k` holds `c(u) * cos(pi * (2k + 1) * u / 16)`
/// with `c(0) = sqrt(1/8)` and `c(u>0) = sqrt(2/8)`.
const DCT8: [[f64; 8]; 8] = [
    [
        0.35355339059327373,
        0.35355339059327373,
        0.35355339059327373,
        0.35355339059327373,
        0.35355339059327373,
        0.35355339059327373,
        0.35355339059327373,
        0.35355339059327373,
    ],
    [
        0.4903926402016152,
        0.4157348061512726,
        0.27778511650980114,
        0.09754516100806417,
        -0.0975451610080641,
        -0.277785116509801,
        -0.4157348061512727,
        -0.4903926402016152,
    ],
    [
        0.46193976625564337,
        0.19134171618254492,
        -0.19134171618254486,
        -0.46193976625564337,
        -0.4619397662556434,
        -0.19134171618254517,
        0.191341716182545,
        0.46193976625564326,
    ],
    [
        0.4157348061512726,
        -0.0975451610080641,
        -0.4903926402016152,
        -0.2777851165098011,
        0.2777851165098009,
        0.4903926402016153,
        0.09754516100806396,
        -0.4157348061512721,
    ],
    [
        0.3535533905932738,
        -0.35355339059327373,
        -0.35355339059327384,
        0.3535533905932737,
        0.35355339059327384,
        -0.35355339059327334,
        -0.35355339059327356,
        0.3535533905932733,
    ],
    [
        0.27778511650980114,
        -0.4903926402016152,
        0.09754516100806415,
        0.41573480615127273,
        -0.41573480615127256,
        -0.09754516100806489,
        0.49039264020161516,
        -0.27778511650980076,
    ],
    [
        0.19134171618254492,
        -0.4619397662556434,
        0.46193976625564326,
        -0.19134171618254495,
        -0.19134171618254528,
        0.4619397662556437,
        -0.46193976625564354,
        0.19134171618254314,
    ],
    [
        0.09754516100806417,
        -0.2777851165098011,
        0.41573480615127273,
        -0.4903926402016153,
        0.4903926402016152,
        -0.415734806151272,
        0.2777851165098022,
        -0.09754516100806254,
    ],
];

/// Highest accepted quality index; step doubles per level.
pub const MAX_QUALITY: u8 = 5;
const DC_SIGMA: f64 = 32.0;
const BLOCK: usize = 8;

/// Abstract reference-frame coder. Intra calls pass no references; predictive
/// calls pass exactly one. The decode-side reconstruction must equal the
/// encoder's bit for bit.
pub trait ReferenceCodec {
    fn encode(&self, frame: &Tensor<f32>, refs: &[&Tensor<f32>]) -> Result<(Vec<u8>, Tensor<f32>)>;
    fn decode(&self, payload: &[u8], refs: &[&Tensor<f32>], h: usize, w: usize)
        -> Result<Tensor<f32>>;
}

/// The built-in block-transform coder.
#[derive(Clone, Copy, Debug)]
pub struct IntraStub {
    pub quality: u8,
}

impl ReferenceCodec for IntraStub {
    fn encode(&self, frame: &Tensor<f32>, refs: &[&Tensor<f32>]) -> Result<(Vec<u8>, Tensor<f32>)> {
        match refs {
            [] => encode_intra(frame, self.quality),
            [r] => {
                let residual = frame.zip_map(r, |a, b| a - b)?;
                let (payload, rec) = encode_intra(&residual, self.quality)?;
                Ok((payload, rec.zip_map(r, add_clamped)?))
            }
            _ => Err(Error::InvalidArg("at most one reference supported".into())),
        }
    }

    fn decode(
        &self,
        payload: &[u8],
        refs: &[&Tensor<f32>],
        h: usize,
        w: usize,
    ) -> Result<Tensor<f32>> {
        let base = decode_intra(payload, h, w)?;
        match refs {
            [] => Ok(base),
            [r] => base.zip_map(r, add_clamped),
            _ => Err(Error::InvalidArg("at most one reference supported".into())),
        }
    }
}

fn add_clamped(d: f32, r: f32) -> f32 {
    (d + r).clamp(0.0, 1.0)
}

fn check_dims(shape: [usize; 4]) -> Result<(usize, usize)> {
    match shape {
        [1, 3, h, w] if h % BLOCK == 0 && w % BLOCK == 0 => Ok((h, w)),
        s => Err(Error::InvalidArg(format!(
            "intra coder needs [1, 3, H, W] with H, W divisible by {BLOCK}, got {s:?}"
        ))),
    }
}

fn check_quality(quality: u8) -> Result<f64> {
    if quality > MAX_QUALITY {
        return Err(Error::InvalidArg(format!(
            "quality {quality} outside 0..={MAX_QUALITY}"
        )));
    }
    Ok((1u32 << quality) as f64 / 256.0)
}

/// AC coefficient scale at diagonal `u + v`, in quantizer steps.
fn ac_sigma(diag: usize) -> f64 {
    16.0 / (1.0 + diag as f64)
}

fn ac_cdfs() -> Vec<Cdf16> {
    (0..2 * BLOCK - 1).map(|d| gaussian_cdf(0.0, ac_sigma(d))).collect()
}

/// Prior over the last significant AC position per block: 0 means all AC
/// terms are zero, `k` means raster positions `1..=k` are coded. Geometric
/// decay keeps empty blocks nearly free.
fn last_sig_cdf() -> Cdf16 {
    let probs: Vec<f64> = (0..64).map(|k| 0.93f64.powi(k)).collect();
    entropy::build_cdf(&probs)
}

/// Forward 2D transform of one block: `DCT8 * X * DCT8^T`.
fn dct2(x: &[f64; 64]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for u in 0..BLOCK {
        for k in 0..BLOCK {
            let mut s = 0.0;
            for j in 0..BLOCK {
                s += DCT8[u][j] * x[j * BLOCK + k];
            }
            tmp[u * BLOCK + k] = s;
        }
    }
    let mut out = [0.0; 64];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for k in 0..BLOCK {
                s += tmp[u * BLOCK + k] * DCT8[v][k];
            }
            out[u * BLOCK + v] = s;
        }
    }
    out
}

/// Inverse 2D transform: `DCT8^T * C * DCT8`.
fn idct2(c: &[f64; 64]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for j in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for u in 0..BLOCK {
                s += DCT8[u][j] * c[u * BLOCK + v];
            }
            tmp[j * BLOCK + v] = s;
        }
    }
    let mut out = [0.0; 64];
    for j in 0..BLOCK {
        for k in 0..BLOCK {
            let mut s = 0.0;
            for v in 0..BLOCK {
                s += tmp[j * BLOCK + v] * DCT8[v][k];
            }
            out[j * BLOCK + k] = s;
        }
    }
    out
}

fn gather_block(plane: &[f32], w: usize, by: usize, bx: usize) -> [f64; 64] {
    let mut b = [0.0; 64];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            b[y * BLOCK + x] = plane[(by + y) * w + bx + x] as f64;
        }
    }
    b
}

fn scatter_block(plane: &mut [f32], w: usize, by: usize, bx: usize, b: &[f64; 64], clamp: bool) {
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            let mut v = b[y * BLOCK + x];
            if clamp {
                v = v.clamp(0.0, 1.0);
            }
            plane[(by + y) * w + bx + x] = v as f32;
        }
    }
}

/// Rebuild a frame from quantized coefficients; shared by both directions so
/// reconstructions agree exactly. `clamp` is off for residual frames.
fn reconstruct(
    coeffs: &[i32],
    h: usize,
    w: usize,
    step: f64,
    clamp: bool,
) -> Tensor<f32> {
    let mut out = Tensor::zeros([1, 3, h, w]);
    let plane = h * w;
    let bw = w / BLOCK;
    let data = out.data_mut();
    let mut idx = 0;
    for c in 0..3 {
        let pl = &mut data[c * plane..(c + 1) * plane];
        for by in 0..h / BLOCK {
            for bx in 0..bw {
                let mut deq = [0.0; 64];
                for (d, &q) in deq.iter_mut().zip(&coeffs[idx..idx + 64]) {
                    *d = q as f64 * step;
                }
                idx += 64;
                let px = idct2(&deq);
                scatter_block(pl, w, by * BLOCK, bx * BLOCK, &px, clamp);
            }
        }
    }
    out
}

fn encode_frame_mode(x: &Tensor<f32>, quality: u8, clamp: bool) -> Result<(Vec<u8>, Tensor<f32>)> {
    let (h, w) = check_dims(x.shape())?;
    let step = check_quality(quality)?;
    let dc_cdf = gaussian_cdf(0.0, DC_SIGMA);
    let sig_cdf = last_sig_cdf();
    let acs = ac_cdfs();
    let plane = h * w;
    let mut enc = RangeEncoder::new();
    let mut coeffs = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let pl = &x.data()[c * plane..(c + 1) * plane];
        let mut prev_dc = 0i32;
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                let block = gather_block(pl, w, by * BLOCK, bx * BLOCK);
                let freq = dct2(&block);
                let mut q = [0i32; 64];
                for (qi, &f) in q.iter_mut().zip(&freq) {
                    let v = (f / step).round();
                    if v.abs() > i32::MAX as f64 / 2.0 {
                        return Err(Error::InvalidArg("coefficient overflow".into()));
                    }
                    *qi = v as i32;
                }
                entropy::encode_gaussian(&mut enc, &dc_cdf, prev_dc as f64, q[0])?;
                prev_dc = q[0];
                let last = (1..64).rev().find(|&i| q[i] != 0).unwrap_or(0);
                enc.encode(&sig_cdf, last);
                for (i, &qi) in q.iter().enumerate().take(last + 1).skip(1) {
                    entropy::encode_gaussian(&mut enc, &acs[i / BLOCK + i % BLOCK], 0.0, qi)?;
                }
                coeffs.extend_from_slice(&q);
            }
        }
    }
    let mut payload = vec![quality];
    payload.extend(enc.finish());
    Ok((payload, reconstruct(&coeffs, h, w, step, clamp)))
}

fn decode_frame_mode(payload: &[u8], h: usize, w: usize, clamp: bool) -> Result<Tensor<f32>> {
    let (&quality, body) = payload
        .split_first()
        .ok_or_else(|| Error::Corrupt("empty intra payload".into()))?;
    let step = check_quality(quality).map_err(|_| Error::Corrupt("bad intra quality".into()))?;
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::InvalidArg("frame size not block aligned".into()));
    }
    let dc_cdf = gaussian_cdf(0.0, DC_SIGMA);
    let sig_cdf = last_sig_cdf();
    let acs = ac_cdfs();
    let mut dec = RangeDecoder::new(body)?;
    let mut coeffs = Vec::with_capacity(3 * h * w);
    for _c in 0..3 {
        let mut prev_dc = 0i32;
        for _by in 0..h / BLOCK {
            for _bx in 0..w / BLOCK {
                let mut q = [0i32; 64];
                q[0] = entropy::decode_gaussian(&mut dec, &dc_cdf, prev_dc as f64)?;
                prev_dc = q[0];
                let last = dec.decode(&sig_cdf)?;
                for i in 1..=last {
                    q[i] = entropy::decode_gaussian(&mut dec, &acs[i / BLOCK + i % BLOCK], 0.0)?;
                }
                coeffs.extend_from_slice(&q);
            }
        }
    }
    Ok(reconstruct(&coeffs, h, w, step, clamp))
}

/// Code a frame in `[0, 1]` directly. Returns the payload and the exact
/// reconstruction the decoder will produce.
pub fn encode_intra(x: &Tensor<f32>, quality: u8) -> Result<(Vec<u8>, Tensor<f32>)> {
    encode_frame_mode(x, quality, true)
}

/// Inverse of [`encode_intra`] given the frame geometry from the header.
pub fn decode_intra(payload: &[u8], h: usize, w: usize) -> Result<Tensor<f32>> {
    decode_frame_mode(payload, h, w, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn lcg_frame(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut state = seed | 1;
        let data = (0..3 * h * w)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) as f32
            })
            .collect();
        Tensor::from_vec([1, 3, h, w], data).unwrap()
    }

    /// Smooth frame: gradients plus a soft bump, closer to natural content
    /// than white noise.
    fn smooth_frame(h: usize, w: usize) -> Tensor<f32> {
        let mut t = Tensor::zeros([1, 3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let fy = y as f32 / h as f32;
                    let fx = x as f32 / w as f32;
                    *t.at_mut(0, c, y, x) = (0.3 + 0.25 * fy + 0.2 * fx
                        + 0.15 * (c as f32 * 0.3 + 6.0 * fx * fy).sin())
                    .clamp(0.0, 1.0);
                }
            }
        }
        t
    }

    #[test]
    fn basis_is_orthonormal() {
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..8).map(|k| DCT8[a][k] * DCT8[b][k]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "rows {a},{b}: {dot}");
            }
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_and_deterministic() {
        let x = lcg_frame(16, 24, 9);
        let (payload, rec) = encode_intra(&x, 2).unwrap();
        let (payload2, _) = encode_intra(&x, 2).unwrap();
        assert_eq!(payload, payload2, "encoding must be deterministic");
        let dec = decode_intra(&payload, 16, 24).unwrap();
        let same = rec
            .data()
            .iter()
            .zip(dec.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "decoder reconstruction differs from encoder's");
    }

    #[test]
    fn finest_step_is_near_lossless() {
        let x = smooth_frame(32, 32);
        let (_, rec) = encode_intra(&x, 0).unwrap();
        let db = psnr(&x, &rec);
        assert!(db > 50.0, "quality 0 should exceed 50 dB, got {db:.2}");
    }

    #[test]
    fn coarser_steps_cost_less_and_hurt_more() {
        let x = smooth_frame(32, 40);
        let mut last_len = usize::MAX;
        let mut last_psnr = f64::INFINITY;
        for q in 0..=MAX_QUALITY {
            let (payload, rec) = encode_intra(&x, q).unwrap();
            let db = psnr(&x, &rec);
            assert!(payload.len() < last_len, "q={q}: {} bytes", payload.len());
            assert!(db < last_psnr, "q={q}: {db:.2} dB");
            last_len = payload.len();
            last_psnr = db;
        }
    }

    #[test]
    fn predictive_mode_exploits_the_reference() {
        let reference = smooth_frame(16, 16);
        // The frame to code differs from the reference by a faint ramp.
        let mut frame = reference.clone();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    *frame.at_mut(0, c, y, x) =
                        (frame.at(0, c, y, x) + 0.01 * (x as f32 / 16.0)).clamp(0.0, 1.0);
                }
            }
        }
        let stub = IntraStub { quality: 1 };
        let (p_pay, p_rec) = stub.encode(&frame, &[&reference]).unwrap();
        let (i_pay, _) = stub.encode(&frame, &[]).unwrap();
        assert!(
            p_pay.len() * 3 < i_pay.len(),
            "residual coding should be far cheaper: {} vs {}",
            p_pay.len(),
            i_pay.len()
        );
        let dec = stub.decode(&p_pay, &[&reference], 16, 16).unwrap();
        let same = p_rec
            .data()
            .iter()
            .zip(dec.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
        assert!(psnr(&frame, &p_rec) > 40.0);
    }

    #[test]
    fn corruption_is_detected() {
        let x = lcg_frame(16, 16, 3);
        let (payload, _) = encode_intra(&x, 3).unwrap();
        assert!(decode_intra(&payload[..payload.len() - 4], 16, 16).is_err());
        let mut bad = payload.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(decode_intra(&bad, 16, 16).is_err());
        assert!(decode_intra(&payload, 16, 24).is_err(), "wrong geometry");
    }

    #[test]
    fn bad_parameters_rejected() {
        let x = lcg_frame(16, 16, 5);
        assert!(encode_intra(&x, MAX_QUALITY + 1).is_err());
        let bad_shape = Tensor::<f32>::zeros([1, 1, 16, 16]);
        assert!(encode_intra(&bad_shape, 0).is_err());
        let unaligned = Tensor::<f32>::zeros([1, 3, 12, 16]);
        assert!(encode_intra(&unaligned, 0).is_err());
    }
}

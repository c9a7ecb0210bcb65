//! Sequence coding: GoP planning, the reference-frame stub, the bitstream
//! format, and the drivers that tie interpolation and the artifact codec
//! together.
//!
//! Bitstream layout, all integers little-endian:
//!
//! * header: magic `IBVC`, u8 version, u16 width, u16 height, u16
//!   num_frames, u8 gop_size, u8 n, u8 lambda_id, 32-byte model hash
//!   (46 bytes total);
//! * then one chunk per frame in coding order: u16 display index, u8 coding
//!   type (0 = I, 1 = P, 2 = B), u32 payload length, payload bytes.
//!
//! Intra and forward-predicted payloads come straight from the reference
//! codec. Bidirectional payloads are `u32 hyper length | hyper | main`, the
//! two range-coded streams of the artifact codec. Width and height are the
//! original geometry; both sides pad to multiples of [`PAD`] for the
//! networks and crop on output.
//!
//! Rate accounting convention: reported bits are chunk bytes times eight
//! (framing plus payload); the fixed header is excluded from sequence bpp.

pub mod gop;
pub mod intra;

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::arcodec;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::vfi;
use crate::video_io;
use gop::{plan_gop, CodingType};
use intra::ReferenceCodec;

pub const MAGIC: [u8; 4] = *b"IBVC";
pub const VERSION: u8 = 1;
/// Coded frame geometry is padded up to multiples of this.
pub const PAD: usize = 64;
pub const HEADER_LEN: usize = 46;
/// Chunk framing: u16 display, u8 type, u32 payload length.
const CHUNK_OVERHEAD: usize = 7;

// ---------------------------------------------------------------------------
// Header

/// Fixed-size bitstream header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub width: u16,
    pub height: u16,
    pub num_frames: u16,
    pub gop_size: u8,
    pub n: u8,
    pub lambda_id: u8,
    pub model_hash: [u8; 32],
}

impl Header {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN);
        b.extend_from_slice(&MAGIC);
        b.push(VERSION);
        b.extend_from_slice(&self.width.to_le_bytes());
        b.extend_from_slice(&self.height.to_le_bytes());
        b.extend_from_slice(&self.num_frames.to_le_bytes());
        b.push(self.gop_size);
        b.push(self.n);
        b.push(self.lambda_id);
        b.extend_from_slice(&self.model_hash);
        debug_assert_eq!(b.len(), HEADER_LEN);
        b
    }

    /// Parse the leading header of a bitstream.
    pub fn parse(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!(
                "bitstream of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a bitstream".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!(
                "bitstream version {} not supported (expected {VERSION})",
                bytes[4]
            )));
        }
        let u16at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().unwrap());
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(&bytes[14..46]);
        Ok(Header {
            width: u16at(5),
            height: u16at(7),
            num_frames: u16at(9),
            gop_size: bytes[11],
            n: bytes[12],
            lambda_id: bytes[13],
            model_hash,
        })
    }
}

/// Binds a bitstream to the exact pair of checkpoints that produced it.
pub fn combined_model_hash(vfi_hash: &[u8; 32], codec_hash: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(vfi_hash);
    h.update(codec_hash);
    h.finalize().into()
}

// ---------------------------------------------------------------------------
// Temporal prior state

/// Most recent quantized latent per GoP, serving as the temporal prior for
/// the next bidirectional frame of that GoP. Every append extends a hash
/// chain, so encoder and decoder can prove their buffers evolved
/// identically.
#[derive(Default)]
pub struct PriorBuffer {
    last: HashMap<usize, Tensor<f32>>,
    digests: Vec<[u8; 32]>,
    chain: [u8; 32],
}

impl PriorBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prior latent for a frame in `gop`, if any frame there appended one.
    pub fn prior(&self, gop: usize) -> Option<&Tensor<f32>> {
        self.last.get(&gop)
    }

    pub fn append(&mut self, gop: usize, y_hat: Tensor<f32>) {
        let mut h = Sha256::new();
        h.update(self.chain);
        h.update((gop as u64).to_le_bytes());
        for &v in y_hat.data() {
            h.update(v.to_le_bytes());
        }
        self.chain = h.finalize().into();
        self.digests.push(self.chain);
        self.last.insert(gop, y_hat);
    }

    /// Chained digest after each append, in append order.
    pub fn digests(&self) -> &[[u8; 32]] {
        &self.digests
    }
}

// ---------------------------------------------------------------------------
// Stats

/// Cost and quality of one coded frame. `bits` covers the whole chunk.
#[derive(Clone, Copy, Debug)]
pub struct FrameStat {
    pub display: usize,
    pub ctype: CodingType,
    pub bits: usize,
    pub bpp: f64,
    pub psnr: f64,
}

/// Per-frame stats in display order plus sequence totals. `total_bits` sums
/// chunks only; the header is excluded by convention.
#[derive(Clone, Debug)]
pub struct SeqStats {
    pub frames: Vec<FrameStat>,
    pub total_bits: usize,
    pub bpp: f64,
}

/// Which bits and frames an R-D point summarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accounting {
    /// All chunk bits and all frames.
    Sequence,
    /// Bidirectional chunk bits over bidirectional frames only, isolating
    /// the interpolation-plus-codec path from the reference stub.
    BOnly,
}

/// Summarize a coded sequence as one R-D point. `frames` and `recons` are
/// display-order originals and reconstructions at the original geometry;
/// `stats` supplies frame types and bit counts. Quality is the mean of
/// per-frame dB and MS-SSIM values over the accounted frames.
pub fn rd_point(
    frames: &[Tensor<f32>],
    recons: &[Tensor<f32>],
    stats: &SeqStats,
    acct: Accounting,
) -> Result<metrics::RdPoint> {
    if frames.is_empty() || frames.len() != recons.len() || frames.len() != stats.frames.len() {
        return Err(Error::InvalidArg(format!(
            "rd_point needs matching nonempty frames/recons/stats, got {}/{}/{}",
            frames.len(),
            recons.len(),
            stats.frames.len()
        )));
    }
    let [_, _, h, w] = frames[0].shape();
    let keep = |s: &FrameStat| acct == Accounting::Sequence || s.ctype == CodingType::B;
    let mut bits = 0usize;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut count = 0usize;
    for (i, s) in stats.frames.iter().enumerate() {
        if !keep(s) {
            continue;
        }
        bits += s.bits;
        psnr_sum += metrics::psnr(&frames[i], &recons[i]);
        ssim_sum += metrics::msssim(&frames[i], &recons[i]);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArg(
            "b-only accounting on a sequence with no bidirectional frames".into(),
        ));
    }
    Ok(metrics::RdPoint {
        bpp: bits as f64 / (count * h * w) as f64,
        psnr_db: psnr_sum / count as f64,
        ms_ssim: ssim_sum / count as f64,
    })
}

#[derive(Debug)]
pub struct EncodeOut {
    pub bytes: Vec<u8>,
    pub stats: SeqStats,
    /// Reconstructions in display order, cropped to the input geometry;
    /// bit-identical to what the decoder will produce.
    pub recons: Vec<Tensor<f32>>,
    pub prior_digests: Vec<[u8; 32]>,
}

#[derive(Debug)]
pub struct DecodeOut {
    pub header: Header,
    /// Display order, cropped to `header` geometry.
    pub frames: Vec<Tensor<f32>>,
    pub prior_digests: Vec<[u8; 32]>,
}

/// Interpolation-only baseline output: bidirectional frames cost zero bits
/// and reconstruct as the raw interpolation.
#[derive(Debug)]
pub struct InterpOut {
    pub stats: SeqStats,
    pub recons: Vec<Tensor<f32>>,
}

/// Sequence-level coding parameters; `lambda_id` is carried opaquely in the
/// header so the decoder can verify it holds matching models.
#[derive(Clone, Copy, Debug)]
pub struct SeqConfig {
    pub gop_size: usize,
    pub n: usize,
    pub lambda_id: u8,
}

// ---------------------------------------------------------------------------
// Encode

fn type_byte(t: CodingType) -> u8 {
    match t {
        CodingType::I => 0,
        CodingType::P => 1,
        CodingType::B => 2,
    }
}

fn parse_type(b: u8) -> Result<CodingType> {
    match b {
        0 => Ok(CodingType::I),
        1 => Ok(CodingType::P),
        2 => Ok(CodingType::B),
        x => Err(Error::Corrupt(format!("unknown coding type {x}"))),
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn validate_input(frames: &[Tensor<f32>], cfg: &SeqConfig) -> Result<(usize, usize)> {
    if frames.is_empty() {
        return Err(Error::InvalidArg("no frames to code".into()));
    }
    if frames.len() > u16::MAX as usize {
        return Err(Error::InvalidArg(format!("{} frames exceed u16", frames.len())));
    }
    let [n0, c0, h0, w0] = frames[0].shape();
    if n0 != 1 || c0 != 3 || h0 == 0 || w0 == 0 {
        return Err(Error::Shape(format!("frames must be [1,3,H,W], got {:?}", frames[0].shape())));
    }
    if h0 > u16::MAX as usize || w0 > u16::MAX as usize {
        return Err(Error::InvalidArg(format!("{h0}x{w0} exceeds header geometry")));
    }
    if frames.iter().any(|f| f.shape() != frames[0].shape()) {
        return Err(Error::Shape("frames differ in shape".into()));
    }
    if cfg.gop_size > u8::MAX as usize || cfg.n > u8::MAX as usize {
        return Err(Error::InvalidArg("gop size and n must fit in a byte".into()));
    }
    Ok((h0, w0))
}

struct Driven {
    chunks: Vec<u8>,
    stats: SeqStats,
    recons: Vec<Tensor<f32>>,
    digests: Vec<[u8; 32]>,
}

/// Walk the plan in coding order. With `code_b` unset, bidirectional frames
/// reconstruct as the bare interpolation at zero bits (the baseline mode);
/// reference frames are coded either way.
fn drive(
    ps: &ParamStore<f32>,
    frames: &[Tensor<f32>],
    cfg: &SeqConfig,
    refc: &dyn ReferenceCodec,
    code_b: bool,
) -> Result<Driven> {
    let (h0, w0) = validate_input(frames, cfg)?;
    let plan = plan_gop(frames.len(), cfg.gop_size, cfg.n)?;
    let padded: Vec<Tensor<f32>> =
        frames.iter().map(|f| video_io::pad_to_multiple(f, PAD).0).collect();

    let mut recons: Vec<Option<Tensor<f32>>> = vec![None; frames.len()];
    let mut stats: Vec<Option<FrameStat>> = vec![None; frames.len()];
    let mut pb = PriorBuffer::new();
    let mut chunks = Vec::new();
    let mut total_bits = 0usize;

    for step in &plan.frames {
        let d = step.display;
        let reference = |i: Option<usize>| recons[i.unwrap()].as_ref().unwrap();
        let (payload, recon) = match step.ctype {
            CodingType::I => {
                let (p, r) = refc.encode(&padded[d], &[])?;
                (Some(p), r)
            }
            CodingType::P => {
                let (p, r) = refc.encode(&padded[d], &[reference(step.prev_ref)])?;
                (Some(p), r)
            }
            CodingType::B => {
                let xbar =
                    vfi::interpolate(ps, reference(step.prev_ref), reference(step.next_ref)).xbar;
                if code_b {
                    let ef = arcodec::encode_frame(ps, &padded[d], &xbar, pb.prior(step.gop))?;
                    let mut p = Vec::with_capacity(4 + ef.hyper.len() + ef.main.len());
                    p.extend_from_slice(&(ef.hyper.len() as u32).to_le_bytes());
                    p.extend_from_slice(&ef.hyper);
                    p.extend_from_slice(&ef.main);
                    pb.append(step.gop, ef.y_hat);
                    (Some(p), ef.x_hat)
                } else {
                    (None, xbar)
                }
            }
        };

        let bits = match &payload {
            Some(p) => {
                if p.len() > u32::MAX as usize {
                    return Err(Error::InvalidArg(format!("frame {d}: oversized payload")));
                }
                chunks.extend_from_slice(&(d as u16).to_le_bytes());
                chunks.push(type_byte(step.ctype));
                chunks.extend_from_slice(&(p.len() as u32).to_le_bytes());
                chunks.extend_from_slice(p);
                (CHUNK_OVERHEAD + p.len()) * 8
            }
            None => 0,
        };
        total_bits += bits;
        let cropped = video_io::crop(&recon, h0, w0);
        stats[d] = Some(FrameStat {
            display: d,
            ctype: step.ctype,
            bits,
            bpp: bits as f64 / (h0 * w0) as f64,
            psnr: metrics::psnr(&frames[d], &cropped),
        });
        recons[d] = Some(recon);
    }

    let recons: Vec<Tensor<f32>> =
        recons.into_iter().map(|r| video_io::crop(&r.unwrap(), h0, w0)).collect();
    let stats = SeqStats {
        frames: stats.into_iter().map(Option::unwrap).collect(),
        total_bits,
        bpp: total_bits as f64 / (frames.len() * h0 * w0) as f64,
    };
    Ok(Driven { chunks, stats, recons, digests: pb.digests().to_vec() })
}

/// Encode a sequence to a self-contained bitstream. The returned
/// reconstructions are exactly what [`decode_sequence`] will output.
pub fn encode_sequence(
    ps: &ParamStore<f32>,
    frames: &[Tensor<f32>],
    cfg: &SeqConfig,
    refc: &dyn ReferenceCodec,
    model_hash: [u8; 32],
) -> Result<EncodeOut> {
    let (h0, w0) = validate_input(frames, cfg)?;
    let driven = drive(ps, frames, cfg, refc, true)?;
    let header = Header {
        width: w0 as u16,
        height: h0 as u16,
        num_frames: frames.len() as u16,
        gop_size: cfg.gop_size as u8,
        n: cfg.n as u8,
        lambda_id: cfg.lambda_id,
        model_hash,
    };
    let mut bytes = header.to_bytes();
    bytes.extend_from_slice(&driven.chunks);
    Ok(EncodeOut {
        bytes,
        stats: driven.stats,
        recons: driven.recons,
        prior_digests: driven.digests,
    })
}

/// The zero-bit baseline: reference frames coded normally, bidirectional
/// frames output as the raw interpolation.
pub fn interp_only_sequence(
    ps: &ParamStore<f32>,
    frames: &[Tensor<f32>],
    cfg: &SeqConfig,
    refc: &dyn ReferenceCodec,
) -> Result<InterpOut> {
    let driven = drive(ps, frames, cfg, refc, false)?;
    Ok(InterpOut { stats: driven.stats, recons: driven.recons })
}

// ---------------------------------------------------------------------------
// Decode

/// Decode a bitstream produced by [`encode_sequence`]. `expect_hash` is the
/// combined hash of the loaded checkpoints; a mismatch is refused before any
/// frame is touched. Errors past the header name the failing frame.
pub fn decode_sequence(
    ps: &ParamStore<f32>,
    bytes: &[u8],
    refc: &dyn ReferenceCodec,
    expect_hash: [u8; 32],
) -> Result<DecodeOut> {
    let header = Header::parse(bytes)?;
    if header.model_hash != expect_hash {
        return Err(Error::Checkpoint(
            "bitstream was written with different model weights".into(),
        ));
    }
    let num = header.num_frames as usize;
    let (h0, w0) = (header.height as usize, header.width as usize);
    let plan = plan_gop(num, header.gop_size as usize, header.n as usize)?;
    let (ph, pw) = (round_up(h0, PAD), round_up(w0, PAD));

    let mut recons: Vec<Option<Tensor<f32>>> = vec![None; num];
    let mut pb = PriorBuffer::new();
    let mut pos = HEADER_LEN;
    for step in &plan.frames {
        let d = step.display;
        let fail = |m: String| Error::Corrupt(format!("frame {d}: {m}"));
        if bytes.len() < pos + CHUNK_OVERHEAD {
            return Err(fail("bitstream truncated at chunk header".into()));
        }
        let cd = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        let ct = parse_type(bytes[pos + 2]).map_err(|e| fail(e.to_string()))?;
        let plen = u32::from_le_bytes(bytes[pos + 3..pos + 7].try_into().unwrap()) as usize;
        pos += CHUNK_OVERHEAD;
        if cd != d || ct != step.ctype {
            return Err(fail(format!(
                "expected a {:?} chunk for frame {d}, found {ct:?} for frame {cd}",
                step.ctype
            )));
        }
        if bytes.len() < pos + plen {
            return Err(fail("bitstream truncated inside payload".into()));
        }
        let payload = &bytes[pos..pos + plen];
        pos += plen;

        let reference = |i: Option<usize>| recons[i.unwrap()].as_ref().unwrap();
        let recon = match step.ctype {
            CodingType::I => refc.decode(payload, &[], ph, pw),
            CodingType::P => refc.decode(payload, &[reference(step.prev_ref)], ph, pw),
            CodingType::B => {
                let xbar =
                    vfi::interpolate(ps, reference(step.prev_ref), reference(step.next_ref)).xbar;
                split_b_payload(payload).and_then(|(hyper, main)| {
                    let df = arcodec::decode_frame(ps, hyper, main, &xbar, pb.prior(step.gop))?;
                    pb.append(step.gop, df.y_hat);
                    Ok(df.x_hat)
                })
            }
        }
        .map_err(|e| fail(e.to_string()))?;
        recons[d] = Some(recon);
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last chunk",
            bytes.len() - pos
        )));
    }
    let frames = recons.into_iter().map(|r| video_io::crop(&r.unwrap(), h0, w0)).collect();
    Ok(DecodeOut { header, frames, prior_digests: pb.digests().to_vec() })
}

fn split_b_payload(payload: &[u8]) -> Result<(&[u8], &[u8])> {
    if payload.len() < 4 {
        return Err(Error::Corrupt("payload too short for split".into()));
    }
    let hlen = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
    if payload.len() - 4 < hlen {
        return Err(Error::Corrupt("hyper stream overruns payload".into()));
    }
    Ok((&payload[4..4 + hlen], &payload[4 + hlen..]))
}

// ---------------------------------------------------------------------------

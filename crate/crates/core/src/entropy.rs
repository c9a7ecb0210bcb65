//! Entropy coding: a byte-oriented carry-less range coder over 16-bit CDFs,
//! the CDF quantizer, and the Gaussian symbol model used for latents.
//!
//! The coder is the classic Subbotin construction on 64-bit state: `low` and
//! `range` live mod 2^64; a byte is emitted when the top byte of `low` is
//! settled, and when `range` underflows below 2^32 it is clamped to
//! `-low mod 2^32`, which costs a fraction of a bit but never carries.
//! Symbol frequencies always come from a [`Cdf16`] whose total is exactly
//! 2^16 with every symbol given nonzero mass, so encode and decode stay in
//! lockstep by construction.
//!
//! Every payload ends with a 4-byte FNV-1a checksum of the coded bytes.
//! Range-coder flushes alone can decode a truncated stream without noticing;
//! the checksum turns silent corruption into a decode error.

use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 32;
/// Log2 of the CDF total.
pub const PREC: u32 = 16;
const TOTAL: u32 = 1 << PREC;

// ---------------------------------------------------------------------------
// Checksum

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

// ---------------------------------------------------------------------------
// CDF

/// Cumulative frequency table: `cum[0] = 0`, `cum[n] = 65536`, strictly
/// increasing (every symbol has mass).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cdf16 {
    cum: Vec<u32>,
}

impl Cdf16 {
    pub fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, sym: usize) -> u32 {
        self.cum[sym + 1] - self.cum[sym]
    }

    pub fn cum(&self, sym: usize) -> u32 {
        self.cum[sym]
    }

    /// Largest symbol whose cumulative start is <= target.
    fn lookup(&self, target: u32) -> usize {
        // cum is strictly increasing; binary search for the containing slot.
        let mut lo = 0usize;
        let mut hi = self.num_symbols();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Ideal code length of `sym` in bits.
    pub fn bits(&self, sym: usize) -> f64 {
        -(crate::scalar::det::log2(self.freq(sym) as f64 / TOTAL as f64))
    }
}

/// Quantize probabilities to a [`Cdf16`] by largest remainder. Every symbol
/// receives at least 1/65536; the total is exactly 65536. Deterministic:
/// ties break on the lower index.
pub fn build_cdf(probs: &[f64]) -> Cdf16 {
    let n = probs.len();
    assert!(n >= 1 && (n as u32) < TOTAL, "cdf with {n} symbols");
    let mut clean: Vec<f64> = probs.iter().map(|&p| if p.is_finite() && p > 0.0 { p } else { 0.0 }).collect();
    let sum: f64 = clean.iter().sum();
    if sum <= 0.0 {
        clean = vec![1.0; n];
    }
    let sum: f64 = clean.iter().sum();
    // Reserve one slot per symbol up front, distribute the rest.
    let spare = TOTAL - n as u32;
    let mut freqs: Vec<u32> = vec![1; n];
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut assigned: u32 = 0;
    for (i, &p) in clean.iter().enumerate() {
        let ideal = p / sum * spare as f64;
        let fl = ideal.floor();
        freqs[i] += fl as u32;
        assigned += fl as u32;
        remainders.push((ideal - fl, i));
    }
    let mut left = spare - assigned;
    // Stable order: remainder descending, then index ascending.
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut k = 0;
    while left > 0 {
        freqs[remainders[k].1] += 1;
        left -= 1;
        k = (k + 1) % n;
    }
    let mut cum = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cum.push(0);
    for f in freqs {
        acc += f;
        cum.push(acc);
    }
    debug_assert_eq!(acc, TOTAL);
    Cdf16 { cum }
}

// ---------------------------------------------------------------------------
// Encoder

pub struct RangeEncoder {
    low: u64,
    range: u64,
    bytes: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u64::MAX, bytes: Vec::new() }
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
                // Top byte is settled, ship it.
            } else if self.range < BOT {
                // Underflow: clamp the range so the top byte settles.
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.bytes.push((self.low >> 56) as u8);
            self.low = self.low.wrapping_shl(8);
            self.range = self.range.wrapping_shl(8);
        }
    }

    /// Encode one symbol under `cdf`.
    pub fn encode(&mut self, cdf: &Cdf16, sym: usize) {
        let freq = cdf.freq(sym) as u64;
        let cum = cdf.cum(sym) as u64;
        let r = self.range >> PREC;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        self.normalize();
    }

    /// Encode `nbits` raw bits, most significant first.
    pub fn encode_bits(&mut self, val: u32, nbits: u32) {
        assert!(nbits <= 32);
        for i in (0..nbits).rev() {
            let bit = (val >> i) & 1;
            let r = self.range >> 1;
            if bit == 1 {
                self.low = self.low.wrapping_add(r);
            }
            self.range = r;
            self.normalize();
        }
    }

    /// Flush and append the checksum; returns the payload.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..8 {
            self.bytes.push((self.low >> 56) as u8);
            self.low = self.low.wrapping_shl(8);
        }
        let ck = fnv1a(&self.bytes);
        self.bytes.extend_from_slice(&ck.to_le_bytes());
        self.bytes
    }
}

// ---------------------------------------------------------------------------
// Decoder

pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    /// Validates the checksum before any symbol is read.
    pub fn new(payload: &'a [u8]) -> Result<Self> {
        if payload.len() < 12 {
            return Err(Error::Corrupt(format!("payload of {} bytes", payload.len())));
        }
        let (body, ck) = payload.split_at(payload.len() - 4);
        let want = u32::from_le_bytes(ck.try_into().unwrap());
        if fnv1a(body) != want {
            return Err(Error::Corrupt("payload checksum mismatch".into()));
        }
        let mut code = 0u64;
        for &b in &body[..8] {
            code = (code << 8) | b as u64;
        }
        Ok(RangeDecoder { low: 0, range: u64::MAX, code, input: body, pos: 8 })
    }

    fn next_byte(&mut self) -> Result<u8> {
        // The encoder's 8 flush bytes guarantee a well-formed stream never
        // reads past the end; hitting it means truncation or desync.
        if self.pos >= self.input.len() {
            return Err(Error::Corrupt("range payload exhausted".into()));
        }
        let b = self.input[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u64;
            self.low = self.low.wrapping_shl(8);
            self.range = self.range.wrapping_shl(8);
        }
        Ok(())
    }

    /// Decode one symbol under `cdf`.
    pub fn decode(&mut self, cdf: &Cdf16) -> Result<usize> {
        let r = self.range >> PREC;
        let off = self.code.wrapping_sub(self.low) / r;
        let target = off.min((TOTAL - 1) as u64) as u32;
        let sym = cdf.lookup(target);
        let freq = cdf.freq(sym) as u64;
        let cum = cdf.cum(sym) as u64;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        self.normalize()?;
        Ok(sym)
    }

    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32> {
        assert!(nbits <= 32);
        let mut v = 0u32;
        for _ in 0..nbits {
            let r = self.range >> 1;
            let off = self.code.wrapping_sub(self.low);
            let bit = if off >= r { 1u32 } else { 0u32 };
            if bit == 1 {
                self.low = self.low.wrapping_add(r);
            }
            self.range = r;
            self.normalize()?;
            v = (v << 1) | bit;
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Gaussian symbol model

/// Symmetric symbol support for latent residuals: `[-SUPPORT, SUPPORT]`.
pub const SUPPORT: i32 = 64;
/// Fixed escape mass out of 65536.
const ESCAPE_FREQ: u32 = 512;
/// Largest escape excess representable in 16 raw bits.
const MAX_EXCESS: u32 = u16::MAX as u32;

/// Index of the escape symbol in a latent CDF.
const ESCAPE_SYM: usize = (2 * SUPPORT + 1) as usize;

/// Clamp for model scales when building tables; keeps tables sane even if a
/// diverged model emits huge `s`.
fn clamp_sigma(sigma: f64) -> f64 {
    sigma.clamp(crate::ops::SIGMA_MIN, 256.0)
}

/// CDF over residuals `r = value - round(mu)` for `N(mu, sigma^2)`, support
/// `[-64, 64]` plus a final escape symbol of fixed mass.
pub fn gaussian_cdf(mu: f64, sigma: f64) -> Cdf16 {
    let sigma = clamp_sigma(sigma);
    let center = mu.round();
    let n = ESCAPE_SYM;
    let mut probs = Vec::with_capacity(n + 1);
    for i in 0..n {
        let r = (i as i32 - SUPPORT) as f64;
        let v = center + r;
        let zp = (v + 0.5 - mu) / sigma;
        let zm = (v - 0.5 - mu) / sigma;
        probs.push(crate::scalar::det::norm_cdf(zp) - crate::scalar::det::norm_cdf(zm));
    }
    // Scale interior mass to leave exactly the escape share, then let the
    // quantizer do its largest-remainder pass over interior + escape.
    let esc_p = ESCAPE_FREQ as f64 / TOTAL as f64;
    let s: f64 = probs.iter().sum();
    if s > 0.0 {
        let k = (1.0 - esc_p) / s;
        for p in probs.iter_mut() {
            *p *= k;
        }
    }
    probs.push(esc_p);
    build_cdf(&probs)
}

/// Encode one quantized latent under `N(mu, sigma^2)`.
pub fn encode_gaussian(enc: &mut RangeEncoder, cdf: &Cdf16, mu: f64, value: i32) -> Result<()> {
    let center = mu.round() as i64;
    let r = value as i64 - center;
    if r.abs() <= SUPPORT as i64 {
        enc.encode(cdf, (r + SUPPORT as i64) as usize);
    } else {
        let excess = r.unsigned_abs() - SUPPORT as u64 - 1;
        if excess > MAX_EXCESS as u64 {
            return Err(Error::InvalidArg(format!(
                "latent residual {r} out of escape range (diverged model?)"
            )));
        }
        enc.encode(cdf, ESCAPE_SYM);
        enc.encode_bits(if r < 0 { 1 } else { 0 }, 1);
        enc.encode_bits(excess as u32, 16);
    }
    Ok(())
}

/// Decode one quantized latent under `N(mu, sigma^2)`.
pub fn decode_gaussian(dec: &mut RangeDecoder, cdf: &Cdf16, mu: f64) -> Result<i32> {
    let center = mu.round() as i64;
    let sym = dec.decode(cdf)?;
    let r = if sym == ESCAPE_SYM {
        let neg = dec.decode_bits(1)? == 1;
        let excess = dec.decode_bits(16)? as i64;
        let mag = SUPPORT as i64 + 1 + excess;
        if neg {
            -mag
        } else {
            mag
        }
    } else {
        sym as i64 - SUPPORT as i64
    };
    let v = center + r;
    i32::try_from(v).map_err(|_| Error::Corrupt("decoded latent out of i32".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cdf_totals_and_min_mass() {
        let cdf = build_cdf(&[0.5, 0.25, 0.25]);
        assert_eq!(cdf.cum(0), 0);
        assert_eq!(cdf.cum(2) + cdf.freq(2), TOTAL);
        for i in 0..3 {
            assert!(cdf.freq(i) >= 1);
        }
        // Degenerate distributions still produce valid tables.
        let cdf = build_cdf(&[0.0, 0.0, 1.0]);
        assert!(cdf.freq(0) >= 1 && cdf.freq(1) >= 1);
        assert!(cdf.freq(2) >= TOTAL - 4);
        let cdf = build_cdf(&[0.0, 0.0]);
        assert_eq!(cdf.freq(0), TOTAL / 2);
        let cdf = build_cdf(&[f64::NAN, 1.0]);
        assert!(cdf.freq(0) >= 1);
    }

    #[test]
    fn roundtrip_small_known_sequence() {
        let cdf = build_cdf(&[0.7, 0.2, 0.1]);
        let syms = [0usize, 0, 1, 2, 0, 1, 0, 0, 2, 2, 1, 0];
        let mut enc = RangeEncoder::new();
        for &s in &syms {
            enc.encode(&cdf, s);
        }
        let payload = enc.finish();
        let mut dec = RangeDecoder::new(&payload).unwrap();
        for &s in &syms {
            assert_eq!(dec.decode(&cdf).unwrap(), s);
        }
    }

    #[test]
    fn raw_bits_round_trip() {
        let mut enc = RangeEncoder::new();
        enc.encode_bits(0b1011, 4);
        enc.encode_bits(0xFFFF, 16);
        enc.encode_bits(0, 1);
        enc.encode_bits(123456, 20);
        let payload = enc.finish();
        let mut dec = RangeDecoder::new(&payload).unwrap();
        assert_eq!(dec.decode_bits(4).unwrap(), 0b1011);
        assert_eq!(dec.decode_bits(16).unwrap(), 0xFFFF);
        assert_eq!(dec.decode_bits(1).unwrap(), 0);
        assert_eq!(dec.decode_bits(20).unwrap(), 123456);
    }

    #[test]
    fn truncation_is_detected() {
        let cdf = build_cdf(&[0.5, 0.5]);
        let mut enc = RangeEncoder::new();
        for i in 0..100 {
            enc.encode(&cdf, i % 2);
        }
        let payload = enc.finish();
        // Drop the final byte: checksum must fail.
        assert!(RangeDecoder::new(&payload[..payload.len() - 1]).is_err());
        // Flip a byte in the middle: checksum must fail.
        let mut bad = payload.clone();
        bad[3] ^= 0x40;
        assert!(RangeDecoder::new(&bad).is_err());
    }

    #[test]
    fn coded_size_tracks_entropy() {
        // Skewed distribution, long sequence: actual bytes vs ideal bits.
        let probs = [0.85, 0.1, 0.04, 0.01];
        let cdf = build_cdf(&probs);
        let n = 20000usize;
        // Deterministic sampler over the exact quantized distribution.
        let mut enc = RangeEncoder::new();
        let mut ideal_bits = 0.0;
        let mut state = 0x12345678u64;
        for _ in 0..n {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let t = ((state >> 40) % TOTAL as u64) as u32;
            let s = cdf.lookup(t);
            ideal_bits += cdf.bits(s);
            enc.encode(&cdf, s);
        }
        let payload = enc.finish();
        let actual_bits = (payload.len() * 8) as f64;
        let overhead = actual_bits - ideal_bits;
        // 12 bytes of flush+checksum plus a sliver of coding loss.
        assert!(
            overhead <= 0.002 * ideal_bits + 128.0,
            "overhead {overhead:.1} bits over ideal {ideal_bits:.1}"
        );
    }

    #[test]
    fn gaussian_escape_round_trip() {
        let cdf = gaussian_cdf(3.2, 1.0);
        let mut enc = RangeEncoder::new();
        let values = [3, 0, -61, 67, 3, 900, -60000, 3];
        for &v in &values {
            encode_gaussian(&mut enc, &cdf, 3.2, v).unwrap();
        }
        let payload = enc.finish();
        let mut dec = RangeDecoder::new(&payload).unwrap();
        for &v in &values {
            assert_eq!(decode_gaussian(&mut dec, &cdf, 3.2).unwrap(), v);
        }
    }

    #[test]
    fn gaussian_excess_limit_errors() {
        let cdf = gaussian_cdf(0.0, 1.0);
        let mut enc = RangeEncoder::new();
        let v = SUPPORT + 1 + MAX_EXCESS as i32 + 1;
        assert!(encode_gaussian(&mut enc, &cdf, 0.0, v).is_err());
        let mut enc = RangeEncoder::new();
        assert!(encode_gaussian(&mut enc, &cdf, 0.0, v - 1).is_ok());
    }

    #[test]
    fn gaussian_cdf_is_deterministic_and_centered() {
        let a = gaussian_cdf(7.4, 0.5);
        let b = gaussian_cdf(7.4, 0.5);
        assert_eq!(a, b);
        // Mode at r = round(mu) - round(mu) = 0 -> symbol SUPPORT... mu=7.4
        // rounds to 7, residual of the most likely value 7 is 0.
        let mode = (0..a.num_symbols()).max_by_key(|&i| a.freq(i)).unwrap();
        assert_eq!(mode, SUPPORT as usize);
        assert_eq!(a.freq(ESCAPE_SYM), ESCAPE_FREQ);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_roundtrip_random_cdfs(
            weights in prop::collection::vec(1u32..1000, 2..40),
            syms in prop::collection::vec(0usize..1000, 1..400),
            extra_bits in prop::collection::vec((0u32..=0xFFFF, 1u32..=16), 0..20),
        ) {
            let probs: Vec<f64> = weights.iter().map(|&w| w as f64).collect();
            let cdf = build_cdf(&probs);
            let syms: Vec<usize> = syms.iter().map(|&s| s % cdf.num_symbols()).collect();
            let mut enc = RangeEncoder::new();
            for &s in &syms {
                enc.encode(&cdf, s);
            }
            for &(v, n) in &extra_bits {
                enc.encode_bits(v & ((1 << n) - 1), n);
            }
            let payload = enc.finish();
            let mut dec = RangeDecoder::new(&payload).unwrap();
            for &s in &syms {
                prop_assert_eq!(dec.decode(&cdf).unwrap(), s);
            }
            for &(v, n) in &extra_bits {
                prop_assert_eq!(dec.decode_bits(n).unwrap(), v & ((1 << n) - 1));
            }
        }

        #[test]
        fn prop_gaussian_values_roundtrip(
            mu in -30.0f64..30.0,
            sigma in 0.05f64..20.0,
            vals in prop::collection::vec(-200i32..200, 1..100),
        ) {
            let cdf = gaussian_cdf(mu, sigma);
            let mut enc = RangeEncoder::new();
            for &v in &vals {
                encode_gaussian(&mut enc, &cdf, mu, v).unwrap();
            }
            let payload = enc.finish();
            let mut dec = RangeDecoder::new(&payload).unwrap();
            for &v in &vals {
                prop_assert_eq!(decode_gaussian(&mut dec, &cdf, mu).unwrap(), v);
            }
        }
    }
}

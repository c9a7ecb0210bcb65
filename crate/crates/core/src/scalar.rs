//! Deterministic scalar math.
//!
//! The decoder must produce bit-identical frames on every machine, so nothing
//! in the inference path may call libm: `exp`/`ln`/`erf` implementations vary
//! between platforms by a ulp or two, which is enough to flip a rounded latent
//! or desynchronize an entropy-coder CDF table. This module provides fixed
//! implementations built only from IEEE-754 basic operations (+, -, *, /,
//! sqrt, floor, comparisons), which are correctly rounded everywhere.
//!
//! `f32` versions evaluate in `f64` and round once at the end; the result is
//! identical on every platform even if not always correctly rounded.
//!
//! [`Scalar`] abstracts `f32` (production) from `f64` (gradient checks) so the
//! whole tensor stack can be instantiated at either precision.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating point scalar with deterministic transcendentals.
pub trait Scalar:
    Copy
    + Clone
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;

    fn abs(self) -> Self;
    /// IEEE-correctly-rounded, safe to take from the intrinsic.
    fn sqrt(self) -> Self;
    fn floor(self) -> Self;
    /// Rounds half away from zero (the quantizer convention).
    fn round_ties_away(self) -> Self;
    fn min_s(self, other: Self) -> Self;
    fn max_s(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn erf(self) -> Self;
    fn erfc(self) -> Self;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
    fn clamp_s(self, lo: Self, hi: Self) -> Self {
        self.max_s(lo).min_s(hi)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_f32(self) -> f32 {
        self as f32
    }

    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn floor(self) -> Self {
        f64::floor(self)
    }
    fn round_ties_away(self) -> Self {
        f64::round(self)
    }
    fn min_s(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn max_s(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn exp(self) -> Self {
        det::exp(self)
    }
    fn ln(self) -> Self {
        det::ln(self)
    }
    fn erf(self) -> Self {
        det::erf(self)
    }
    fn erfc(self) -> Self {
        det::erfc(self)
    }
    fn sigmoid(self) -> Self {
        det::sigmoid(self)
    }
    fn tanh(self) -> Self {
        det::tanh(self)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_f32(self) -> f32 {
        self
    }

    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn floor(self) -> Self {
        f32::floor(self)
    }
    fn round_ties_away(self) -> Self {
        f32::round(self)
    }
    fn min_s(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn max_s(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn exp(self) -> Self {
        det::exp(self as f64) as f32
    }
    fn ln(self) -> Self {
        det::ln(self as f64) as f32
    }
    fn erf(self) -> Self {
        det::erf(self as f64) as f32
    }
    fn erfc(self) -> Self {
        det::erfc(self as f64) as f32
    }
    fn sigmoid(self) -> Self {
        det::sigmoid(self as f64) as f32
    }
    fn tanh(self) -> Self {
        det::tanh(self as f64) as f32
    }
}

/// The deterministic `f64` implementations. Free functions so non-generic
/// code (entropy tables, metrics) can call them directly.
pub mod det {
    const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_70e-10;
    const LOG2_E: f64 = 1.442_695_040_888_963_407_4;
    pub const INV_SQRT2: f64 = 0.707_106_781_186_547_6;

    /// `x * 2^n` with clamping, after musl's scalbn.
    fn ldexp(x: f64, mut n: i32) -> f64 {
        let p1023 = f64::from_bits(0x7FE0_0000_0000_0000); // 2^1023
        let pm969 = f64::from_bits(0x0360_0000_0000_0000); // 2^-969 = 2^-1022 * 2^53
        let mut y = x;
        if n > 1023 {
            y *= p1023;
            n -= 1023;
            if n > 1023 {
                y *= p1023;
                n -= 1023;
                if n > 1023 {
                    n = 1023;
                }
            }
        } else if n < -1022 {
            y *= pm969;
            n += 1022 - 53;
            if n < -1022 {
                y *= pm969;
                n += 1022 - 53;
                if n < -1022 {
                    n = -1022;
                }
            }
        }
        y * f64::from_bits(((0x3ff + n) as u64) << 52)
    }

    /// e^x. Range reduction by ln 2 in two parts, degree-13 Taylor on the
    /// reduced argument, scale back by 2^k. Max observed error vs a correctly
    /// rounded reference: 2.3e-16 relative.
    pub fn exp(x: f64) -> f64 {
        if x.is_nan() {
            return x;
        }
        if x > 709.782712893384 {
            return f64::INFINITY;
        }
        if x < -745.1332191019412 {
            return 0.0;
        }
        let k = (x * LOG2_E + 0.5).floor();
        let r = (x - k * LN2_HI) - k * LN2_LO;
        // 1/13!, then Horner down to 1/0!.
        let mut p = 1.0 / 6_227_020_800.0;
        const INV_FACT: [f64; 13] = [
            1.0 / 479_001_600.0,
            1.0 / 39_916_800.0,
            1.0 / 3_628_800.0,
            1.0 / 362_880.0,
            1.0 / 40_320.0,
            1.0 / 5_040.0,
            1.0 / 720.0,
            1.0 / 120.0,
            1.0 / 24.0,
            1.0 / 6.0,
            1.0 / 2.0,
            1.0,
            1.0,
        ];
        for inv in INV_FACT {
            p = p * r + inv;
        }
        ldexp(p, k as i32)
    }

    /// Natural log. Mantissa in [sqrt2/2, sqrt2], atanh series to s^21.
    /// Max observed error 4.5e-16 relative.
    pub fn ln(x: f64) -> f64 {
        if x.is_nan() || x < 0.0 {
            return f64::NAN;
        }
        if x == 0.0 {
            return f64::NEG_INFINITY;
        }
        if x == f64::INFINITY {
            return x;
        }
        let mut bits = x.to_bits();
        let mut e = ((bits >> 52) & 0x7ff) as i64;
        if e == 0 {
            // Subnormal: renormalize.
            bits = (x * 18_014_398_509_481_984.0).to_bits(); // * 2^54
            e = ((bits >> 52) & 0x7ff) as i64 - 54;
        }
        let mut m = f64::from_bits((bits & ((1u64 << 52) - 1)) | (1023u64 << 52));
        let mut k = e - 1023;
        if m > std::f64::consts::SQRT_2 {
            m *= 0.5;
            k += 1;
        }
        let s = (m - 1.0) / (m + 1.0);
        let z = s * s;
        let mut t = 1.0 / 21.0;
        const DIVS: [f64; 9] = [
            1.0 / 19.0,
            1.0 / 17.0,
            1.0 / 15.0,
            1.0 / 13.0,
            1.0 / 11.0,
            1.0 / 9.0,
            1.0 / 7.0,
            1.0 / 5.0,
            1.0 / 3.0,
        ];
        for d in DIVS {
            t = t * z + d;
        }
        t = t * z + 1.0;
        let kf = k as f64;
        2.0 * s * t + kf * LN2_HI + kf * LN2_LO
    }

    // Rational approximations for erf/erfc (Cody, "Rational Chebyshev
    // approximation for the error function", max rel error ~6e-16).
    const ERF_A: [f64; 5] = [
        3.161_123_743_870_565_60,
        1.138_641_541_510_501_56e2,
        3.774_852_376_853_020_21e2,
        3.209_377_589_138_469_47e3,
        1.857_777_061_846_031_53e-1,
    ];
    const ERF_B: [f64; 4] = [
        2.360_129_095_234_412_09e1,
        2.440_246_379_344_441_73e2,
        1.282_616_526_077_372_28e3,
        2.844_236_833_439_170_62e3,
    ];
    const ERF_C: [f64; 9] = [
        5.641_884_969_886_700_89e-1,
        8.883_149_794_388_375_94,
        6.611_919_063_714_162_95e1,
        2.986_351_381_974_001_31e2,
        8.819_522_212_417_690_90e2,
        1.712_047_612_634_070_58e3,
        2.051_078_377_826_071_47e3,
        1.230_339_354_797_997_25e3,
        2.153_115_354_744_038_46e-8,
    ];
    const ERF_D: [f64; 8] = [
        1.574_492_611_070_983_47e1,
        1.176_939_508_913_124_99e2,
        5.371_811_018_620_098_58e2,
        1.621_389_574_566_690_19e3,
        3.290_799_235_733_459_63e3,
        4.362_619_090_143_247_16e3,
        3.439_367_674_143_721_64e3,
        1.230_339_354_803_749_42e3,
    ];
    const ERF_P: [f64; 6] = [
        3.053_266_349_612_323_44e-1,
        3.603_448_999_498_044_39e-1,
        1.257_817_261_112_292_46e-1,
        1.608_378_514_874_227_66e-2,
        6.587_491_615_298_378_03e-4,
        1.631_538_713_730_209_78e-2,
    ];
    const ERF_Q: [f64; 5] = [
        2.568_520_192_289_822_42,
        1.872_952_849_923_460_47,
        5.279_051_029_514_284_12e-1,
        6.051_834_131_244_131_91e-2,
        2.335_204_976_268_691_85e-3,
    ];
    const INV_SQRT_PI: f64 = 5.641_895_835_477_562_87e-1;
    const ERF_THRESH: f64 = 0.46875;

    /// erfc(y) for y > ERF_THRESH, central and tail branches.
    fn erfc_pos(y: f64) -> f64 {
        let result = if y <= 4.0 {
            let mut xnum = ERF_C[8] * y;
            let mut xden = y;
            for i in 0..7 {
                xnum = (xnum + ERF_C[i]) * y;
                xden = (xden + ERF_D[i]) * y;
            }
            (xnum + ERF_C[7]) / (xden + ERF_D[7])
        } else {
            if y >= 26.543 {
                return 0.0;
            }
            let z = 1.0 / (y * y);
            let mut xnum = ERF_P[5] * z;
            let mut xden = z;
            for i in 0..4 {
                xnum = (xnum + ERF_P[i]) * z;
                xden = (xden + ERF_Q[i]) * z;
            }
            let r = z * (xnum + ERF_P[4]) / (xden + ERF_Q[4]);
            (INV_SQRT_PI - r) / y
        };
        // exp(-y^2) split to keep the representable part exact.
        let ysq = (y * 16.0).floor() / 16.0;
        let delt = (y - ysq) * (y + ysq);
        exp(-ysq * ysq) * exp(-delt) * result
    }

    pub fn erf(x: f64) -> f64 {
        if x.is_nan() {
            return x;
        }
        let y = x.abs();
        if y <= ERF_THRESH {
            let z = if y > 1e-300 { y * y } else { 0.0 };
            let mut xnum = ERF_A[4] * z;
            let mut xden = z;
            for i in 0..3 {
                xnum = (xnum + ERF_A[i]) * z;
                xden = (xden + ERF_B[i]) * z;
            }
            return x * (xnum + ERF_A[3]) / (xden + ERF_B[3]);
        }
        let e = erfc_pos(y);
        if x > 0.0 {
            1.0 - e
        } else {
            e - 1.0
        }
    }

    pub fn erfc(x: f64) -> f64 {
        if x.is_nan() {
            return x;
        }
        let y = x.abs();
        if y <= ERF_THRESH {
            return 1.0 - erf(x);
        }
        let e = erfc_pos(y);
        if x > 0.0 {
            e
        } else {
            2.0 - e
        }
    }

    /// Standard normal CDF. Lower tail comes through erfc, so small
    /// probabilities keep full relative accuracy.
    pub fn norm_cdf(z: f64) -> f64 {
        0.5 * erfc(-z * INV_SQRT2)
    }

    /// Logistic function, branch per sign to avoid overflow.
    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + exp(-x))
        } else {
            let e = exp(x);
            e / (1.0 + e)
        }
    }

    /// tanh via exp(-2|x|), no cancellation.
    pub fn tanh(x: f64) -> f64 {
        if x.is_nan() {
            return x;
        }
        let y = x.abs();
        if y > 20.0 {
            return if x > 0.0 { 1.0 } else { -1.0 };
        }
        let t = exp(-2.0 * y);
        let v = (1.0 - t) / (1.0 + t);
        if x >= 0.0 {
            v
        } else {
            -v
        }
    }

    /// log2 through ln. Accuracy is ample for rate estimates.
    pub fn log2(x: f64) -> f64 {
        ln(x) * LOG2_E
    }
}

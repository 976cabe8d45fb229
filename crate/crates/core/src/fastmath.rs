//! Branch-free `ln`/`exp` used by the Cucker-Smale weight inside the O(N^2)
//! loop. Libm calls do not vectorize; these do, and stay within a few ulp.

#![allow(clippy::excessive_precision)] // fdlibm's ln 2 split, digits kept as published

use std::f64::consts::{LN_2, LOG2_E, SQRT_2};

const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
const TWO_52: f64 = 4_503_599_627_370_496.0;
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// Natural log for positive normal `t`.
#[inline(always)]
pub fn ln(t: f64) -> f64 {
    let bits = t.to_bits();
    let mut mant = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    let mut expo = f64::from_bits((bits >> 52) | 0x4330_0000_0000_0000) - (TWO_52 + 1023.0);
    let fold = mant > SQRT_2;
    mant = if fold { mant * 0.5 } else { mant };
    expo = if fold { expo + 1.0 } else { expo };
    // ln m = 2 atanh(s), s = (m-1)/(m+1), |s| <= 0.1716; series to s^19,
    // evaluated in Estrin form to shorten the dependency chain
    let s = (mant - 1.0) / (mant + 1.0);
    let u = s * s;
    let u2 = u * u;
    let u4 = u2 * u2;
    let u8 = u4 * u4;
    let q01 = 1.0 + u * (1.0 / 3.0);
    let q23 = 1.0 / 5.0 + u * (1.0 / 7.0);
    let q45 = 1.0 / 9.0 + u * (1.0 / 11.0);
    let q67 = 1.0 / 13.0 + u * (1.0 / 15.0);
    let q89 = 1.0 / 17.0 + u * (1.0 / 19.0);
    let p = (q01 + q23 * u2) + (q45 + q67 * u2) * u4 + q89 * u8;
    expo * LN_2 + 2.0 * s * p
}

/// `e^y`, saturating outside the normal range.
#[inline(always)]
pub fn exp(y: f64) -> f64 {
    let y = y.clamp(-708.0, 709.0);
    let k = (y * LOG2_E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    // Taylor to degree 12 on |r| <= ln2/2, Estrin form
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = 1.0 + r;
    let q1 = 1.0 / 2.0 + r * (1.0 / 6.0);
    let q2 = 1.0 / 24.0 + r * (1.0 / 120.0);
    let q3 = 1.0 / 720.0 + r * (1.0 / 5_040.0);
    let q4 = 1.0 / 40_320.0 + r * (1.0 / 362_880.0);
    let q5 = 1.0 / 3_628_800.0 + r * (1.0 / 39_916_800.0);
    let hi = (q4 + q5 * r2) + r4 * (1.0 / 479_001_600.0);
    let p = (q0 + q1 * r2) + (q2 + q3 * r2) * r4 + hi * r8;
    let biased = ((k + 1023.0 + TWO_52).to_bits() & 0x7ff) << 52;
    p * f64::from_bits(biased)
}

/// `base^(-beta)` for positive normal `base`.
#[inline(always)]
pub fn pow_neg(base: f64, beta: f64) -> f64 {
    exp(-beta * ln(base))
}

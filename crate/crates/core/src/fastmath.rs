// Branch-free exp for the softmax hot loops. Written so LLVM can vectorize
// loops that call it; std's exp is an opaque libm call.

// exp(x) = 2^(k/8) * e^r with k = round(8x / ln 2), so |r| <= ln2/16.
pub(crate) const LOG2E_8: f64 = 8.0 * std::f64::consts::LOG2_E;
// ln2/8 split so that `n * LN2_8_HI` is exact for the clamped range.
pub(crate) const LN2_8_HI: f64 = 6.931_471_803_691_238e-1 / 8.0;
pub(crate) const LN2_8_LO: f64 = 1.908_214_929_270_587_7e-10 / 8.0;
// 1.5 * 2^52: adding it rounds to the nearest integer in the low mantissa bits.
pub(crate) const SHIFTER: f64 = 6_755_399_441_055_744.0;
pub(crate) const MIN_ARG: f64 = -700.0;
pub(crate) const EXP_FIELD: u64 = 0xFFF0_0000_0000_0000;

/// `2^(j/8)`, correctly rounded.
pub(crate) const EXP2_EIGHTHS: [f64; 8] = [
    1.0,
    1.090_507_732_665_257_7,
    1.189_207_115_002_721,
    1.296_839_554_651_009_6,
    std::f64::consts::SQRT_2,
    1.542_210_825_407_940_7,
    1.681_792_830_507_429,
    1.834_008_086_409_342_4,
];

/// Taylor coefficients of `e^r`, highest degree first. Truncation error is
/// below 4e-16 on `|r| <= ln2/16`.
pub(crate) const EXP_POLY: [f64; 8] = [
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

/// `e^x` for `x <= 0` (arguments below -700 are clamped; the result there is
/// ~1e-304 instead of a smaller subnormal). Relative error is a few ulps.
#[inline(always)]
pub(crate) fn exp_nonpos(x: f64) -> f64 {
    let x = if x < MIN_ARG { MIN_ARG } else { x };
    let t = x.mul_add(LOG2E_8, SHIFTER);
    let n = t - SHIFTER;
    let r = (-n).mul_add(LN2_8_HI, x);
    let r = (-n).mul_add(LN2_8_LO, r);
    let mut p = EXP_POLY[0];
    for &c in &EXP_POLY[1..] {
        p = p.mul_add(r, c);
    }
    // The low mantissa bits of `t` hold k: bits 0..3 pick 2^(j/8) and the
    // rest, moved into the exponent field, multiply it by 2^floor(k/8).
    let bits = t.to_bits();
    let base = EXP2_EIGHTHS[(bits & 7) as usize].to_bits();
    let scale = f64::from_bits(base.wrapping_add((bits << 49) & EXP_FIELD));
    p * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_std_exp() {
        let mut worst = 0.0f64;
        let mut x = 0.0_f64;
        while x > -700.0 {
            let want = x.exp();
            let got = exp_nonpos(x);
            worst = worst.max(((got - want) / want).abs());
            x -= 0.013_7;
        }
        assert!(worst < 1e-14, "worst relative error {worst:e}");
        assert_eq!(exp_nonpos(0.0), 1.0);
    }

    #[test]
    fn clamps_far_negative() {
        let v = exp_nonpos(-5000.0);
        assert!(v > 0.0 && v < 1e-300);
    }
}

//! Software IEEE 754 binary16 conversion.
//!
//! Half precision is a storage format here: values are widened to `f32`
//! for arithmetic and narrowed back with round-to-nearest-even.

pub const F16_MAX: f32 = 65504.0;
pub const F16_EXPONENT_BITS: u32 = 5;
pub const F16_MANTISSA_BITS: u32 = 10;

/// Narrow an `f32` to binary16 bits, rounding to nearest with ties to even.
/// Finite values beyond the f16 range become infinity; NaN stays NaN.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let man = bits & 0x007f_ffff;

    if exp == 0xff {
        return if man == 0 {
            sign | 0x7c00
        } else {
            // keep the quiet bit set so the payload cannot collapse to infinity
            sign | 0x7e00 | (man >> 13) as u16
        };
    }

    let e = exp - 127 + 15;
    if e >= 0x1f {
        return sign | 0x7c00;
    }

    if e <= 0 {
        if e < -10 {
            return sign;
        }
        let full = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let half = 1u32 << (shift - 1);
        let rem = full & ((1u32 << shift) - 1);
        let mut q = full >> shift;
        if rem > half || (rem == half && q & 1 == 1) {
            q += 1;
        }
        return sign | q as u16;
    }

    let mut q = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1fff;
    if rem > 0x1000 || (rem == 0x1000 && q & 1 == 1) {
        // a carry out of the mantissa correctly bumps the exponent, up to infinity
        q += 1;
    }
    sign | q as u16
}

/// Widen binary16 bits to `f32`. Exact for every input.
pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let man = (h & 0x03ff) as u32;
    match exp {
        0 => {
            let mag = man as f32 * f32::from_bits(0x3380_0000); // 2^-24
            f32::from_bits(sign | mag.to_bits())
        }
        0x1f => f32::from_bits(sign | 0x7f80_0000 | (man << 13)),
        _ => f32::from_bits(sign | ((exp + 112) << 23) | (man << 13)),
    }
}

/// Round an `f32` through half precision.
#[inline]
pub fn round_f16(x: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(x))
}

pub fn f32_slice_to_f16(values: &[f32]) -> Vec<u16> {
    values.iter().map(|&v| f32_to_f16_bits(v)).collect()
}

pub fn f16_slice_to_f32(values: &[u16]) -> Vec<f32> {
    values.iter().map(|&h| f16_bits_to_f32(h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powers_of_two_are_exact() {
        for k in -14..=15 {
            let x = 2f32.powi(k);
            assert_eq!(round_f16(x), x);
            assert_eq!(round_f16(-x), -x);
        }
        assert_eq!(f32_to_f16_bits(1.0), 0x3c00);
    }

    #[test]
    fn one_tenth_rounds_to_nearest() {
        assert_eq!(round_f16(0.1), 0.099_975_585_937_5);
    }

    #[test]
    fn saturation_and_overflow() {
        assert_eq!(round_f16(65519.0), F16_MAX);
        assert_eq!(round_f16(65520.0), f32::INFINITY);
        assert_eq!(round_f16(-1e9), f32::NEG_INFINITY);
        assert!(round_f16(f32::NAN).is_nan());
    }

    #[test]
    fn subnormals() {
        let min_sub = 2f32.powi(-24);
        assert_eq!(round_f16(min_sub), min_sub);
        // exactly half of the smallest subnormal ties to zero
        assert_eq!(round_f16(min_sub / 2.0), 0.0);
        assert_eq!(round_f16(min_sub * 0.75), min_sub);
        assert_eq!(f32_to_f16_bits(-0.0), 0x8000);
    }

    #[test]
    fn roundtrip_of_every_f16_is_identity() {
        for h in 0..=u16::MAX {
            let x = f16_bits_to_f32(h);
            if x.is_nan() {
                continue;
            }
            assert_eq!(f32_to_f16_bits(x), h, "bits {h:#06x}");
        }
    }
}

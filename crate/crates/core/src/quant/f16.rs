//! Binary16 conversion for quantization scales.
//!
//! Scales are stored as IEEE half floats both in memory and in the packed
//! format, so the dequantization grid is identical on every path.

/// Largest finite f16.
pub const F16_MAX: f64 = 65504.0;

/// Convert an f32 to f16 bits, round to nearest even, preserving subnormals.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let mant = bits & 0x007f_ffff;

    if exp == 0xff {
        // Inf or NaN.
        return if mant == 0 { sign | 0x7c00 } else { sign | 0x7e00 };
    }
    // Unbiased exponent.
    let e = exp - 127;
    if e > 15 {
        return sign | 0x7c00; // overflow to inf
    }
    if e >= -14 {
        // Normal f16: 10 mantissa bits, round to nearest even on the cut.
        let mant16 = mant >> 13;
        let rem = mant & 0x1fff;
        let halfway = 0x1000;
        let mut out = sign | (((e + 15) as u16) << 10) | mant16 as u16;
        if rem > halfway || (rem == halfway && (mant16 & 1) == 1) {
            out = out.wrapping_add(1); // may carry into exponent; that is correct rounding
        }
        return out;
    }
    if e < -25 {
        return sign; // underflow to zero
    }
    // Subnormal f16.
    let full = mant | 0x0080_0000; // implicit leading 1
    let shift = (-14 - e) + 13;
    let mant16 = full >> shift;
    let rem = full & ((1 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    let mut out = sign | mant16 as u16;
    if rem > halfway || (rem == halfway && (mant16 & 1) == 1) {
        out = out.wrapping_add(1);
    }
    out
}

/// Decode f16 bits to f64.
pub fn f16_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let mant = (bits & 0x3ff) as f64;
    if exp == 0x1f {
        return if mant == 0.0 { sign * f64::INFINITY } else { f64::NAN };
    }
    if exp == 0 {
        return sign * mant * 2f64.powi(-24);
    }
    sign * (1.0 + mant / 1024.0) * 2f64.powi(exp - 15)
}

/// Round a positive scale to its f16 representation, clamping so the result
/// stays positive and finite: quantization scales must never collapse to
/// zero or explode to infinity.
pub fn quantize_scale(raw: f64) -> u16 {
    debug_assert!(raw > 0.0 && raw.is_finite(), "scale {raw}");
    let bits = f32_to_f16_bits(raw as f32);
    if bits == 0 {
        return 1; // smallest positive subnormal
    }
    if bits >= 0x7c00 {
        return 0x7bff; // largest finite
    }
    bits
}

/// Round a positive scale DOWN to the f16 grid (floor), clamped positive and
/// finite. Min-max grids use this so the rounded scale never exceeds the raw
/// step: the max value's code then always lands at (or clamps to) full
/// range, and re-quantizing a dequantized group is exactly the identity.
pub fn quantize_scale_floor(raw: f64) -> u16 {
    debug_assert!(raw > 0.0 && raw.is_finite(), "scale {raw}");
    let bits = raw.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32 - 1023;
    if exp > 15 {
        return 0x7bff; // clamp to largest finite
    }
    if exp >= -14 {
        // Normal f16: truncate the mantissa (floor for positive values).
        let mant10 = ((bits >> 42) & 0x3ff) as u16;
        return (((exp + 15) as u16) << 10) | mant10;
    }
    // Subnormal f16: multiples of 2^-24; the cast truncates.
    let k = (raw * 16_777_216.0) as u64;
    if k == 0 {
        1
    } else {
        k.min(0x3ff) as u16
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_small_integers() {
        for v in [1.0f64, 2.0, 5.0, 0.5, 0.25, 1024.0] {
            let bits = f32_to_f16_bits(v as f32);
            assert_eq!(f16_bits_to_f64(bits), v, "{v}");
        }
    }

    #[test]
    fn rounding_is_idempotent() {
        // Converting an already-f16 value must reproduce its bits.
        for bits in [0x0001u16, 0x03ff, 0x0400, 0x3c00, 0x7bff, 0x0010] {
            let v = f16_bits_to_f64(bits);
            assert_eq!(f32_to_f16_bits(v as f32), bits, "bits {bits:#x} value {v}");
        }
    }

    #[test]
    fn relative_error_bounded_for_normals() {
        let mut x = 1e-4;
        while x < 6e4 {
            let back = f16_bits_to_f64(f32_to_f16_bits(x as f32));
            let rel = (back - x).abs() / x;
            assert!(rel <= 1.0 / 2048.0 + 1e-9, "x {x} back {back} rel {rel}");
            x *= 1.37;
        }
    }

    #[test]
    fn scale_clamps() {
        assert_eq!(quantize_scale(1e-12), 1);
        assert_eq!(quantize_scale(1e9), 0x7bff);
        let s = f16_bits_to_f64(quantize_scale(0.03125));
        assert_eq!(s, 0.03125);
    }

    #[test]
    fn floor_never_exceeds_input() {
        let mut x = 1e-9;
        while x < 1e6 {
            let v = f16_bits_to_f64(quantize_scale_floor(x));
            assert!(v > 0.0);
            let min_subnormal = 2f64.powi(-24);
            if (min_subnormal..=F16_MAX).contains(&x) {
                assert!(v <= x, "floor({x}) = {v}");
                assert!(v >= x * (1.0 - 1.0 / 1024.0) - 6e-8, "floor({x}) = {v}");
            }
            // Exact f16 values are fixed points.
            assert_eq!(f16_bits_to_f64(quantize_scale_floor(v)), v);
            x *= 1.618;
        }
    }

    #[test]
    fn overflow_and_nan() {
        assert_eq!(f32_to_f16_bits(f32::INFINITY), 0x7c00);
        assert_eq!(f32_to_f16_bits(1e9), 0x7c00);
        assert_eq!(f32_to_f16_bits(f32::NAN) & 0x7e00, 0x7e00);
        assert_eq!(f32_to_f16_bits(-2.0), 0xc000);
    }
}

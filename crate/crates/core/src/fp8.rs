//! E4M3 (the "fn" variant): 1 sign, 4 exponent, 3 mantissa bits, bias 7,
//! no infinities, NaN at `S.1111.111`, largest finite magnitude 448.

pub const MAX_FINITE: f64 = 448.0;
pub const NAN_CODE: u8 = 0x7F;
const MIN_NORMAL: f64 = 1.0 / 64.0;
const SUBNORMAL_STEP: f64 = 1.0 / 512.0;

pub fn is_nan_code(code: u8) -> bool {
    code & 0x7F == 0x7F
}

pub fn decode(code: u8) -> f32 {
    if is_nan_code(code) {
        return f32::NAN;
    }
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((code >> 3) & 0x0F) as i32;
    let mant = (code & 0x07) as f64;
    let mag = if exp == 0 {
        mant * SUBNORMAL_STEP
    } else {
        (1.0 + mant / 8.0) * 2f64.powi(exp - 7)
    };
    (sign * mag) as f32
}

/// Round-to-nearest-even into E4M3, saturating finite overflow (and ±∞) to
/// ±448. NaN maps to [`NAN_CODE`].
pub fn encode(x: f64) -> u8 {
    if x.is_nan() {
        return NAN_CODE;
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0x00 };
    let a = x.abs();
    if a >= MAX_FINITE {
        return sign | 0x7E;
    }
    if a < MIN_NORMAL {
        // Subnormal steps; a carry to 8 lands exactly on the smallest normal code.
        return sign | (a / SUBNORMAL_STEP).round_ties_even() as u8;
    }
    let mut e = a.log2().floor() as i32;
    // log2 can land one off near powers of two.
    if 2f64.powi(e) > a {
        e -= 1;
    } else if 2f64.powi(e + 1) <= a {
        e += 1;
    }
    let frac = a / 2f64.powi(e) - 1.0;
    let mut q = (frac * 8.0).round_ties_even() as i32;
    if q == 8 {
        q = 0;
        e += 1;
    }
    sign | (((e + 7) as u8) << 3) | q as u8
}

/// Every non-NaN code (both zeros included), in code order.
pub fn finite_codes() -> impl Iterator<Item = u8> {
    (0u8..=255).filter(|&c| !is_nan_code(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks() {
        assert_eq!(decode(0x7E), 448.0);
        assert_eq!(decode(0x08), 1.0 / 64.0);
        assert_eq!(decode(0x01), 1.0 / 512.0);
        assert_eq!(decode(0x38), 1.0);
        assert!(decode(NAN_CODE).is_nan());
        assert!(decode(0xFF).is_nan());
        assert_eq!(finite_codes().count(), 254);
    }

    #[test]
    fn saturates_and_rounds_even() {
        assert_eq!(encode(1000.0), 0x7E);
        assert_eq!(encode(f64::NEG_INFINITY), 0xFE);
        // 1.0625 sits halfway between 1.0 and 1.125.
        assert_eq!(encode(1.0625), 0x38);
        assert_eq!(encode(1.1875), 0x3A);
        assert_eq!(encode(0.0), 0x00);
        assert_eq!(encode(-0.0), 0x80);
        assert_eq!(encode(f64::NAN), NAN_CODE);
    }
}

use half::f16;

use super::NumericsError;

/// Raw binary16 bit pattern: 1 sign bit, 5 exponent bits (bias 15), 10 fraction bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Fp16Bits(pub u16);

pub const EXP_BIAS: i32 = 15;
pub const FRACTION_BITS: u32 = 10;
pub const SIGNIFICAND_BITS: u32 = 11;
pub const MAX_FINITE: f64 = 65504.0;

impl Fp16Bits {
    pub const ZERO: Fp16Bits = Fp16Bits(0);
    pub const ONE: Fp16Bits = Fp16Bits(0x3c00);

    pub fn from_parts(sign: bool, exponent: u16, fraction: u16) -> Self {
        debug_assert!(exponent < 32 && fraction < 1024);
        Fp16Bits(((sign as u16) << 15) | ((exponent & 0x1f) << 10) | (fraction & 0x3ff))
    }

    pub fn sign(self) -> bool {
        self.0 >> 15 == 1
    }

    /// Biased exponent field.
    pub fn exponent(self) -> u16 {
        (self.0 >> 10) & 0x1f
    }

    pub fn fraction(self) -> u16 {
        self.0 & 0x3ff
    }

    pub fn is_zero(self) -> bool {
        self.0 & 0x7fff == 0
    }

    pub fn is_subnormal(self) -> bool {
        self.exponent() == 0 && self.fraction() != 0
    }

    pub fn is_finite(self) -> bool {
        self.exponent() != 0x1f
    }

    /// Hidden bit concatenated with the fraction. Zero for zero and subnormal encodings.
    pub fn significand(self) -> u32 {
        if self.exponent() == 0 {
            0
        } else {
            (1 << FRACTION_BITS) | self.fraction() as u32
        }
    }

    /// Exponent with the bias removed (normal values only).
    pub fn unbiased_exponent(self) -> i32 {
        self.exponent() as i32 - EXP_BIAS
    }

    pub fn negate(self) -> Self {
        Fp16Bits(self.0 ^ 0x8000)
    }

    pub fn to_f64(self) -> f64 {
        f16::from_bits(self.0).to_f64()
    }

    pub fn to_f32(self) -> f32 {
        f16::from_bits(self.0).to_f32()
    }

    /// Replaces a subnormal encoding with a signed zero. The flag reports whether a flush happened.
    pub fn flush_subnormal(self) -> (Self, bool) {
        if self.is_subnormal() {
            (Fp16Bits(self.0 & 0x8000), true)
        } else {
            (self, false)
        }
    }
}

/// Round-to-nearest-even conversion of a real into binary16.
pub fn encode_fp16(real: f64) -> Result<Fp16Bits, NumericsError> {
    if !real.is_finite() {
        return Err(NumericsError::NonFinite(real));
    }
    let h = f16::from_f64(real);
    if h.is_infinite() {
        return Err(NumericsError::OutOfRange(real));
    }
    Ok(Fp16Bits(h.to_bits()))
}

/// Same as [`encode_fp16`] but clamps out-of-range magnitudes to the largest finite value.
pub fn encode_fp16_saturating(real: f64) -> Result<Fp16Bits, NumericsError> {
    if real.is_nan() {
        return Err(NumericsError::NonFinite(real));
    }
    match encode_fp16(real) {
        Err(NumericsError::OutOfRange(_)) | Err(NumericsError::NonFinite(_)) => {
            Ok(encode_fp16(MAX_FINITE.copysign(real)).expect("max finite encodes"))
        }
        other => other,
    }
}

/// Rejects NaN/Inf encodings and flushes subnormals. Returns the cleaned value and whether it was flushed.
pub fn ingest(bits: Fp16Bits) -> Result<(Fp16Bits, bool), NumericsError> {
    if !bits.is_finite() {
        return Err(NumericsError::NonFiniteEncoding(bits.0));
    }
    Ok(bits.flush_subnormal())
}

/// Four-bit two's-complement weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Int4Val(i8);

impl Int4Val {
    pub const MIN: i8 = -8;
    pub const MAX: i8 = 7;

    pub fn new(value: i8) -> Result<Self, NumericsError> {
        if (Self::MIN..=Self::MAX).contains(&value) {
            Ok(Int4Val(value))
        } else {
            Err(NumericsError::Int4Range(value as i32))
        }
    }

    pub fn value(self) -> i8 {
        self.0
    }

    pub fn to_nibble(self) -> u8 {
        (self.0 as u8) & 0xf
    }

    pub fn from_nibble(nibble: u8) -> Self {
        Int4Val(((nibble << 4) as i8) >> 4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force nearest finite binary16 with ties to the even fraction.
    fn nearest_oracle(x: f64) -> u16 {
        let mut best: Option<(f64, u16)> = None;
        for bits in 0u16..=0xffff {
            let h = f16::from_bits(bits);
            if !h.is_finite() {
                continue;
            }
            let d = (h.to_f64() - x).abs();
            best = match best {
                None => Some((d, bits)),
                Some((bd, bb)) => {
                    if d < bd || (d == bd && bits & 1 == 0 && bb & 1 == 1) {
                        Some((d, bits))
                    } else {
                        Some((bd, bb))
                    }
                }
            };
        }
        let (_, bits) = best.unwrap();
        // The zero of matching sign.
        if bits & 0x7fff == 0 {
            if x.is_sign_negative() {
                0x8000
            } else {
                0
            }
        } else {
            bits
        }
    }

    #[test]
    fn one_and_zero() {
        let one = encode_fp16(1.0).unwrap();
        assert_eq!((one.sign(), one.exponent(), one.fraction()), (false, 15, 0));
        assert_eq!(encode_fp16(0.0).unwrap().0, 0);
    }

    #[test]
    fn frozen_oracle_value() {
        // 1.2001953125 = 1 + 205/1024 is exactly representable.
        let e = encode_fp16(1.2001953125).unwrap();
        assert_eq!(e.0, nearest_oracle(1.2001953125));
        assert_eq!(e.fraction(), 205);
    }

    #[test]
    fn encoder_matches_brute_force_nearest() {
        let probes = [
            0.1,
            -0.3333,
            1.0 / 3.0,
            2.5e-5,
            6.1e-5,
            1000.1,
            65503.9,
            -12.34567,
            0.99951171875,
            1.00048828125,
            3.14161,
            7.0e-8,
        ];
        for &x in &probes {
            assert_eq!(encode_fp16(x).unwrap().0, nearest_oracle(x), "x = {x}");
        }
    }

    #[test]
    fn roundtrip_every_finite_encoding() {
        for bits in 0u16..=0xffff {
            let b = Fp16Bits(bits);
            if !b.is_finite() {
                continue;
            }
            assert_eq!(encode_fp16(b.to_f64()).unwrap(), b);
        }
    }

    #[test]
    fn significand_has_hidden_bit() {
        for bits in (0x0400u16..0x7c00).step_by(97) {
            let b = Fp16Bits(bits);
            assert_eq!(b.significand(), 1024 + b.fraction() as u32);
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(encode_fp16(f64::NAN).is_err());
        assert!(encode_fp16(f64::INFINITY).is_err());
        assert!(encode_fp16(70000.0).is_err());
        assert!(ingest(Fp16Bits(0x7c00)).is_err());
        assert_eq!(encode_fp16_saturating(1e9).unwrap().to_f64(), MAX_FINITE);
    }

    #[test]
    fn subnormals_flush() {
        let (z, flushed) = ingest(Fp16Bits(0x8001)).unwrap();
        assert!(flushed);
        assert_eq!(z.0, 0x8000);
        assert!(!ingest(Fp16Bits::ONE).unwrap().1);
    }

    #[test]
    fn int4_range() {
        assert!(Int4Val::new(-8).is_ok());
        assert!(Int4Val::new(7).is_ok());
        assert!(Int4Val::new(8).is_err());
        assert!(Int4Val::new(-9).is_err());
        for v in -8..=7 {
            let w = Int4Val::new(v).unwrap();
            assert_eq!(Int4Val::from_nibble(w.to_nibble()), w);
        }
    }
}

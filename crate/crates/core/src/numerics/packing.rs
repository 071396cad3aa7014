//! Two significand products from one multiplier slice.
//!
//! Layout of the truncated overpacking for an `n`-bit significand and a 5-bit overlap:
//!
//! * `u0` loses its LSB (`b0`) and is fed on the pre-adder `d` port.
//! * `u1` loses its MSB (`b1`) and is fed on `a`, shifted up by `k = 2n - 6`; the pre-adder
//!   subtracts it, so the upper product field comes out negated.
//! * The 5 overlapping bits of the upper field are produced by a separate 5x5 multiply (`aux`)
//!   and added back through `c`, together with the `b0` and `b1` corrections and a sentinel that
//!   keeps the upper field strictly negative.
//!
//! The slice then returns `P = floor(p0 / 2) - 2^(2n-1) * (floor(p1 / 2^5) + 1)`, so the low
//! field is `floor(p0 / 2)` and the high field is the bitwise complement of `floor(p1 / 2^5)`.

use super::dsp::{dsp_mac, DspPorts, PreAdderMode};
use super::NumericsError;

/// Overlap width of the truncated scheme; also the operand width of its auxiliary multiply.
pub const TRUNCATED_OVERLAP: u32 = 5;
pub const MIN_WIDTH: u32 = 6;
pub const MAX_WIDTH: u32 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PackScheme {
    /// Disjoint output fields. Needs `u1 << 2n` to fit the 27-bit port.
    Standard,
    /// Overlapping fields, overlap recomputed by a narrow multiply.
    Overpacked,
    /// Overpacked with one bit dropped from each operand and restored through the C port.
    OverpackedTruncated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TruncatedBit {
    pub value: u8,
    pub position: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackedPair {
    pub scheme: PackScheme,
    pub width: u32,
    pub ports: DspPorts,
    /// Operands of the narrow side multiply, `(from u1, from v)`.
    pub aux_multiplicands: (u32, u32),
    pub aux_bits: u32,
    /// `[LSB of u0, MSB of u1]` for the truncated scheme.
    pub truncated_bits: Option<[TruncatedBit; 2]>,
}

fn check_width(width: u32) -> Result<(), NumericsError> {
    if (MIN_WIDTH..=MAX_WIDTH).contains(&width) {
        Ok(())
    } else {
        Err(NumericsError::SignificandWidth(width))
    }
}

fn check_operand(value: u32, width: u32) -> Result<(), NumericsError> {
    if value >> width == 0 {
        Ok(())
    } else {
        Err(NumericsError::OperandWidth { value, width })
    }
}

fn field_shift(scheme: PackScheme, width: u32) -> u32 {
    match scheme {
        PackScheme::Standard => 2 * width,
        PackScheme::Overpacked => 26 - width,
        PackScheme::OverpackedTruncated => 2 * width - 1 - TRUNCATED_OVERLAP,
    }
}

fn overpacked_overlap(width: u32) -> u32 {
    (2 * width).saturating_sub(field_shift(PackScheme::Overpacked, width))
}

/// Packs `u0 * v` and `u1 * v` into one multiply. `v` is the shared operand on the 18-bit port.
pub fn pack_pair(u0: u32, u1: u32, v: u32, width: u32, scheme: PackScheme) -> Result<PackedPair, NumericsError> {
    check_width(width)?;
    for x in [u0, u1, v] {
        check_operand(x, width)?;
    }
    let n = width;
    let k = field_shift(scheme, n);
    let (u0, u1, v) = (u0 as i64, u1 as i64, v as i64);
    match scheme {
        PackScheme::Standard => {
            let a = (u1 << k) + u0;
            let ports = DspPorts::new(a, v, 0, 0, PreAdderMode::Bypass)
                .map_err(|_| NumericsError::InfeasiblePacking { u0: u0 as u32, u1: u1 as u32, width })?;
            Ok(PackedPair { scheme, width, ports, aux_multiplicands: (0, 0), aux_bits: 0, truncated_bits: None })
        }
        PackScheme::Overpacked => {
            let ow = overpacked_overlap(n);
            let mask = (1i64 << ow) - 1;
            let (au, av) = (u1 & mask, v & mask);
            let aux = (au * av) & mask;
            let ports = DspPorts::new(u0 + (u1 << k), v, -(aux << k), 0, PreAdderMode::Bypass)?;
            Ok(PackedPair {
                scheme,
                width,
                ports,
                aux_multiplicands: (au as u32, av as u32),
                aux_bits: ow,
                truncated_bits: None,
            })
        }
        PackScheme::OverpackedTruncated => {
            let t = TRUNCATED_OVERLAP;
            let b0 = u0 & 1;
            let b1 = u1 >> (n - 1);
            let u0t = u0 >> 1;
            let u1t = u1 & ((1 << (n - 1)) - 1);
            let mask = (1i64 << t) - 1;
            let (au, av) = (u1t & mask, v & mask);
            let aux = (au * av) & mask;
            let hi = 1i64 << (2 * n - 1);
            let c = (aux << k) + b0 * (v >> 1) - hi * (b1 * v * (1 << (n - 1 - t)) + 1);
            let ports = DspPorts::new(u1t << k, v, c, u0t, PreAdderMode::Subtract)?;
            Ok(PackedPair {
                scheme,
                width,
                ports,
                aux_multiplicands: (au as u32, av as u32),
                aux_bits: t,
                truncated_bits: Some([
                    TruncatedBit { value: b0 as u8, position: 0 },
                    TruncatedBit { value: b1 as u8, position: n - 1 },
                ]),
            })
        }
    }
}

fn violation(msg: &'static str) -> NumericsError {
    NumericsError::RecoveryContract(msg)
}

/// Reconstructs `(u0 * v, u1 * v)` from a single slice evaluation plus the narrow side multiply.
pub fn recover_dual_products(pair: &PackedPair) -> Result<(u32, u32), NumericsError> {
    let n = pair.width;
    let k = field_shift(pair.scheme, n);
    let ports = &pair.ports;
    let v = ports.b();
    if v < 0 || v >> n != 0 {
        return Err(violation("shared operand outside significand range"));
    }
    let p = dsp_mac(ports);
    let prod_mask = (1i64 << (2 * n)) - 1;
    let (p0, p1) = match pair.scheme {
        PackScheme::Standard => {
            if p < 0 {
                return Err(violation("standard packing produced a negative result"));
            }
            (p & prod_mask, p >> (2 * n))
        }
        PackScheme::Overpacked => {
            let ow = pair.aux_bits;
            let mask = (1i64 << ow) - 1;
            let (au, av) = pair.aux_multiplicands;
            if au as i64 != (ports.a() >> k) & mask || av as i64 != v & mask {
                return Err(violation("aux multiplicands do not match the ports"));
            }
            let aux = (au as i64 * av as i64) & mask;
            let hi_shift = k.max(2 * n);
            if p < 0 {
                return Err(violation("overlap was not cancelled"));
            }
            (p & ((1i64 << hi_shift) - 1), ((p >> hi_shift) << ow) | aux)
        }
        PackScheme::OverpackedTruncated => {
            let t = TRUNCATED_OVERLAP;
            let bits = pair.truncated_bits.ok_or(violation("missing truncated bits"))?;
            let b0 = bits[0].value as i64;
            let mask = (1i64 << t) - 1;
            let (au, av) = pair.aux_multiplicands;
            if au as i64 != (ports.a() >> k) & mask || av as i64 != v & mask {
                return Err(violation("aux multiplicands do not match the ports"));
            }
            let aux = (au as i64 * av as i64) & mask;
            let split = 2 * n - 1;
            let high = p >> split;
            if high >= 0 {
                return Err(violation("upper field lost its sentinel"));
            }
            let low = p & ((1i64 << split) - 1);
            ((low << 1) | (b0 & v & 1), ((!high) << t) | aux)
        }
    };
    if p0 < 0 || p0 > prod_mask || p1 < 0 || p1 > prod_mask {
        return Err(violation("recovered product out of range"));
    }
    Ok((p0 as u32, p1 as u32))
}

/// Standard two-weight packing used for FP16 x INT4: `(w1 * 2^18 + w0) * v`.
pub fn pack_int4_pair(w0: i8, w1: i8, v: u32) -> Result<DspPorts, NumericsError> {
    check_operand(v, MAX_WIDTH)?;
    DspPorts::new(((w1 as i64) << 18) + w0 as i64, v as i64, 0, 0, PreAdderMode::Bypass)
}

/// Splits the two signed 18-bit fields of an INT4 pair product.
pub fn recover_int4_products(ports: &DspPorts) -> (i32, i32) {
    let p = dsp_mac(ports);
    let p0 = ((p << 46) >> 46) as i32;
    let p1 = ((p - p0 as i64) >> 18) as i32;
    (p0, p1)
}

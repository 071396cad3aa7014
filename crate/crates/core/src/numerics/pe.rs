use super::fp16::{encode_fp16_saturating, ingest, Fp16Bits, Int4Val, FRACTION_BITS, SIGNIFICAND_BITS};
use super::packing::{pack_int4_pair, pack_pair, recover_dual_products, recover_int4_products, PackScheme};
use super::NumericsError;

pub const DEFAULT_DEPTH: usize = 64;
/// Field offset of the second column when two column sums share one 48-bit adder.
const PACKED_SUM_OFFSET: u32 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeMode {
    Fp16Fp16,
    Fp16Int4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PeImpl {
    /// Full 22-bit products, one accumulator per column.
    Impl1,
    /// 15-bit truncated products, one accumulator per column.
    Impl2,
    /// 15-bit truncated products, two columns accumulated in one packed 48-bit adder.
    Impl3,
}

impl PeImpl {
    pub const ALL: [PeImpl; 3] = [PeImpl::Impl1, PeImpl::Impl2, PeImpl::Impl3];

    pub fn product_width(self) -> u32 {
        match self {
            PeImpl::Impl1 => 2 * SIGNIFICAND_BITS,
            PeImpl::Impl2 | PeImpl::Impl3 => 15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PeImpl::Impl1 => "IMPL1",
            PeImpl::Impl2 => "IMPL2",
            PeImpl::Impl3 => "IMPL3",
        }
    }
}

impl std::str::FromStr for PeImpl {
    type Err = NumericsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "IMPL1" => Ok(PeImpl::Impl1),
            "IMPL2" => Ok(PeImpl::Impl2),
            "IMPL3" => Ok(PeImpl::Impl3),
            _ => Err(NumericsError::UnknownImpl(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PeColumnConfig {
    pub depth: usize,
    pub mode: PeMode,
    pub implementation: PeImpl,
}

impl PeColumnConfig {
    pub fn new(mode: PeMode, implementation: PeImpl) -> Self {
        PeColumnConfig { depth: DEFAULT_DEPTH, mode, implementation }
    }

    /// Accumulator field width `W`.
    pub fn product_width(&self) -> u32 {
        self.implementation.product_width()
    }

    /// Width of a raw lane product before it is placed in its `W`-bit field.
    fn lane_width(&self) -> u32 {
        match self.mode {
            PeMode::Fp16Fp16 => self.product_width(),
            PeMode::Fp16Int4 => 15,
        }
    }

    /// Fraction bits of a raw lane product.
    fn lane_fraction_bits(&self) -> i32 {
        match self.mode {
            PeMode::Fp16Fp16 => 2 * FRACTION_BITS as i32 - (22 - self.product_width() as i32),
            PeMode::Fp16Int4 => FRACTION_BITS as i32,
        }
    }

    /// The column aligns magnitudes in both modes. An arithmetic shift would bias every
    /// shifted lane by half a unit downward and break exact sign symmetry.
    fn shift(&self) -> AlignShift {
        AlignShift::TowardZero
    }
}

/// One multiplier output: `mantissa * 2^(exponent - fraction_bits)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct LaneProduct {
    pub mantissa: i32,
    pub exponent: i32,
}

impl LaneProduct {
    pub fn sign(&self) -> bool {
        self.mantissa < 0
    }
}

/// Two FP16 x FP16 products sharing the activation `x`, through the truncated overpacking.
/// Operands must be normal or zero.
pub fn fp16_pair_multiply(
    x: Fp16Bits,
    w0: Fp16Bits,
    w1: Fp16Bits,
    implementation: PeImpl,
) -> Result<[LaneProduct; 2], NumericsError> {
    for b in [x, w0, w1] {
        if b.is_subnormal() || !b.is_finite() {
            return Err(NumericsError::NotNormal(b.0));
        }
    }
    let pair = pack_pair(
        w0.significand(),
        w1.significand(),
        x.significand(),
        SIGNIFICAND_BITS,
        PackScheme::OverpackedTruncated,
    )?;
    let (p0, p1) = recover_dual_products(&pair)?;
    let drop = 22 - implementation.product_width();
    let lane = |p: u32, w: Fp16Bits| {
        if p == 0 || x.is_zero() || w.is_zero() {
            return LaneProduct::default();
        }
        let magnitude = (p >> drop) as i32;
        let negative = x.sign() ^ w.sign();
        LaneProduct {
            mantissa: if negative { -magnitude } else { magnitude },
            exponent: x.unbiased_exponent() + w.unbiased_exponent(),
        }
    };
    Ok([lane(p0, w0), lane(p1, w1)])
}

/// Two FP16 x INT4 products; the sign travels inside the two's-complement product.
pub fn fp16_int4_multiply(x: Fp16Bits, w0: Int4Val, w1: Int4Val) -> Result<[LaneProduct; 2], NumericsError> {
    if x.is_subnormal() || !x.is_finite() {
        return Err(NumericsError::NotNormal(x.0));
    }
    if x.is_zero() {
        return Ok([LaneProduct::default(); 2]);
    }
    let ports = pack_int4_pair(w0.value(), w1.value(), x.significand())?;
    let (p0, p1) = recover_int4_products(&ports);
    let e = x.unbiased_exponent();
    let signed = |p: i32| if x.sign() { -p } else { p };
    Ok([LaneProduct { mantissa: signed(p0), exponent: e }, LaneProduct { mantissa: signed(p1), exponent: e }])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlignShift {
    /// Shift the magnitude, keep the sign.
    TowardZero,
    /// Arithmetic shift of the two's-complement value.
    Floor,
}

/// Shared-exponent block. Value is `sum(mantissas) * 2^(shared_exponent - fraction_bits)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BfpBlock {
    pub shared_exponent: i32,
    pub mantissas: Vec<i64>,
    pub width: u32,
    pub fraction_bits: i32,
}

impl BfpBlock {
    pub fn lane_count(&self) -> usize {
        self.mantissas.len()
    }

    /// Bits needed to hold the sum of all lanes without overflow.
    pub fn sum_width(&self) -> u32 {
        // Signed W-bit field plus log2(lanes) growth bits.
        self.width + 1 + (self.lane_count().max(1) as u64).next_power_of_two().trailing_zeros()
    }

    pub fn scale(&self) -> f64 {
        2f64.powi(self.shared_exponent - self.fraction_bits)
    }
}

fn shift_mantissa(m: i64, by: u32, how: AlignShift) -> i64 {
    if by >= 63 {
        return match how {
            AlignShift::Floor if m < 0 => -1,
            _ => 0,
        };
    }
    match how {
        AlignShift::Floor => m >> by,
        AlignShift::TowardZero => {
            let r = m.abs() >> by;
            if m < 0 {
                -r
            } else {
                r
            }
        }
    }
}

/// Aligns lane products to their maximum exponent.
///
/// Each raw product (`lane_width` bits, `lane_fraction_bits` fraction bits) is first placed at the
/// top of a `width`-bit field, then shifted right by its exponent gap.
pub fn bfp_align(
    lanes: &[LaneProduct],
    lane_width: u32,
    lane_fraction_bits: i32,
    width: u32,
    how: AlignShift,
) -> BfpBlock {
    debug_assert!(width >= lane_width);
    let pad = width - lane_width;
    let shared = lanes.iter().filter(|l| l.mantissa != 0).map(|l| l.exponent).max().unwrap_or(0);
    let mantissas = lanes
        .iter()
        .map(|l| {
            if l.mantissa == 0 {
                0
            } else {
                shift_mantissa((l.mantissa as i64) << pad, (shared - l.exponent) as u32, how)
            }
        })
        .collect();
    BfpBlock { shared_exponent: shared, mantissas, width, fraction_bits: lane_fraction_bits + pad as i32 }
}

fn checked_sum(block: &BfpBlock) -> i64 {
    let sum: i64 = block.mantissas.iter().sum();
    debug_assert!(sum.unsigned_abs() < 1u64 << (block.sum_width() - 1));
    sum
}

/// Exact fixed-point sum as a binary64 value.
pub fn bfp_accumulate_wide(block: &BfpBlock) -> f64 {
    checked_sum(block) as f64 * block.scale()
}

/// Exact fixed-point sum, one round-to-nearest-even into FP16. Overflow saturates at the largest finite value.
pub fn bfp_accumulate_finalize(block: &BfpBlock) -> Fp16Bits {
    finalize_sum(checked_sum(block), block.scale())
}

fn finalize_sum(sum: i64, scale: f64) -> Fp16Bits {
    encode_fp16_saturating(sum as f64 * scale).expect("finite sum")
}

/// Weight column for one PE dot product.
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a> {
    Fp16(&'a [Fp16Bits]),
    Int4(&'a [Int4Val]),
}

impl Weights<'_> {
    fn len(&self) -> usize {
        match self {
            Weights::Fp16(w) => w.len(),
            Weights::Int4(w) => w.len(),
        }
    }

    fn mode(&self) -> PeMode {
        match self {
            Weights::Fp16(_) => PeMode::Fp16Fp16,
            Weights::Int4(_) => PeMode::Fp16Int4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DotOutput {
    pub value: Fp16Bits,
    /// The same accumulator converted to binary64 instead of FP16.
    pub wide: f64,
    /// Subnormal inputs flushed to zero on the way in.
    pub flushed: usize,
}

fn clean(v: &[Fp16Bits]) -> Result<(Vec<Fp16Bits>, usize), NumericsError> {
    let mut flushed = 0;
    let out = v
        .iter()
        .map(|&b| {
            let (c, f) = ingest(b)?;
            flushed += f as usize;
            Ok(c)
        })
        .collect::<Result<Vec<_>, NumericsError>>()?;
    Ok((out, flushed))
}

/// Two output columns sharing one activation vector, as the PE array computes them.
pub fn pe_dot_pair(
    x: &[Fp16Bits],
    w0: Weights<'_>,
    w1: Weights<'_>,
    cfg: &PeColumnConfig,
) -> Result<[DotOutput; 2], NumericsError> {
    for w in [&w0, &w1] {
        if w.len() != x.len() || x.len() != cfg.depth {
            return Err(NumericsError::LengthMismatch { expected: cfg.depth, got: x.len().max(w.len()) });
        }
        if w.mode() != cfg.mode {
            return Err(NumericsError::ModeMismatch);
        }
    }
    let (x, mut flushed) = clean(x)?;
    let mut lanes0 = Vec::with_capacity(cfg.depth);
    let mut lanes1 = Vec::with_capacity(cfg.depth);
    match (w0, w1) {
        (Weights::Fp16(a), Weights::Fp16(b)) => {
            let (a, fa) = clean(a)?;
            let (b, fb) = clean(b)?;
            flushed += fa + fb;
            for i in 0..cfg.depth {
                let [p0, p1] = fp16_pair_multiply(x[i], a[i], b[i], cfg.implementation)?;
                lanes0.push(p0);
                lanes1.push(p1);
            }
        }
        (Weights::Int4(a), Weights::Int4(b)) => {
            for i in 0..cfg.depth {
                let [p0, p1] = fp16_int4_multiply(x[i], a[i], b[i])?;
                lanes0.push(p0);
                lanes1.push(p1);
            }
        }
        _ => return Err(NumericsError::ModeMismatch),
    }
    let align = |lanes: &[LaneProduct]| {
        bfp_align(lanes, cfg.lane_width(), cfg.lane_fraction_bits(), cfg.product_width(), cfg.shift())
    };
    let (b0, b1) = (align(&lanes0), align(&lanes1));
    let (s0, s1) = match cfg.implementation {
        PeImpl::Impl1 | PeImpl::Impl2 => (checked_sum(&b0), checked_sum(&b1)),
        PeImpl::Impl3 => packed_column_sums(&b0.mantissas, &b1.mantissas),
    };
    let out = |sum: i64, block: &BfpBlock| DotOutput {
        value: finalize_sum(sum, block.scale()),
        wide: sum as f64 * block.scale(),
        flushed,
    };
    Ok([out(s0, &b0), out(s1, &b1)])
}

/// Accumulates two columns in one 48-bit adder with the second column at bit 24, then splits.
fn packed_column_sums(m0: &[i64], m1: &[i64]) -> (i64, i64) {
    let wrap = |v: i64| (v << 16) >> 16;
    let mut packed = 0i64;
    for (&a, &b) in m0.iter().zip(m1) {
        packed = wrap(packed + a + (b << PACKED_SUM_OFFSET));
    }
    let s0 = (packed << 40) >> 40;
    let s1 = (packed - s0) >> PACKED_SUM_OFFSET;
    (s0, s1)
}

/// Single-column dot product.
pub fn pe_dot(x: &[Fp16Bits], w: Weights<'_>, cfg: &PeColumnConfig) -> Result<DotOutput, NumericsError> {
    Ok(pe_dot_pair(x, w, w, cfg)?[0])
}

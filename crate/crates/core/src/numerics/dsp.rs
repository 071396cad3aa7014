use super::NumericsError;

pub const A_BITS: u32 = 27;
pub const B_BITS: u32 = 18;
pub const C_BITS: u32 = 48;
pub const D_BITS: u32 = 27;
pub const P_BITS: u32 = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PreAdderMode {
    /// Multiplicand is `a`.
    #[default]
    Bypass,
    /// Multiplicand is `d + a`.
    Add,
    /// Multiplicand is `d - a`.
    Subtract,
}

/// Input ports of one 27x18 multiplier slice with pre-adder and 48-bit post-adder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DspPorts {
    a: i64,
    b: i64,
    c: i64,
    d: i64,
    mode: PreAdderMode,
}

pub(crate) fn fits_signed(value: i64, bits: u32) -> bool {
    let lim = 1i64 << (bits - 1);
    (-lim..lim).contains(&value)
}

/// Interprets the low `bits` of `value` as a two's-complement number.
pub fn wrap_signed(value: i128, bits: u32) -> i64 {
    let m = 1i128 << bits;
    let mut r = value.rem_euclid(m);
    if r >= m / 2 {
        r -= m;
    }
    r as i64
}

impl DspPorts {
    pub fn new(a: i64, b: i64, c: i64, d: i64, mode: PreAdderMode) -> Result<Self, NumericsError> {
        for (name, v, bits) in [("a", a, A_BITS), ("b", b, B_BITS), ("c", c, C_BITS), ("d", d, D_BITS)] {
            if !fits_signed(v, bits) {
                return Err(NumericsError::PortWidth { port: name, value: v, bits });
            }
        }
        Ok(DspPorts { a, b, c, d, mode })
    }

    pub fn a(&self) -> i64 {
        self.a
    }
    pub fn b(&self) -> i64 {
        self.b
    }
    pub fn c(&self) -> i64 {
        self.c
    }
    pub fn d(&self) -> i64 {
        self.d
    }
    pub fn mode(&self) -> PreAdderMode {
        self.mode
    }

    /// Pre-adder output. The hardware pre-adder is one bit wider than its inputs, so no wrap.
    pub fn multiplicand(&self) -> i64 {
        match self.mode {
            PreAdderMode::Bypass => self.a,
            PreAdderMode::Add => self.d + self.a,
            PreAdderMode::Subtract => self.d - self.a,
        }
    }
}

/// `((d op a) * b + c) mod 2^48`, as two's complement.
pub fn dsp_mac(ports: &DspPorts) -> i64 {
    let exact = ports.multiplicand() as i128 * ports.b as i128 + ports.c as i128;
    wrap_signed(exact, P_BITS)
}

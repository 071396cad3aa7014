//! Bit-level model of the mixed-precision multiply-accumulate column.

pub mod dsp;
pub mod fp16;
pub mod packing;
pub mod pe;
pub mod sweep;

pub use dsp::{dsp_mac, DspPorts, PreAdderMode};
pub use fp16::{encode_fp16, encode_fp16_saturating, Fp16Bits, Int4Val};
pub use packing::{pack_pair, recover_dual_products, PackScheme, PackedPair, TruncatedBit};
pub use pe::{
    bfp_accumulate_finalize, bfp_accumulate_wide, bfp_align, fp16_int4_multiply, fp16_pair_multiply, pe_dot,
    pe_dot_pair, AlignShift, BfpBlock, DotOutput, LaneProduct, PeColumnConfig, PeImpl, PeMode, Weights,
};
pub use sweep::{error_metric, naive_mac, run_sweep, Distribution, ErrorRow, ErrorStats, SweepConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("{0} is outside the finite binary16 range")]
    OutOfRange(f64),
    #[error("NaN or infinity encoding 0x{0:04x}")]
    NonFiniteEncoding(u16),
    #[error("operand 0x{0:04x} is not a normal binary16 value or zero")]
    NotNormal(u16),
    #[error("{0} is outside the INT4 range [-8, 7]")]
    Int4Range(i32),
    #[error("port {port} value {value} does not fit {bits} signed bits")]
    PortWidth { port: &'static str, value: i64, bits: u32 },
    #[error("significand width {0} is not supported (6..=11)")]
    SignificandWidth(u32),
    #[error("operand {value} wider than {width} bits")]
    OperandWidth { value: u32, width: u32 },
    #[error("standard packing of {u0} and {u1} at width {width} exceeds the 27-bit port")]
    InfeasiblePacking { u0: u32, u1: u32, width: u32 },
    #[error("dual-product recovery failed: {0}")]
    RecoveryContract(&'static str),
    #[error("expected {expected} lanes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("weight type does not match the column mode")]
    ModeMismatch,
    #[error("unknown implementation {0:?}")]
    UnknownImpl(String),
    #[error("error metric needs at least one trial with a nonzero reference")]
    EmptyMetric,
}

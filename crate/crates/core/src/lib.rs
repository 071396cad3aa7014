//! Software model of a layer-skipping LLM overlay accelerator.
//!
//! * [`numerics`]: bit-exact DSP packing, FP16/INT4 products and block floating point accumulation.
//! * [`dataflow`]: fused router/normalization and fused attention kernels with unfused references.
//! * [`kvsim`]: cycle-approximate KV cache traffic simulation over HBM ports and an on-chip reuse buffer.
//! * [`runner`]: a toy inference engine producing routing masks and access traces, plus the
//!   analytic attention speedup model.

pub mod dataflow;
pub mod kvsim;
pub mod numerics;
pub mod runner;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point element type of the value-level kernels.
pub trait Scalar: Float + FromPrimitive + NumCast + Debug + Display + Default + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Matrix in binary64, the precision of exact equivalence checks.
pub type WideMatrix = dataflow::Matrix<f64>;
/// Matrix in binary32, the precision of device-mode nonlinearities.
pub type DeviceMatrix = dataflow::Matrix<f32>;

//! Toy inference engine and the analytic attention speedup model.
//!
//! [`build_toy_model`] draws seeded weights with calibrated routers; [`run_prefill`] and
//! [`run_decode`] push tokens through fused routing, rotary Q/K, tiled attention with K/V
//! fallback, and a routed SwiGLU feed-forward, recording decisions, K/V entries and hidden
//! states. The recorded mask becomes a decode [`crate::kvsim::AccessTrace`].

pub mod config;
pub mod e2e;
pub mod infer;
pub mod model;
pub mod perf;

pub use config::{ConfigFile, ModelConfig, NumericMode, WeightMode, Workload, DECODE_LENGTHS, PREFILL_LENGTHS};
pub use e2e::{run_e2e, synthetic_prompt, DriftRow, E2eConfig, E2eOutputs, DRIFT_CSV_HEADER, STORAGE_CSV_HEADER};
pub use infer::{next_token_logits, project, run_decode, run_prefill, InferenceState, Pipeline, RunOptions};
pub use model::{
    build_toy_model, calibrate_router_bias, measured_skip_rate, synthetic_activations, LayerWeights, ToyModel,
};
pub use perf::{
    calibrate_nonlinear_cost, decode_cycles, decode_speedup_trend, decode_step_cycles, mha_speedup_model,
    prefill_cycles, speedup_grid, PerfParams, Phase, SpeedupEntry, SpeedupReport, Variant, CALIBRATED_NONLINEAR_CYCLES,
    CALIBRATION_PREFILL_LEN, CALIBRATION_TARGET_SPEEDUP, DECODE_CONTEXT, SPEEDUP_CSV_HEADER,
};

use crate::dataflow::DataflowError;
use crate::kvsim::KvError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunnerError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataflow(#[from] DataflowError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

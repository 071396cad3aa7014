//! Cycle-approximate KV cache traffic over HBM ports with an on-chip reuse buffer.
//!
//! A decode [`AccessTrace`] is replayed layer by layer: entries are placed by a
//! [`MappingPolicy`], packed into [`RoundSchedule`]s, and costed per port with an open-page and
//! burst model. The buffer holds entries the look-ahead mask says the next layer will reuse.

pub mod buffer;
pub mod config;
pub mod cost;
pub mod layout;
pub mod schedule;
pub mod sim;
pub mod storage;
pub mod synth;
pub mod trace;

pub use buffer::InvarianceBuffer;
pub use config::{BufferConfig, HbmConfig, KvGeometry, CALIBRATED_PAGE_MISS_PENALTY};
pub use cost::{cost_rounds, HbmState};
pub use layout::{layer_region_beats, map_tokens, KvLayout, MappingPolicy, Placement};
pub use schedule::{check_round, check_schedule, schedule_attention, AttentionStep, Fetch, NeededEntry, RoundSchedule};
pub use sim::{build_layouts, simulate_sequence, BandwidthReport, SimConfig, REPORT_CELLS, REPORT_CSV_HEADER};
pub use storage::{kv_storage_accounting, StorageReport};
pub use synth::{calibrate_penalty, synthetic_mask, SyntheticTraceConfig};
pub use trace::{AccessTrace, TraceRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KvError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("layer {layer} address space exhausted at token {token}")]
    Capacity { layer: usize, token: usize },
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error("trace inconsistent at step {step:?}, layer {layer}: {message}")]
    Inconsistent { step: Option<usize>, layer: usize, message: String },
    #[error("entry of token {token} at layer {layer} is neither buffered nor mapped")]
    UnmappedEntry { layer: usize, token: usize },
    #[error("illegal round {round}: {message}")]
    Illegal { round: usize, message: String },
}

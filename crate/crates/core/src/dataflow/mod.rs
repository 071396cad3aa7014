//! Value-level fused kernels and their unfused references.
//!
//! Everything is generic over [`crate::Scalar`]: `f64` for exact equivalence checks, `f32` together
//! with [`DeviceEngine`] to push every reduction through the bit-level PE column.

pub mod attention;
pub mod check;
pub mod engine;
pub mod kernels;
pub mod matrix;
pub mod route;
pub mod router;
pub mod softmax;

pub use attention::{
    fused_attention, reference_attention, AttentionConfig, Causal, CountingSpill, FaultySpill, SpillKey, SpillStore,
};
pub use check::{equivalence_suite, results_csv, CheckConfig, PropertyResult};
pub use engine::{DeviceEngine, ExactEngine, MatmulEngine};
pub use kernels::{rope_apply, silu, swiglu, swiglu_interleaved, RopeTable};
pub use matrix::{Linear, Matrix, QuantizedWeights};
pub use route::{kv_fallback_resolve, GumbelConfig, GumbelRouter, KvStore, RouteMask, RoutingMode, Submodule, EXECUTE};
pub use router::{
    fused_router_submodule, normalize_selected, reference_router_submodule, router_stats_pass, AccessLog,
    FusedRouterConfig, NormKind, RoutedOutput, RouterParams, RowStats, TileSpec,
};
pub use softmax::{normalize_scores, online_softmax_update, softmax_rows, SoftmaxFeatures};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataflowError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid tiling: {0}")]
    Tile(String),
    #[error("router logit of row {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("score tile row {0} is not finite")]
    NonFiniteScore(usize),
    #[error("row {0} has zero variance and no epsilon floor")]
    DegenerateRow(usize),
    #[error("softmax denominator of row {0} is zero")]
    ZeroDenominator(usize),
    #[error("position {0} outside the rotary table")]
    Position(usize),
    #[error("token {token} has no executed attention layer at or below {layer}")]
    NoProvenance { layer: usize, token: usize },
    #[error("no K/V stored for layer {layer}, token {token}")]
    MissingKv { layer: usize, token: usize },
    #[error("score tile {0:?} was never spilled")]
    MissingSpill(SpillKey),
}

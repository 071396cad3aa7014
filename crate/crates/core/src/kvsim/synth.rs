use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataflow::RouteMask;

use super::layout::MappingPolicy;
use super::sim::{simulate_sequence, SimConfig};
use super::trace::AccessTrace;
use super::KvError;

/// Independent Bernoulli skips per (token, layer, submodule) above layer 0, which always executes.
pub fn synthetic_mask(n_layers: usize, n_tokens: usize, skip_prob: f64, seed: u64) -> RouteMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = (1.0 - skip_prob).clamp(0.0, 1.0);
    let mut mask = RouteMask::new(n_layers);
    for _ in 0..n_tokens {
        let mha: Vec<bool> = (0..n_layers).map(|l| l == 0 || rng.random_bool(keep)).collect();
        let ffn: Vec<bool> = (0..n_layers).map(|l| l == 0 || rng.random_bool(keep)).collect();
        mask.push_token(&mha, &ffn).expect("column lengths match");
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTraceConfig {
    pub n_layers: usize,
    pub context_len: usize,
    pub decode_steps: usize,
    pub skip_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticTraceConfig {
    /// The standard decode trace: 32 layers, 1024 context tokens, 32 decode steps, 25% skips.
    fn default() -> Self {
        SyntheticTraceConfig { n_layers: 32, context_len: 1024, decode_steps: 32, skip_prob: 0.25, seed: 1 }
    }
}

impl SyntheticTraceConfig {
    pub fn generate(&self) -> Result<(RouteMask, AccessTrace), KvError> {
        let mask = synthetic_mask(self.n_layers, self.context_len + self.decode_steps, self.skip_prob, self.seed);
        let trace = AccessTrace::from_mask(&mask, self.context_len, self.decode_steps)?;
        Ok((mask, trace))
    }

    /// Same shape with nothing skipped.
    pub fn dense(&self) -> Self {
        SyntheticTraceConfig { skip_prob: 0.0, ..*self }
    }
}

/// Bisects the page-miss penalty until the dense-interleaved run on `dense_trace` reaches
/// `target_util_pct`. Utilization falls monotonically with the penalty.
pub fn calibrate_penalty(dense_trace: &AccessTrace, target_util_pct: f64, cfg: &SimConfig) -> Result<f64, KvError> {
    let util = |pen: f64| -> Result<f64, KvError> {
        let mut c = cfg.clone();
        c.hbm.page_miss_penalty_cycles = pen;
        Ok(simulate_sequence(dense_trace, MappingPolicy::DenseInterleaved, false, &c)?.hbm_utilization_pct)
    };
    if util(0.0)? < target_util_pct {
        return Err(KvError::Config(format!("{target_util_pct}% is above the zero-penalty utilization")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while util(hi)? > target_util_pct {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(KvError::Config(format!("no penalty brings utilization down to {target_util_pct}%")));
        }
    }
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if util(mid)? > target_util_pct {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::Submodule;

    #[test]
    fn layer_zero_forced_and_seeded() {
        let a = synthetic_mask(6, 200, 0.5, 4);
        assert!(a.layer_zero_anchored());
        assert_eq!(a, synthetic_mask(6, 200, 0.5, 4));
        assert_ne!(a, synthetic_mask(6, 200, 0.5, 5));
        let none = synthetic_mask(6, 50, 0.0, 4);
        assert!((0..6).all(|l| none.executed_tokens(l, Submodule::Mha).len() == 50));
    }

    #[test]
    fn skip_rate_matches() {
        let m = synthetic_mask(4, 20_000, 0.25, 2);
        let executed: usize = (1..4).map(|l| m.executed_tokens(l, Submodule::Mha).len()).sum();
        let rate = 1.0 - executed as f64 / 60_000.0;
        assert!((rate - 0.25).abs() < 0.01, "{rate}");
    }
}

use std::collections::BTreeMap;

use super::config::BufferConfig;

/// On-chip store of entries known to be reused at the next layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvarianceBuffer {
    pub config: BufferConfig,
    /// token -> provenance layer of the held entry
    residency: BTreeMap<usize, usize>,
    valid: bool,
    evictions: u64,
}

impl InvarianceBuffer {
    pub fn new(config: BufferConfig) -> Self {
        InvarianceBuffer { config, residency: BTreeMap::new(), valid: false, evictions: 0 }
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn residency(&self) -> &BTreeMap<usize, usize> {
        &self.residency
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    /// Entry held for `token` with provenance `prov`, only while valid.
    pub fn holds(&self, token: usize, prov: usize) -> bool {
        self.valid && self.residency.get(&token) == Some(&prov)
    }

    /// Attention was skipped: nothing held survives to the next layer.
    pub fn invalidate(&mut self) {
        self.residency.clear();
        self.valid = false;
    }

    /// Keeps the observable entries (held or in flight) whose token skips the next layer.
    /// `executes_next[t]` is the next layer's decision; tokens beyond it are not retained.
    /// Returns how many entries were evicted for capacity, oldest provenance first.
    pub fn lookahead_update(&mut self, executes_next: &[bool], in_flight: &[(usize, usize)]) -> usize {
        let mut observable = if self.valid { std::mem::take(&mut self.residency) } else { BTreeMap::new() };
        observable.extend(in_flight.iter().copied());
        let mut keep: Vec<(usize, usize)> =
            observable.into_iter().filter(|&(t, _)| executes_next.get(t).is_some_and(|&e| !e)).collect();
        let excess = keep.len().saturating_sub(self.config.capacity_tokens);
        if excess > 0 {
            keep.sort_by_key(|&(t, prov)| (prov, t));
            keep.drain(..excess);
        }
        self.residency = keep.into_iter().collect();
        self.valid = true;
        self.evictions += excess as u64;
        excess
    }
}

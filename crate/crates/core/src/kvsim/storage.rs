use crate::dataflow::{RouteMask, Submodule};

use super::KvError;

/// Entries kept under cross-layer reuse against storing every (layer, token).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StorageReport {
    pub tokens: usize,
    pub stored_entries: u64,
    pub dense_entries: u64,
    pub entry_bytes: u64,
}

impl StorageReport {
    pub fn stored_bytes(&self) -> u64 {
        self.stored_entries * self.entry_bytes
    }

    pub fn dense_bytes(&self) -> u64 {
        self.dense_entries * self.entry_bytes
    }

    pub fn reduction_pct(&self) -> f64 {
        if self.dense_entries == 0 {
            return 0.0;
        }
        100.0 * (self.dense_entries - self.stored_entries) as f64 / self.dense_entries as f64
    }
}

/// Counts executed attention (layer, token) pairs over the first `seq_len` tokens.
pub fn kv_storage_accounting(mask: &RouteMask, seq_len: usize, entry_bytes: u64) -> Result<StorageReport, KvError> {
    if seq_len > mask.n_tokens() {
        return Err(KvError::Config(format!(
            "sequence of {seq_len} tokens exceeds the {}-token mask",
            mask.n_tokens()
        )));
    }
    let stored = (0..mask.n_layers())
        .map(|l| (0..seq_len).filter(|&t| mask.executes(l, Submodule::Mha, t)).count() as u64)
        .sum();
    Ok(StorageReport {
        tokens: seq_len,
        stored_entries: stored,
        dense_entries: (mask.n_layers() * seq_len) as u64,
        entry_bytes,
    })
}

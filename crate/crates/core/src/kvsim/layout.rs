use std::fmt;
use std::str::FromStr;

use crate::dataflow::{RouteMask, Submodule};

use super::config::HbmConfig;
use super::KvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MappingPolicy {
    /// Every token stored at every layer, striped across all ports.
    DenseInterleaved,
    /// Only executed tokens stored, striped across all ports.
    InterleavedSkip,
    /// Only executed tokens stored, each entry inside one port, ports assigned round-robin.
    TokenWise,
}

impl MappingPolicy {
    pub const ALL: [MappingPolicy; 3] =
        [MappingPolicy::DenseInterleaved, MappingPolicy::InterleavedSkip, MappingPolicy::TokenWise];

    pub fn name(self) -> &'static str {
        match self {
            MappingPolicy::DenseInterleaved => "dense_interleaved",
            MappingPolicy::InterleavedSkip => "interleaved_skip",
            MappingPolicy::TokenWise => "token_wise",
        }
    }

    pub fn striped(self) -> bool {
        self != MappingPolicy::TokenWise
    }
}

impl fmt::Display for MappingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MappingPolicy {
    type Err = KvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MappingPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| KvError::Config(format!("unknown mapping policy {s:?}")))
    }
}

/// Where one entry lives. Addresses are in beats within each port's address space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Port {
        port: usize,
        base: u64,
    },
    /// The same `base` on every port, `token_span_beats / n_ports` beats each.
    Striped {
        base: u64,
    },
}

/// Placement of every stored entry of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvLayout {
    pub policy: MappingPolicy,
    pub layer: usize,
    pub token_span_beats: u64,
    /// Indexed by token; `None` when the token has no entry at this layer.
    pub assignment: Vec<Option<Placement>>,
}

impl KvLayout {
    pub fn placement(&self, token: usize) -> Option<Placement> {
        self.assignment.get(token).copied().flatten()
    }

    pub fn stored(&self) -> usize {
        self.assignment.iter().flatten().count()
    }
}

/// First beat of a layer's region on every port; regions are page aligned.
pub fn layer_region_beats(n_layers: usize, cfg: &HbmConfig) -> u64 {
    let port_beats = cfg.port_capacity_bytes / cfg.beat_bytes();
    let page = cfg.page_beats();
    (port_beats / n_layers.max(1) as u64) / page * page
}

pub fn map_tokens(
    mask: &RouteMask,
    layer: usize,
    policy: MappingPolicy,
    cfg: &HbmConfig,
    token_span_beats: u64,
) -> Result<KvLayout, KvError> {
    if layer >= mask.n_layers() {
        return Err(KvError::Config(format!("layer {layer} beyond the {}-layer mask", mask.n_layers())));
    }
    let np = cfg.n_ports as u64;
    if policy.striped() && !token_span_beats.is_multiple_of(np) {
        return Err(KvError::Config(format!("{token_span_beats}-beat entry does not stripe evenly over {np} ports")));
    }
    let region = layer_region_beats(mask.n_layers(), cfg);
    let origin = layer as u64 * region;
    let mut assignment = vec![None; mask.n_tokens()];
    let mut rank = 0u64;
    for (token, slot) in assignment.iter_mut().enumerate() {
        let stored = policy == MappingPolicy::DenseInterleaved || mask.executes(layer, Submodule::Mha, token);
        if !stored {
            continue;
        }
        let (placement, end) = if policy.striped() {
            let stripe = token_span_beats / np;
            (Placement::Striped { base: origin + rank * stripe }, (rank + 1) * stripe)
        } else {
            let row = rank / np;
            (
                Placement::Port { port: (rank % np) as usize, base: origin + row * token_span_beats },
                (row + 1) * token_span_beats,
            )
        };
        if end > region {
            return Err(KvError::Capacity { layer, token });
        }
        *slot = Some(placement);
        rank += 1;
    }
    Ok(KvLayout { policy, layer, token_span_beats, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(layer1: &[bool]) -> RouteMask {
        let mut m = RouteMask::new(2);
        for &e in layer1 {
            m.push_token(&[true, e], &[true, true]).unwrap();
        }
        m
    }

    #[test]
    fn token_wise_round_robin() {
        let cfg = HbmConfig::with_ports(4, 2);
        let m = mask_with(&[true; 8]);
        let lay = map_tokens(&m, 1, MappingPolicy::TokenWise, &cfg, 128).unwrap();
        let ports: Vec<usize> = (0..8)
            .map(|t| match lay.placement(t).unwrap() {
                Placement::Port { port, .. } => port,
                Placement::Striped { .. } => unreachable!(),
            })
            .collect();
        assert_eq!(ports, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        let region = layer_region_beats(2, &cfg);
        assert_eq!(lay.placement(5), Some(Placement::Port { port: 1, base: region + 128 }));
    }

    #[test]
    fn skipped_tokens_take_no_slot() {
        let cfg = HbmConfig::with_ports(4, 2);
        let m = mask_with(&[true, false, true, true]);
        let lay = map_tokens(&m, 1, MappingPolicy::TokenWise, &cfg, 128).unwrap();
        assert_eq!(lay.placement(1), None);
        assert!(matches!(lay.placement(2), Some(Placement::Port { port: 1, .. })));
        assert_eq!(lay.stored(), 3);
        let dense = map_tokens(&m, 1, MappingPolicy::DenseInterleaved, &cfg, 128).unwrap();
        assert_eq!(dense.stored(), 4);
        assert_eq!(dense.placement(3), Some(Placement::Striped { base: layer_region_beats(2, &cfg) + 3 * 32 }));
    }

    #[test]
    fn address_space_overflow() {
        let mut cfg = HbmConfig::with_ports(4, 2);
        cfg.port_capacity_bytes = 4 * 8192 * 2;
        let m = mask_with(&[true; 9]);
        assert!(map_tokens(&m, 0, MappingPolicy::TokenWise, &cfg, 128).is_ok());
        let m = mask_with(&[true; 9]);
        cfg.port_capacity_bytes = 2 * 8192;
        assert!(matches!(
            map_tokens(&m, 0, MappingPolicy::TokenWise, &cfg, 128),
            Err(KvError::Capacity { token: 4, .. })
        ));
        assert!("nope".parse::<MappingPolicy>().is_err());
    }
}

use super::config::HbmConfig;
use super::layout::{KvLayout, Placement};
use super::schedule::{Fetch, RoundSchedule};
use super::KvError;

#[derive(Clone, Debug, Default, PartialEq)]
struct PortState {
    open_page: Option<u64>,
    /// Address following the last access, and beats left in its burst.
    burst_end: Option<u64>,
    burst_left: u64,
}

/// Open pages and in-progress bursts of every port, carried across rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct HbmState {
    ports: Vec<PortState>,
}

impl HbmState {
    pub fn new(cfg: &HbmConfig) -> Self {
        HbmState { ports: vec![PortState::default(); cfg.n_ports] }
    }

    /// Cycles for `beats` contiguous beats at `addr` on `port`: transfer, one penalty per
    /// newly opened page, and a setup per new burst unless the previous burst continues.
    pub fn access(&mut self, cfg: &HbmConfig, port: usize, addr: u64, beats: u64) -> f64 {
        if beats == 0 {
            return 0.0;
        }
        let st = &mut self.ports[port];
        let page = cfg.page_beats();
        let mut misses = 0u64;
        for pg in addr / page..=(addr + beats - 1) / page {
            if st.open_page != Some(pg) {
                misses += 1;
                st.open_page = Some(pg);
            }
        }
        let mut left = beats;
        let mut rem = if st.burst_end == Some(addr) { st.burst_left } else { 0 };
        let carried = rem.min(left);
        left -= carried;
        rem -= carried;
        let mut bursts = 0u64;
        while left > 0 {
            bursts += 1;
            let take = cfg.burst_beats_max.min(left);
            left -= take;
            rem = cfg.burst_beats_max - take;
        }
        st.burst_end = Some(addr + beats);
        st.burst_left = rem;
        beats as f64 * cfg.page_hit_cycles_per_beat
            + misses as f64 * cfg.page_miss_penalty_cycles
            + bursts as f64 * cfg.burst_setup_cycles
    }

    fn entry(&mut self, cfg: &HbmConfig, layouts: &[KvLayout], f: &Fetch) -> Result<f64, KvError> {
        let layout = layouts.get(f.layer).ok_or(KvError::UnmappedEntry { layer: f.layer, token: f.token })?;
        let span = layout.token_span_beats;
        match layout.placement(f.token) {
            Some(Placement::Port { port, base }) => Ok(self.access(cfg, port, base, span)),
            Some(Placement::Striped { base }) => {
                let stripe = span / cfg.n_ports as u64;
                Ok((0..cfg.n_ports).map(|p| self.access(cfg, p, base, stripe)).fold(0.0, f64::max))
            }
            None => Err(KvError::UnmappedEntry { layer: f.layer, token: f.token }),
        }
    }
}

/// Cycles of a sequence of rounds. A round lasts as long as its slowest port; buffer reads
/// overlap with HBM traffic and only cost time in a round without HBM accesses.
/// Proactive writes never add cycles.
pub fn cost_rounds(
    rounds: &[RoundSchedule],
    layouts: &[KvLayout],
    state: &mut HbmState,
    cfg: &HbmConfig,
    token_span_beats: u64,
) -> Result<f64, KvError> {
    let mut cycles = 0.0;
    for r in rounds {
        let mut slowest = 0.0f64;
        let mut any = false;
        for f in r.hbm_accesses() {
            slowest = slowest.max(state.entry(cfg, layouts, f)?);
            any = true;
        }
        if !any && !r.buffer_reads.is_empty() {
            slowest = token_span_beats as f64 * cfg.page_hit_cycles_per_beat;
        }
        cycles += slowest;
    }
    Ok(cycles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::RouteMask;
    use crate::kvsim::layout::{map_tokens, MappingPolicy};

    fn one_round(fetches: Vec<Fetch>) -> RoundSchedule {
        RoundSchedule {
            round_index: 0,
            layer: 0,
            buffer_valid: false,
            hbm_fetches: fetches,
            hbm_writes: vec![],
            buffer_reads: vec![],
            proactive_writes: vec![],
        }
    }

    #[test]
    fn single_page_hit_costs_span() {
        let cfg = HbmConfig { page_miss_penalty_cycles: 0.0, burst_setup_cycles: 0.0, ..Default::default() };
        let lays = vec![map_tokens(&RouteMask::dense(1, 2), 0, MappingPolicy::TokenWise, &cfg, 128).unwrap()];
        let mut st = HbmState::new(&cfg);
        let one =
            cost_rounds(&[one_round(vec![Fetch { token: 0, layer: 0, port: Some(0) }])], &lays, &mut st, &cfg, 128)
                .unwrap();
        assert_eq!(one, 128.0);
    }

    #[test]
    fn parallel_ports_overlap() {
        let cfg = HbmConfig { page_miss_penalty_cycles: 8.0, ..Default::default() };
        let lays = vec![map_tokens(&RouteMask::dense(1, 4), 0, MappingPolicy::TokenWise, &cfg, 128).unwrap()];
        let a = cost_rounds(
            &[one_round(vec![Fetch { token: 0, layer: 0, port: Some(0) }])],
            &lays,
            &mut HbmState::new(&cfg),
            &cfg,
            128,
        )
        .unwrap();
        let two = vec![Fetch { token: 0, layer: 0, port: Some(0) }, Fetch { token: 2, layer: 0, port: Some(2) }];
        let b = cost_rounds(&[one_round(two)], &lays, &mut HbmState::new(&cfg), &cfg, 128).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, 128.0 + 8.0 + 2.0 * 4.0);
    }

    #[test]
    fn contiguous_access_continues_page_and_burst() {
        let cfg = HbmConfig { page_miss_penalty_cycles: 8.0, ..Default::default() };
        let mut st = HbmState::new(&cfg);
        assert_eq!(st.access(&cfg, 0, 0, 8), 8.0 + 8.0 + 4.0);
        assert_eq!(st.access(&cfg, 0, 8, 8), 8.0);
        // jump to another page: new page and new burst
        assert_eq!(st.access(&cfg, 0, 1000, 8), 8.0 + 8.0 + 4.0);
        // burst capacity runs out after 64 beats
        let mut st = HbmState::new(&cfg);
        let total: f64 = (0..9).map(|i| st.access(&cfg, 1, i * 8, 8)).sum();
        assert_eq!(total, 72.0 + 8.0 + 2.0 * 4.0);
    }

    #[test]
    fn buffer_only_round_costs_one_span() {
        let cfg = HbmConfig::default();
        let mut r = one_round(vec![]);
        r.buffer_reads = vec![1, 2, 3];
        assert_eq!(cost_rounds(&[r], &[], &mut HbmState::new(&cfg), &cfg, 128).unwrap(), 128.0);
    }
}

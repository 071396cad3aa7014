use std::fmt::Write as _;

use super::buffer::InvarianceBuffer;
use super::config::{BufferConfig, HbmConfig, KvGeometry};
use super::cost::{cost_rounds, HbmState};
use super::layout::{map_tokens, KvLayout, MappingPolicy};
use super::schedule::{check_schedule, schedule_attention, AttentionStep, NeededEntry};
use super::trace::AccessTrace;
use super::KvError;

/// Everything the simulator needs besides the trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimConfig {
    pub hbm: HbmConfig,
    pub buffer: BufferConfig,
    pub geometry: KvGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthReport {
    pub policy: MappingPolicy,
    pub use_buffer: bool,
    pub steps: usize,
    pub total_cycles: f64,
    pub hbm_read_bytes: u64,
    pub hbm_write_bytes: u64,
    pub buffer_bytes: u64,
    pub needed_entries: u64,
    pub evictions: u64,
    pub effective_hbm_gbps: f64,
    pub hbm_utilization_pct: f64,
    /// HBM plus buffer-served bytes over the same time.
    pub aggregate_effective_gbps: f64,
}

/// The (policy, buffer) cells of a bandwidth report, in output order.
pub const REPORT_CELLS: [(MappingPolicy, bool); 4] = [
    (MappingPolicy::DenseInterleaved, false),
    (MappingPolicy::InterleavedSkip, false),
    (MappingPolicy::TokenWise, false),
    (MappingPolicy::TokenWise, true),
];

pub const REPORT_CSV_HEADER: &str =
    "policy,use_buffer,steps,hbm_bytes,buffer_bytes,cycles,eff_gbps,util_pct,aggregate_gbps,evictions";

impl BandwidthReport {
    pub fn hbm_bytes(&self) -> u64 {
        self.hbm_read_bytes + self.hbm_write_bytes
    }

    /// Aggregate bandwidth as a percentage of the port-geometry peak.
    pub fn aggregate_pct(&self, cfg: &HbmConfig) -> f64 {
        100.0 * self.aggregate_effective_gbps / cfg.theoretical_bw_gbps()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{}",
            self.policy,
            self.use_buffer,
            self.steps,
            self.hbm_bytes(),
            self.buffer_bytes,
            self.total_cycles,
            self.effective_hbm_gbps,
            self.hbm_utilization_pct,
            self.aggregate_effective_gbps,
            self.evictions
        );
        s
    }
}

/// Builds one layout per layer from the mask implied by `trace`.
pub fn build_layouts(trace: &AccessTrace, policy: MappingPolicy, cfg: &SimConfig) -> Result<Vec<KvLayout>, KvError> {
    let mask = trace.validate()?;
    let span = cfg.geometry.token_span_beats(&cfg.hbm)?;
    (0..mask.n_layers()).map(|l| map_tokens(&mask, l, policy, &cfg.hbm, span)).collect()
}

/// Replays every record of `trace`: each layer's accesses are scheduled, checked for legality and
/// completeness, and costed against persistent port state. With `use_buffer`, the reuse buffer is
/// refreshed from the look-ahead bits after each attended layer and dropped after a skipped one.
pub fn simulate_sequence(
    trace: &AccessTrace,
    policy: MappingPolicy,
    use_buffer: bool,
    cfg: &SimConfig,
) -> Result<BandwidthReport, KvError> {
    cfg.hbm.validate()?;
    let span = cfg.geometry.token_span_beats(&cfg.hbm)?;
    let entry_bytes = span * cfg.hbm.beat_bytes();
    let layouts = build_layouts(trace, policy, cfg)?;
    let mut state = HbmState::new(&cfg.hbm);
    let mut buffer = InvarianceBuffer::new(cfg.buffer);
    let (read_ports, write_ports) =
        if use_buffer { (cfg.buffer.n_read_ports, cfg.buffer.n_write_ports) } else { (0, 0) };
    let mut cycles = 0.0;
    let (mut hbm_read, mut hbm_write, mut buffered, mut needed_total) = (0u64, 0u64, 0u64, 0u64);
    let mut needed = Vec::new();
    for r in &trace.records {
        let t = trace.query_token(r.step);
        if r.layer == 0 || !r.attend {
            buffer.invalidate();
        }
        needed.clear();
        needed.extend(r.needed.iter().map(|&(token, prov)| NeededEntry {
            token,
            prov: if policy == MappingPolicy::DenseInterleaved { r.layer } else { prov },
        }));
        let has_next = r.layer + 1 < trace.n_layers;
        let step = AttentionStep {
            layer: r.layer,
            needed: &needed,
            new_entry: (r.attend || policy == MappingPolicy::DenseInterleaved).then_some(t),
            executes_next: (use_buffer && has_next).then_some(r.lookahead.as_slice()),
        };
        let rounds = schedule_attention(&step, use_buffer.then_some(&buffer), &layouts, &cfg.hbm)?;
        check_schedule(&rounds, &step, &cfg.hbm, read_ports, write_ports)?;
        cycles += cost_rounds(&rounds, &layouts, &mut state, &cfg.hbm, span)?;
        for round in &rounds {
            hbm_read += round.hbm_fetches.len() as u64 * entry_bytes;
            hbm_write += round.hbm_writes.len() as u64 * entry_bytes;
            buffered += round.buffer_reads.len() as u64 * entry_bytes;
        }
        needed_total += needed.len() as u64;
        if use_buffer && r.attend {
            if has_next {
                let observed: Vec<(usize, usize)> = needed.iter().map(|e| (e.token, e.prov)).collect();
                buffer.lookahead_update(&r.lookahead, &observed);
            } else {
                buffer.invalidate();
            }
        }
    }
    let seconds = cycles / (cfg.hbm.freq_mhz * 1e6);
    let rate = |bytes: u64| if seconds > 0.0 { bytes as f64 / seconds / 1e9 } else { 0.0 };
    let eff = rate(hbm_read + hbm_write);
    Ok(BandwidthReport {
        policy,
        use_buffer,
        steps: trace.steps(),
        total_cycles: cycles,
        hbm_read_bytes: hbm_read,
        hbm_write_bytes: hbm_write,
        buffer_bytes: buffered,
        needed_entries: needed_total,
        evictions: buffer.evictions(),
        effective_hbm_gbps: eff,
        hbm_utilization_pct: 100.0 * eff / cfg.hbm.theoretical_bw_gbps(),
        aggregate_effective_gbps: rate(hbm_read + hbm_write + buffered),
    })
}

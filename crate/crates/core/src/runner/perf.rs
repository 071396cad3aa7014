//! Analytic cycle model of one attention block on the overlay.
//!
//! Each stage costs `max(compute, memory)` in core cycles. Prefill is dominated by the
//! projections and the tiled score/value passes; decode by weight and K/V traffic. The
//! conventional row-wise nonlinear unit adds a serialized pass over every normalized row and
//! every score row; that per-element cost is the one free parameter, calibrated once.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use super::config::{Workload, DECODE_LENGTHS, PREFILL_LENGTHS};
use super::RunnerError;

/// Per-element nonlinear cost giving a 1.40x fully optimized prefill-512 speedup.
pub const CALIBRATED_NONLINEAR_CYCLES: f64 = 1.5206;
pub const CALIBRATION_PREFILL_LEN: usize = 512;
pub const CALIBRATION_TARGET_SPEEDUP: f64 = 1.40;
/// Prompt length preceding the decode phase in the default grid.
pub const DECODE_CONTEXT: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    /// Skipped tokens skip attention but still generate K/V.
    PartialSkip,
    /// Skipped tokens generate nothing; K/V fall back to earlier layers.
    KvReuse,
    /// KV reuse plus fused nonlinear dataflow and head packing.
    KvReuseOpt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::PartialSkip, Variant::KvReuse, Variant::KvReuseOpt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PartialSkip => "partial_skip",
            Variant::KvReuse => "kv_reuse",
            Variant::KvReuseOpt => "kv_reuse_opt",
        }
    }

    fn generates_all_kv(self) -> bool {
        matches!(self, Variant::Baseline | Variant::PartialSkip)
    }

    fn fused(self) -> bool {
        self == Variant::KvReuseOpt
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Prefill,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerfParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub pe_macs_per_cycle: f64,
    pub core_freq_mhz: f64,
    pub hbm_freq_mhz: f64,
    pub hbm_peak_gbps: f64,
    /// Elements the row-wise nonlinear unit accepts per cycle.
    pub nonlinear_lanes: f64,
    /// Cycles per element of one serialized nonlinear row pass (Baseline through KV reuse).
    pub nonlinear_cycles_per_element: f64,
    /// Query rows sharing one K/V read in the tiled score pass.
    pub query_block_rows: f64,
    /// K/V traffic divisor from processing heads in pairs over shared tiles.
    pub head_packing: f64,
    /// Fraction of the score matrix left by the causal mask.
    pub causal_fraction: f64,
    pub weight_bytes_per_param: f64,
    pub kv_bytes_per_elem: f64,
    /// HBM efficiency of the dense interleaved K/V layout.
    pub dense_kv_efficiency: f64,
    /// HBM efficiency of the token-wise layout at `reference_skip_prob` and `reference_context`.
    pub skip_kv_efficiency: f64,
    pub reference_skip_prob: f64,
    pub reference_context: f64,
    /// Scales how strongly cross-layer retrieval contention grows with context; 0 disables it.
    pub contention: f64,
}

impl Default for PerfParams {
    fn default() -> Self {
        PerfParams {
            d_model: 4096,
            n_heads: 32,
            d_head: 128,
            pe_macs_per_cycle: 64.0 * 128.0,
            core_freq_mhz: 225.0,
            hbm_freq_mhz: 450.0,
            hbm_peak_gbps: 460.0,
            nonlinear_lanes: 64.0,
            nonlinear_cycles_per_element: CALIBRATED_NONLINEAR_CYCLES,
            query_block_rows: 8.0,
            head_packing: 2.0,
            causal_fraction: 0.5,
            weight_bytes_per_param: 0.5,
            kv_bytes_per_elem: 2.0,
            dense_kv_efficiency: 0.887,
            skip_kv_efficiency: 0.783,
            reference_skip_prob: 0.25,
            reference_context: 1024.0,
            contention: 1.0,
        }
    }
}

impl PerfParams {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let positive = [
            self.pe_macs_per_cycle,
            self.core_freq_mhz,
            self.hbm_freq_mhz,
            self.hbm_peak_gbps,
            self.nonlinear_lanes,
            self.query_block_rows,
            self.head_packing,
            self.causal_fraction,
            self.weight_bytes_per_param,
            self.kv_bytes_per_elem,
            self.reference_context,
        ];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(RunnerError::Invalid("performance parameters must be positive".into()));
        }
        if self.nonlinear_cycles_per_element < 0.0 || self.contention < 0.0 {
            return Err(RunnerError::Invalid("nonlinear cost and contention must be non-negative".into()));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(RunnerError::Invalid("n_heads x d_head must equal d_model".into()));
        }
        if !(0.0 < self.skip_kv_efficiency
            && self.skip_kv_efficiency <= self.dense_kv_efficiency
            && self.dense_kv_efficiency <= 1.0)
        {
            return Err(RunnerError::Invalid("need 0 < skip efficiency <= dense efficiency <= 1".into()));
        }
        if !(0.0 < self.reference_skip_prob && self.reference_skip_prob < 1.0) {
            return Err(RunnerError::Invalid("reference skip probability must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// HBM bytes per core cycle at peak.
    pub fn bytes_per_cycle(&self) -> f64 {
        self.hbm_peak_gbps * 1e3 / self.core_freq_mhz
    }

    /// Inverse efficiency of the skipped-token share of the token-wise layout: the
    /// reference measurement is a harmonic mix of dense-rate and cross-layer fetches.
    fn inv_cross_efficiency(&self) -> f64 {
        let p = self.reference_skip_prob;
        (1.0 / self.skip_kv_efficiency - (1.0 - p) / self.dense_kv_efficiency) / p
    }

    /// Token-wise K/V efficiency at `skip_prob`, measured at the reference context.
    pub fn reuse_kv_efficiency(&self, skip_prob: f64) -> f64 {
        1.0 / ((1.0 - skip_prob) / self.dense_kv_efficiency + skip_prob * self.inv_cross_efficiency())
    }

    /// Token-wise K/V efficiency with contention growing linearly in context length.
    pub fn reuse_kv_efficiency_at(&self, skip_prob: f64, context: f64) -> f64 {
        let dense = 1.0 / self.dense_kv_efficiency;
        let extra = 1.0 / self.reuse_kv_efficiency(skip_prob) - dense;
        1.0 / (dense + self.contention * extra * context / self.reference_context)
    }

    fn bubble(&self, elements: f64) -> f64 {
        self.nonlinear_cycles_per_element * elements / self.nonlinear_lanes
    }
}

fn check_skip(p: f64) -> Result<(), RunnerError> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(RunnerError::Invalid(format!("skip probability {p} outside [0, 1)")))
    }
}

/// Modeled cycles of one attention block over a `len`-token prompt.
pub fn prefill_cycles(len: usize, variant: Variant, perf: &PerfParams, skip_prob: f64) -> Result<f64, RunnerError> {
    perf.validate()?;
    check_skip(skip_prob)?;
    let l = len as f64;
    let d = perf.d_model as f64;
    let keep = 1.0 - skip_prob;
    let queries = if variant == Variant::Baseline { l } else { keep * l };
    let kv_rows = if variant.generates_all_kv() { l } else { keep * l };
    let bw = perf.bytes_per_cycle();

    let proj_compute = (2.0 * queries + 2.0 * kv_rows) * d * d / perf.pe_macs_per_cycle;
    let proj_memory = 4.0 * d * d * perf.weight_bytes_per_param / bw;
    let projections = proj_compute.max(proj_memory);

    let cf = perf.causal_fraction;
    let heads = perf.n_heads as f64;
    let dh = perf.d_head as f64;
    let score_compute = 2.0 * heads * queries * l * dh * cf / perf.pe_macs_per_cycle;
    let mut kv_bytes = heads * 2.0 * l * dh * perf.kv_bytes_per_elem * (queries / perf.query_block_rows) * cf;
    if variant.fused() {
        kv_bytes /= perf.head_packing;
    }
    let eff = if variant.generates_all_kv() { perf.dense_kv_efficiency } else { perf.reuse_kv_efficiency(skip_prob) };
    let attention = score_compute.max(kv_bytes / (bw * eff));

    let bubbles = if variant.fused() {
        0.0
    } else {
        // Statistics over every row, normalization of the rows that produce Q or K/V, then
        // one pass per score row.
        perf.bubble(l * d + kv_rows * d) + perf.bubble(heads * queries * l * cf)
    };
    Ok(projections + attention + bubbles)
}

/// Modeled cycles of one decode step at `context` tokens, averaged over layers.
pub fn decode_step_cycles(
    context: usize,
    variant: Variant,
    perf: &PerfParams,
    skip_prob: f64,
) -> Result<f64, RunnerError> {
    perf.validate()?;
    check_skip(skip_prob)?;
    let n = context as f64;
    let d = perf.d_model as f64;
    let bw = perf.bytes_per_cycle();
    let keep = 1.0 - skip_prob;
    let weights = 4.0 * d * d * perf.weight_bytes_per_param;
    let kv_weights = 2.0 * d * d * perf.weight_bytes_per_param;
    let kv_bytes = n * 2.0 * d * perf.kv_bytes_per_elem;
    let heads = perf.n_heads as f64;

    let projections = (4.0 * d * d / perf.pe_macs_per_cycle).max(weights / bw);
    let scores = 2.0 * n * d / perf.pe_macs_per_cycle;
    let executed = |eff: f64, bubbles: bool| {
        let b = if bubbles { perf.bubble(2.0 * d + heads * n) } else { 0.0 };
        projections + scores.max(kv_bytes / (bw * eff)) + b
    };
    let dense_eff = perf.dense_kv_efficiency;
    let reuse_eff = perf.reuse_kv_efficiency_at(skip_prob, n);
    Ok(match variant {
        Variant::Baseline => executed(dense_eff, true),
        Variant::PartialSkip => {
            let kv_only = (2.0 * d * d / perf.pe_macs_per_cycle).max(kv_weights / bw) + perf.bubble(2.0 * d);
            keep * executed(dense_eff, true) + skip_prob * kv_only
        }
        Variant::KvReuse => keep * executed(reuse_eff, true) + skip_prob * perf.bubble(d),
        Variant::KvReuseOpt => keep * executed(reuse_eff, false),
    })
}

/// Total decode cycles over `workload.decode_len` steps after a `workload.prefill_len` prompt.
pub fn decode_cycles(
    workload: Workload,
    variant: Variant,
    perf: &PerfParams,
    skip_prob: f64,
) -> Result<f64, RunnerError> {
    (0..workload.decode_len).map(|s| decode_step_cycles(workload.prefill_len + s + 1, variant, perf, skip_prob)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupEntry {
    pub phase: Phase,
    pub prefill_len: usize,
    /// Zero for prefill rows.
    pub decode_len: usize,
    pub variant: Variant,
    pub cycles: f64,
    pub speedup: f64,
}

pub const SPEEDUP_CSV_HEADER: &str = "phase,prefill_len,decode_len,variant,cycles,speedup";

impl SpeedupEntry {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{:.4}",
            self.phase, self.prefill_len, self.decode_len, self.variant, self.cycles, self.speedup
        )
    }
}

/// One modeled cell with its speedup over the Baseline variant.
pub fn mha_speedup_model(
    phase: Phase,
    workload: Workload,
    variant: Variant,
    perf: &PerfParams,
    skip_prob: f64,
) -> Result<SpeedupEntry, RunnerError> {
    let cycles = |v| match phase {
        Phase::Prefill => prefill_cycles(workload.prefill_len, v, perf, skip_prob),
        Phase::Decode => decode_cycles(workload, v, perf, skip_prob),
    };
    let own = cycles(variant)?;
    let base = cycles(Variant::Baseline)?;
    Ok(SpeedupEntry {
        phase,
        prefill_len: workload.prefill_len,
        decode_len: if phase == Phase::Decode { workload.decode_len } else { 0 },
        variant,
        cycles: own,
        speedup: base / own,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeedupReport {
    pub entries: Vec<SpeedupEntry>,
}

impl SpeedupReport {
    pub fn get(&self, phase: Phase, prefill_len: usize, decode_len: usize, variant: Variant) -> Option<&SpeedupEntry> {
        self.entries.iter().find(|e| {
            e.phase == phase && e.prefill_len == prefill_len && e.decode_len == decode_len && e.variant == variant
        })
    }

    /// Decode-phase speedup of KV reuse minus that of partial skip.
    pub fn decode_gap(&self, workload: Workload) -> Option<f64> {
        let s = |v| self.get(Phase::Decode, workload.prefill_len, workload.decode_len, v).map(|e| e.speedup);
        Some(s(Variant::KvReuse)? - s(Variant::PartialSkip)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SPEEDUP_CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(out, "{}", e.to_csv());
        }
        out
    }
}

/// Decode-phase cells for every workload and variant.
pub fn decode_speedup_trend(
    workloads: &[Workload],
    variants: &[Variant],
    perf: &PerfParams,
    skip_prob: f64,
) -> Result<SpeedupReport, RunnerError> {
    let mut entries = Vec::new();
    for &w in workloads {
        for &v in variants {
            entries.push(mha_speedup_model(Phase::Decode, w, v, perf, skip_prob)?);
        }
    }
    Ok(SpeedupReport { entries })
}

/// Prefill rows for every standard prompt length, then decode rows for every standard decode
/// length after a [`DECODE_CONTEXT`]-token prompt.
pub fn speedup_grid(perf: &PerfParams, skip_prob: f64) -> Result<SpeedupReport, RunnerError> {
    let mut entries = Vec::new();
    for len in PREFILL_LENGTHS {
        for v in Variant::ALL {
            entries.push(mha_speedup_model(
                Phase::Prefill,
                Workload { prefill_len: len, decode_len: 0 },
                v,
                perf,
                skip_prob,
            )?);
        }
    }
    let decode: Vec<Workload> =
        DECODE_LENGTHS.iter().map(|&n| Workload { prefill_len: DECODE_CONTEXT, decode_len: n }).collect();
    entries.extend(decode_speedup_trend(&decode, &Variant::ALL, perf, skip_prob)?.entries);
    Ok(SpeedupReport { entries })
}

/// Bisects the per-element nonlinear cost so the fully optimized variant reaches `target`
/// at prefill length `len`. The speedup grows with the cost, since only the other variants pay it.
pub fn calibrate_nonlinear_cost(
    perf: &PerfParams,
    skip_prob: f64,
    len: usize,
    target: f64,
) -> Result<f64, RunnerError> {
    let speedup = |c: f64| -> Result<f64, RunnerError> {
        let p = PerfParams { nonlinear_cycles_per_element: c, ..perf.clone() };
        Ok(prefill_cycles(len, Variant::Baseline, &p, skip_prob)?
            / prefill_cycles(len, Variant::KvReuseOpt, &p, skip_prob)?)
    };
    let (mut lo, mut hi) = (0.0, 64.0);
    if speedup(lo)? > target || speedup(hi)? < target {
        return Err(RunnerError::Invalid(format!("speedup {target} unreachable by the nonlinear cost alone")));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if speedup(mid)? < target {
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

    fn prefill_speedup(len: usize, v: Variant, perf: &PerfParams, p: f64) -> f64 {
        prefill_cycles(len, Variant::Baseline, perf, p).unwrap() / prefill_cycles(len, v, perf, p).unwrap()
    }

    #[test]
    fn frozen_cost_matches_calibration() {
        let c = calibrate_nonlinear_cost(&PerfParams::default(), 0.25, 512, 1.40).unwrap();
        assert!((c - CALIBRATED_NONLINEAR_CYCLES).abs() < 5e-4, "{c}");
    }

    #[test]
    fn efficiency_interpolation() {
        let perf = PerfParams::default();
        assert!((perf.reuse_kv_efficiency(0.25) - 0.783).abs() < 1e-12);
        assert!((perf.reuse_kv_efficiency(0.0) - 0.887).abs() < 1e-12);
        assert!((perf.reuse_kv_efficiency_at(0.25, 1024.0) - 0.783).abs() < 1e-12);
        let flat = PerfParams { contention: 0.0, ..perf };
        assert_eq!(flat.reuse_kv_efficiency_at(0.25, 4000.0), flat.dense_kv_efficiency);
    }

    #[test]
    fn no_skips_no_change_without_fusion() {
        let perf = PerfParams::default();
        for v in [Variant::PartialSkip, Variant::KvReuse] {
            assert!((prefill_speedup(256, v, &perf, 0.0) - 1.0).abs() < 1e-12);
            let w = Workload { prefill_len: 128, decode_len: 64 };
            let base = decode_cycles(w, Variant::Baseline, &perf, 0.0).unwrap();
            assert!((decode_cycles(w, v, &perf, 0.0).unwrap() - base).abs() < 1e-6 * base);
        }
    }

    #[test]
    fn variants_monotone_over_skip_rates() {
        let perf = PerfParams::default();
        for &p in &[0.01, 0.1, 0.25, 0.4, 0.6, 0.9, 0.99] {
            for len in PREFILL_LENGTHS {
                let c: Vec<f64> = Variant::ALL.iter().map(|&v| prefill_cycles(len, v, &perf, p).unwrap()).collect();
                assert!(c.windows(2).all(|w| w[1] <= w[0]), "prefill {len} p={p}: {c:?}");
            }
            for n in DECODE_LENGTHS {
                let w = Workload { prefill_len: DECODE_CONTEXT, decode_len: n };
                let c: Vec<f64> = Variant::ALL.iter().map(|&v| decode_cycles(w, v, &perf, p).unwrap()).collect();
                assert!(c.windows(2).all(|w| w[1] <= w[0]), "decode {n} p={p}: {c:?}");
            }
        }
    }

    #[test]
    fn cycle_saving_constant_without_contention() {
        let perf = PerfParams { contention: 0.0, ..Default::default() };
        let saving = |n| {
            decode_step_cycles(n, Variant::PartialSkip, &perf, 0.25).unwrap()
                - decode_step_cycles(n, Variant::KvReuse, &perf, 0.25).unwrap()
        };
        let first = saving(128);
        assert!(first > 0.0);
        for n in [256, 700, 1152, 4000] {
            assert!((saving(n) - first).abs() < 1e-9 * first, "{n}");
        }
    }

    #[test]
    fn gap_narrows_with_contention() {
        let report = speedup_grid(&PerfParams::default(), 0.25).unwrap();
        let g = |n| report.decode_gap(Workload { prefill_len: DECODE_CONTEXT, decode_len: n }).unwrap();
        assert!(g(1024) < g(512), "{} vs {}", g(1024), g(512));
        assert!(g(1024) > 0.0);
    }

    #[test]
    fn csv_shape() {
        let csv = speedup_grid(&PerfParams::default(), 0.25).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SPEEDUP_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 4 * 4 + 2 * 4);
        assert!(lines[1].starts_with("prefill,128,0,baseline,"));
        assert!(lines[1].ends_with(",1.0000"));
        assert_eq!("kv_reuse_opt".parse::<Variant>().unwrap(), Variant::KvReuseOpt);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(prefill_cycles(128, Variant::Baseline, &PerfParams::default(), 1.0).is_err());
        let bad = PerfParams { skip_kv_efficiency: 0.95, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}

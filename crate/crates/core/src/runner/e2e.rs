use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataflow::{DeviceEngine, ExactEngine, Submodule};
use crate::kvsim::{
    kv_storage_accounting, simulate_sequence, BandwidthReport, SimConfig, REPORT_CELLS, REPORT_CSV_HEADER,
};
use crate::numerics::PeImpl;

use super::config::{ConfigFile, ModelConfig, NumericMode};
use super::infer::{run_decode, run_prefill, InferenceState, RunOptions};
use super::model::build_toy_model;
use super::RunnerError;

#[derive(Clone, Debug, PartialEq)]
pub struct E2eConfig {
    pub model: ModelConfig,
    pub prefill_len: usize,
    pub decode_steps: usize,
    /// Precision of the run that produces the trace.
    pub mode: NumericMode,
    pub pe_impl: PeImpl,
    pub sim: SimConfig,
}

impl Default for E2eConfig {
    fn default() -> Self {
        E2eConfig {
            model: ModelConfig::default(),
            prefill_len: 64,
            decode_steps: 32,
            mode: NumericMode::Wide,
            pe_impl: PeImpl::Impl1,
            sim: SimConfig::default(),
        }
    }
}

impl E2eConfig {
    pub fn apply(&mut self, file: &mut ConfigFile) -> Result<(), RunnerError> {
        file.take_into("prefill_len", &mut self.prefill_len)?;
        file.take_into("decode_steps", &mut self.decode_steps)?;
        self.model.apply(file)
    }

    pub fn to_config_text(&self) -> String {
        format!(
            "{}prefill_len = {}\ndecode_steps = {}\nmode = {}\npe_impl = {}\n",
            self.model.to_config_text(),
            self.prefill_len,
            self.decode_steps,
            self.mode,
            self.pe_impl.name()
        )
    }
}

/// Relative difference of device-mode hidden states from wide mode at one layer boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    /// Input of this layer; `n_layers` is the final output.
    pub layer: usize,
    /// `||device - wide|| / ||wide||` over all prompt tokens.
    pub rel_error: f64,
    /// Routing decisions (both submodules) that differ at this layer.
    pub route_mismatches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2eOutputs {
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
    pub trace_text: String,
    pub bandwidth: Vec<BandwidthReport>,
    pub storage_reduction_pct: f64,
    pub drift: Vec<DriftRow>,
    pub bandwidth_csv: String,
    pub storage_csv: String,
    pub drift_csv: String,
}

pub const STORAGE_CSV_HEADER: &str =
    "tokens,layers,stored_entries,dense_entries,stored_bytes,dense_bytes,reduction_pct";
pub const DRIFT_CSV_HEADER: &str = "layer,rel_error,route_mismatches";

/// Seeded uniform prompt over the vocabulary.
pub fn synthetic_prompt(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn drift(wide: &InferenceState<f64>, device: &InferenceState<f32>, n_layers: usize) -> Vec<DriftRow> {
    let (wm, dm) = (wide.route_mask(), device.route_mask());
    let tokens = wide.n_tokens().min(device.n_tokens());
    (0..=n_layers)
        .map(|layer| {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for t in 0..tokens {
                for (&w, &d) in wide.hidden[layer][t].iter().zip(&device.hidden[layer][t]) {
                    num += (d as f64 - w).powi(2);
                    den += w * w;
                }
            }
            let route_mismatches = if layer < n_layers {
                (0..tokens)
                    .map(|t| {
                        [Submodule::Mha, Submodule::Ffn]
                            .iter()
                            .filter(|&&s| wm.executes(layer, s, t) != dm.executes(layer, s, t))
                            .count()
                    })
                    .sum()
            } else {
                0
            };
            DriftRow { layer, rel_error: if den > 0.0 { (num / den).sqrt() } else { 0.0 }, route_mismatches }
        })
        .collect()
}

/// Builds the toy model, runs prefill and decode, and derives every report from that one run.
/// Drift compares the prompt pass in binary32 through the PE column against binary64.
pub fn run_e2e(cfg: &E2eConfig) -> Result<E2eOutputs, RunnerError> {
    if cfg.prefill_len == 0 {
        return Err(RunnerError::Invalid("prefill_len must be positive".into()));
    }
    let wide_model = build_toy_model(&cfg.model)?;
    let device_model = wide_model.cast::<f32>()?;
    let device_engine = DeviceEngine { implementation: cfg.pe_impl };
    let prompt = synthetic_prompt(cfg.prefill_len, cfg.model.vocab_size, cfg.model.seed);
    let opts = RunOptions::default();

    let mut wide = InferenceState::new(&wide_model);
    run_prefill(&wide_model, &mut wide, &prompt, &ExactEngine, opts)?;
    let mut device = InferenceState::new(&device_model);
    run_prefill(&device_model, &mut device, &prompt, &device_engine, opts)?;
    let drift_rows = drift(&wide, &device, cfg.model.n_layers);

    let (generated, trace, mask) = match cfg.mode {
        NumericMode::Wide => {
            let g = run_decode(&wide_model, &mut wide, cfg.decode_steps, &ExactEngine, opts)?;
            (g, wide.access_trace()?, wide.route_mask())
        }
        NumericMode::Device => {
            let g = run_decode(&device_model, &mut device, cfg.decode_steps, &device_engine, opts)?;
            (g, device.access_trace()?, device.route_mask())
        }
    };
    trace.validate()?;

    let mut bandwidth = Vec::new();
    if cfg.decode_steps > 0 {
        for (policy, buffer) in REPORT_CELLS {
            bandwidth.push(simulate_sequence(&trace, policy, buffer, &cfg.sim)?);
        }
    }
    let storage = kv_storage_accounting(&mask, mask.n_tokens(), cfg.sim.geometry.entry_bytes())?;

    let mut bandwidth_csv = format!("{REPORT_CSV_HEADER}\n");
    for r in &bandwidth {
        let _ = writeln!(bandwidth_csv, "{}", r.to_csv());
    }
    let storage_csv = format!(
        "{STORAGE_CSV_HEADER}\n{},{},{},{},{},{},{:.3}\n",
        storage.tokens,
        mask.n_layers(),
        storage.stored_entries,
        storage.dense_entries,
        storage.stored_bytes(),
        storage.dense_bytes(),
        storage.reduction_pct()
    );
    let mut drift_csv = format!("{DRIFT_CSV_HEADER}\n");
    for d in &drift_rows {
        let _ = writeln!(drift_csv, "{},{:.6e},{}", d.layer, d.rel_error, d.route_mismatches);
    }
    Ok(E2eOutputs {
        prompt,
        generated,
        trace_text: trace.to_text(),
        bandwidth,
        storage_reduction_pct: storage.reduction_pct(),
        drift: drift_rows,
        bandwidth_csv,
        storage_csv,
        drift_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvsim::{AccessTrace, MappingPolicy};

    fn small() -> E2eConfig {
        E2eConfig {
            prefill_len: 24,
            decode_steps: 6,
            model: ModelConfig { n_layers: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn reports_are_consistent() {
        let out = run_e2e(&small()).unwrap();
        let trace = AccessTrace::parse(&out.trace_text).unwrap();
        assert_eq!((trace.context_len, trace.steps()), (24, 6));
        assert_eq!(out.bandwidth.len(), 4);
        assert_eq!(out.drift.len(), 5);
        assert_eq!(out.drift[0].rel_error, out.drift[0].rel_error.min(1e-3));
        assert!(out.drift.iter().all(|d| d.rel_error.is_finite()));
        assert_eq!(out.bandwidth_csv.lines().count(), 5);
        assert!(out.storage_reduction_pct > 0.0);
    }

    #[test]
    fn dense_run_stores_everything() {
        let mut cfg = small();
        cfg.model.skip_prob = 0.0;
        let out = run_e2e(&cfg).unwrap();
        assert_eq!(out.storage_reduction_pct, 0.0);
        let dense = &out.bandwidth[0];
        assert_eq!(dense.policy, MappingPolicy::DenseInterleaved);
        assert_eq!(dense.hbm_read_bytes, out.bandwidth[2].hbm_read_bytes);
        assert_eq!(out.bandwidth[3].buffer_bytes, 0);
    }

    #[test]
    fn byte_identical_reruns() {
        let a = run_e2e(&small()).unwrap();
        assert_eq!(a, run_e2e(&small()).unwrap());
    }
}

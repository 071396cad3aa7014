use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use super::fp16::{encode_fp16_saturating, Fp16Bits, Int4Val};
use super::pe::{pe_dot_pair, PeColumnConfig, PeImpl, PeMode, Weights};
use super::NumericsError;

/// Input distribution of an error sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distribution {
    /// Uniform on [-1, 1] for activations and FP16 weights, uniform integers for INT4 weights.
    Random,
    /// Gaussian activations and heavy-tailed mixture weights resembling trained LLM layers.
    Empirical,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::Random => "random",
            Distribution::Empirical => "empirical",
        }
    }
}

pub fn mode_name(mode: PeMode) -> &'static str {
    match mode {
        PeMode::Fp16Fp16 => "fp16_fp16",
        PeMode::Fp16Int4 => "fp16_int4",
    }
}

/// Parameters of the empirical distribution.
pub const EMPIRICAL_ACT_STD: f64 = 1.0;
pub const EMPIRICAL_WEIGHT_STD: f64 = 0.02;
pub const EMPIRICAL_OUTLIER_STD: f64 = 0.1;
pub const EMPIRICAL_OUTLIER_PROB: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorStats {
    pub mean_rel_err_pct: f64,
    pub max_rel_err_pct: f64,
    /// Trials that entered the mean (zero references are excluded).
    pub counted: usize,
}

/// Mean and max of `|y - ref| / |ref|` in percent, skipping zero references.
pub fn error_metric(results: &[f64], reference: &[f64]) -> Result<ErrorStats, NumericsError> {
    if results.len() != reference.len() {
        return Err(NumericsError::LengthMismatch { expected: reference.len(), got: results.len() });
    }
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for (&y, &r) in results.iter().zip(reference) {
        if r == 0.0 {
            continue;
        }
        let e = ((y - r) / r).abs() * 100.0;
        sum += e;
        max = max.max(e);
        n += 1;
    }
    if n == 0 {
        return Err(NumericsError::EmptyMetric);
    }
    Ok(ErrorStats { mean_rel_err_pct: sum / n as f64, max_rel_err_pct: max, counted: n })
}

/// Sequential fused multiply-add with an FP16 rounding after every step.
pub fn naive_mac(x: &[Fp16Bits], w: &[f64]) -> Fp16Bits {
    let mut acc = Fp16Bits::ZERO;
    for (a, &b) in x.iter().zip(w) {
        acc = encode_fp16_saturating(acc.to_f64() + a.to_f64() * b).expect("finite accumulator");
    }
    acc
}

#[derive(Clone, Debug)]
pub struct Trial {
    pub x: Vec<Fp16Bits>,
    pub w_fp16: Vec<Fp16Bits>,
    pub w_int4: Vec<Int4Val>,
}

impl Trial {
    pub fn weights(&self, mode: PeMode) -> Weights<'_> {
        match mode {
            PeMode::Fp16Fp16 => Weights::Fp16(&self.w_fp16),
            PeMode::Fp16Int4 => Weights::Int4(&self.w_int4),
        }
    }

    pub fn weight_values(&self, mode: PeMode) -> Vec<f64> {
        match mode {
            PeMode::Fp16Fp16 => self.w_fp16.iter().map(|w| w.to_f64()).collect(),
            PeMode::Fp16Int4 => self.w_int4.iter().map(|w| w.value() as f64).collect(),
        }
    }

    /// Exact dot product of the stored operands.
    pub fn reference(&self, mode: PeMode) -> f64 {
        self.x.iter().zip(self.weight_values(mode)).map(|(a, b)| a.to_f64() * b).sum()
    }
}

fn fp16_flushed(v: f64) -> Fp16Bits {
    encode_fp16_saturating(v).expect("finite sample").flush_subnormal().0
}

fn mixture_weight(rng: &mut ChaCha8Rng) -> f64 {
    let std = if rng.random::<f64>() < EMPIRICAL_OUTLIER_PROB { EMPIRICAL_OUTLIER_STD } else { EMPIRICAL_WEIGHT_STD };
    Normal::new(0.0, std).expect("valid std").sample(rng)
}

/// Draws one trial. Empirical INT4 weights are the symmetric 4-bit quantization of mixture weights.
pub fn sample_trial(rng: &mut ChaCha8Rng, depth: usize, dist: Distribution) -> Trial {
    match dist {
        Distribution::Random => {
            let x = (0..depth).map(|_| fp16_flushed(rng.random_range(-1.0..=1.0))).collect();
            let w_fp16 = (0..depth).map(|_| fp16_flushed(rng.random_range(-1.0..=1.0))).collect();
            let w_int4 = (0..depth).map(|_| Int4Val::new(rng.random_range(-8..=7)).unwrap()).collect();
            Trial { x, w_fp16, w_int4 }
        }
        Distribution::Empirical => {
            let act = Normal::new(0.0, EMPIRICAL_ACT_STD).expect("valid std");
            let x = (0..depth).map(|_| fp16_flushed(act.sample(rng))).collect();
            let raw: Vec<f64> = (0..depth).map(|_| mixture_weight(rng)).collect();
            let w_fp16 = raw.iter().map(|&w| fp16_flushed(w)).collect();
            let amax = raw.iter().fold(0.0f64, |m, w| m.max(w.abs()));
            let scale = if amax > 0.0 { amax / 7.0 } else { 1.0 };
            let w_int4 =
                raw.iter().map(|&w| Int4Val::new((w / scale).round().clamp(-8.0, 7.0) as i8).unwrap()).collect();
            Trial { x, w_fp16, w_int4 }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub trials: usize,
    pub seed: u64,
    pub depth: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { trials: 100_000, seed: 1, depth: super::pe::DEFAULT_DEPTH }
    }
}

/// One CSV row of the error sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub implementation: String,
    pub mode: PeMode,
    pub distribution: Distribution,
    pub trials: usize,
    pub mean_rel_err_pct: f64,
    pub max_rel_err_pct: f64,
    pub seed: u64,
}

pub const NAIVE_NAME: &str = "NAIVE_MAC";
pub const CSV_HEADER: &str = "impl,mode,distribution,trials,mean_rel_err_pct,max_rel_err_pct,seed";

impl ErrorRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{}",
            self.implementation,
            mode_name(self.mode),
            self.distribution.name(),
            self.trials,
            self.mean_rel_err_pct,
            self.max_rel_err_pct,
            self.seed
        )
    }
}

/// Raw per-trial outputs of every implementation on one shared sample.
#[derive(Clone, Debug)]
pub struct SweepSample {
    pub reference: Vec<f64>,
    pub outputs: Vec<(PeImpl, Vec<Fp16Bits>)>,
    pub naive: Vec<Fp16Bits>,
}

/// Seed of one (mode, distribution) cell, so cells can be evaluated independently.
pub fn cell_seed(seed: u64, mode: PeMode, dist: Distribution) -> u64 {
    let m = matches!(mode, PeMode::Fp16Int4) as u64;
    let d = matches!(dist, Distribution::Empirical) as u64;
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (m << 1 | d)
}

pub fn sweep_cell(
    cfg: &SweepConfig,
    mode: PeMode,
    dist: Distribution,
    impls: &[PeImpl],
) -> Result<SweepSample, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.seed, mode, dist));
    let mut reference = Vec::with_capacity(cfg.trials);
    let mut naive = Vec::with_capacity(cfg.trials);
    let mut outputs: Vec<(PeImpl, Vec<Fp16Bits>)> =
        impls.iter().map(|&i| (i, Vec::with_capacity(cfg.trials))).collect();
    for _ in 0..cfg.trials {
        let trial = sample_trial(&mut rng, cfg.depth, dist);
        reference.push(trial.reference(mode));
        naive.push(naive_mac(&trial.x, &trial.weight_values(mode)));
        for (imp, out) in outputs.iter_mut() {
            let pe = PeColumnConfig { depth: cfg.depth, mode, implementation: *imp };
            let w = trial.weights(mode);
            out.push(pe_dot_pair(&trial.x, w, w, &pe)?[0].value);
        }
    }
    Ok(SweepSample { reference, outputs, naive })
}

pub fn sample_rows(
    cfg: &SweepConfig,
    mode: PeMode,
    dist: Distribution,
    sample: &SweepSample,
) -> Result<Vec<ErrorRow>, NumericsError> {
    let row = |name: &str, values: &[Fp16Bits]| -> Result<ErrorRow, NumericsError> {
        let y: Vec<f64> = values.iter().map(|v| v.to_f64()).collect();
        let stats = error_metric(&y, &sample.reference)?;
        Ok(ErrorRow {
            implementation: name.to_string(),
            mode,
            distribution: dist,
            trials: cfg.trials,
            mean_rel_err_pct: stats.mean_rel_err_pct,
            max_rel_err_pct: stats.max_rel_err_pct,
            seed: cfg.seed,
        })
    };
    let mut rows = Vec::new();
    for (imp, out) in &sample.outputs {
        rows.push(row(imp.name(), out)?);
    }
    rows.push(row(NAIVE_NAME, &sample.naive)?);
    Ok(rows)
}

/// Full sweep over modes and distributions, in a fixed row order.
pub fn run_sweep(
    cfg: &SweepConfig,
    impls: &[PeImpl],
    modes: &[PeMode],
    dists: &[Distribution],
) -> Result<Vec<ErrorRow>, NumericsError> {
    let mut rows = Vec::new();
    for &mode in modes {
        for &dist in dists {
            let sample = sweep_cell(cfg, mode, dist, impls)?;
            rows.extend(sample_rows(cfg, mode, dist, &sample)?);
        }
    }
    Ok(rows)
}

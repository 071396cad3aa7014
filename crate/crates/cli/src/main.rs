//! `opu`: seeded validation suites and experiments, each writing CSV reports plus a
//! `<command>.config` file holding the fully resolved settings.
//!
//! Settings come from built-in defaults, then `--config FILE` (`key = value` lines), then flags.
//! Exit status: 0 when every check passes, 1 on a property failure, 2 on a configuration,
//! parse or I/O error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use opu_core::dataflow::{equivalence_suite, results_csv, CheckConfig, TileSpec};
use opu_core::kvsim::{
    calibrate_penalty, simulate_sequence, AccessTrace, SimConfig, SyntheticTraceConfig, REPORT_CELLS, REPORT_CSV_HEADER,
};
use opu_core::numerics::sweep::{sample_rows, sweep_cell, Distribution, SweepConfig, CSV_HEADER, NAIVE_NAME};
use opu_core::numerics::{PeImpl, PeMode};
use opu_core::runner::{
    calibrate_nonlinear_cost, run_e2e, speedup_grid, ConfigFile, E2eConfig, NumericMode, PerfParams, Phase, Variant,
    CALIBRATION_PREFILL_LEN, CALIBRATION_TARGET_SPEEDUP,
};

/// Dense-layout HBM utilization the page-miss penalty is calibrated to.
const DENSE_TARGET_UTIL_PCT: f64 = 88.7;

#[derive(Parser, Debug)]
#[command(name = "opu", version, about = "Layer-skipping LLM overlay accelerator: validation suites and experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed of every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Numeric mode of value-level computation.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<NumericMode>,
    /// Worker threads for independent cells.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

fn parse_mode(s: &str) -> Result<NumericMode, String> {
    s.parse()
}

fn parse_impl(s: &str) -> Result<PeImpl, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Error sweep of the PE column implementations against a chained FP16 MAC.
    PeValidate {
        /// Implementations to run (repeatable); all three by default.
        #[arg(long = "impl", value_parser = parse_impl)]
        impls: Vec<PeImpl>,
        /// Random dot products per cell [default: 100000].
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Fused-versus-reference and tiling-invariance properties of the dataflow kernels.
    DataflowCheck {
        /// Square tile sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        tiles: Vec<usize>,
        /// Random instances per property [default: 100].
        #[arg(long)]
        seeds: Option<u64>,
        /// Corrupt one spilled score tile; the attention property must then fail.
        #[arg(long)]
        inject_fault: bool,
        /// PE column used in device mode [default: IMPL1].
        #[arg(long = "impl", value_parser = parse_impl)]
        pe_impl: Option<PeImpl>,
    },
    /// KV cache bandwidth per (mapping policy, buffer) cell.
    KvBandwidth {
        /// Generate a Bernoulli-mask trace (the default without --trace).
        #[arg(long, conflicts_with = "trace")]
        synthetic: bool,
        /// Replay a trace file instead.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Calibrate the page-miss penalty on the dense version of the trace shape first.
        #[arg(long)]
        calibrate: bool,
    },
    /// Modeled attention speedups per workload and variant.
    Speedup {
        /// Re-derive the nonlinear cost from the prefill-512 target first.
        #[arg(long)]
        calibrate: bool,
    },
    /// Toy model end to end: trace, bandwidth, storage and numeric drift reports.
    E2e {
        /// PE column used in device mode [default: IMPL1].
        #[arg(long = "impl", value_parser = parse_impl)]
        pe_impl: Option<PeImpl>,
    },
}

enum Outcome {
    Pass,
    Fail(String),
}

struct Run {
    common: Common,
    file: ConfigFile,
}

impl Run {
    fn seed(&mut self) -> Result<u64> {
        let from_file: Option<u64> = self.file.take("seed")?;
        Ok(self.common.seed.or(from_file).unwrap_or(1))
    }

    fn mode(&mut self) -> Result<NumericMode> {
        let from_file: Option<NumericMode> = self.file.take("mode")?;
        Ok(self.common.mode.or(from_file).unwrap_or_default())
    }

    /// Rejects config keys no setting consumed.
    fn finish(&mut self) -> Result<()> {
        std::mem::take(&mut self.file).finish()?;
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        if self.common.parallel == 0 {
            bail!("--parallel must be at least 1");
        }
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.common.parallel).build()?)
    }
}

/// Writes through a temporary file in the same directory, then renames into place.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.persist(dir.join(name)).with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn impl_list(impls: &[PeImpl]) -> String {
    impls.iter().map(|i| i.name()).collect::<Vec<_>>().join(",")
}

fn pe_validate(mut run: Run, impls: Vec<PeImpl>, trials: Option<usize>) -> Result<Outcome> {
    let seed = run.seed()?;
    let file_trials: Option<usize> = run.file.take("trials")?;
    let file_impls: Option<String> = run.file.take("impls")?;
    run.finish()?;
    let impls = if !impls.is_empty() {
        impls
    } else if let Some(list) = file_impls {
        list.split(',').map(|s| parse_impl(s.trim()).map_err(anyhow::Error::msg)).collect::<Result<_>>()?
    } else {
        PeImpl::ALL.to_vec()
    };
    let mut impls_dedup = Vec::new();
    for i in impls {
        if !impls_dedup.contains(&i) {
            impls_dedup.push(i);
        }
    }
    let impls = impls_dedup;
    let cfg = SweepConfig { trials: trials.or(file_trials).unwrap_or(100_000), seed, ..Default::default() };
    if cfg.trials == 0 {
        bail!("trials must be positive");
    }
    let cells: Vec<(PeMode, Distribution)> = [PeMode::Fp16Fp16, PeMode::Fp16Int4]
        .into_iter()
        .flat_map(|m| [Distribution::Random, Distribution::Empirical].map(|d| (m, d)))
        .collect();
    let samples = run
        .pool()?
        .install(|| cells.par_iter().map(|&(m, d)| sweep_cell(&cfg, m, d, &impls)).collect::<Result<Vec<_>, _>>())?;

    let mut csv = format!("{CSV_HEADER}\n");
    let mut failures = Vec::new();
    for (&(mode, dist), sample) in cells.iter().zip(&samples) {
        let rows = sample_rows(&cfg, mode, dist, sample)?;
        for r in &rows {
            csv.push_str(&r.to_csv());
            csv.push('\n');
        }
        let err = |name: &str| rows.iter().find(|r| r.implementation == name).map(|r| r.mean_rel_err_pct);
        let cell = format!("{}/{}", opu_core::numerics::sweep::mode_name(mode), dist.name());
        if let (Some(e1), Some(e2)) = (err("IMPL1"), err("IMPL2")) {
            if e1 > e2 {
                failures.push(format!("{cell}: IMPL1 error {e1:.4}% above IMPL2 {e2:.4}%"));
            }
        }
        let bits = |i: PeImpl| sample.outputs.iter().find(|(x, _)| *x == i).map(|(_, v)| v);
        if let (Some(b2), Some(b3)) = (bits(PeImpl::Impl2), bits(PeImpl::Impl3)) {
            if b2 != b3 {
                failures.push(format!("{cell}: IMPL2 and IMPL3 differ"));
            }
        }
        let naive = err(NAIVE_NAME).unwrap_or(f64::INFINITY);
        for i in &impls {
            if let Some(e) = err(i.name()) {
                if e >= naive {
                    failures.push(format!("{cell}: {} error {e:.4}% not below the chained MAC {naive:.4}%", i.name()));
                }
            }
        }
    }
    let out = &run.common.out;
    write_atomic(out, "pe_validate.csv", &csv)?;
    write_atomic(
        out,
        "pe_validate.config",
        &format!("seed = {seed}\ntrials = {}\nimpls = {}\n", cfg.trials, impl_list(&impls)),
    )?;
    Ok(if failures.is_empty() { Outcome::Pass } else { Outcome::Fail(failures.join("\n")) })
}

fn dataflow_check(
    mut run: Run,
    tiles: Vec<usize>,
    seeds: Option<u64>,
    inject_fault: bool,
    pe_impl: Option<PeImpl>,
) -> Result<Outcome> {
    let seed = run.seed()?;
    let mode = run.mode()?;
    let mut cfg =
        CheckConfig { first_seed: seed, device: mode == NumericMode::Device, inject_fault, ..Default::default() };
    run.file.take_into("seeds", &mut cfg.seeds)?;
    run.file.take_into("rows", &mut cfg.rows)?;
    run.file.take_into("width", &mut cfg.width)?;
    run.file.take_into("heads", &mut cfg.n_heads)?;
    let file_tiles: Option<String> = run.file.take("tiles")?;
    let file_impl: Option<String> = run.file.take("pe_impl")?;
    run.finish()?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let sizes: Vec<usize> = if !tiles.is_empty() {
        tiles
    } else if let Some(t) = file_tiles {
        t.split(',').map(|s| s.trim().parse::<usize>().context("tile size")).collect::<Result<_>>()?
    } else {
        vec![4, 8, 16]
    };
    cfg.tilings = sizes.iter().map(|&n| TileSpec::square(n)).collect::<Result<_, _>>()?;
    cfg.pe_impl = match (pe_impl, file_impl) {
        (Some(i), _) => i,
        (None, Some(s)) => parse_impl(&s).map_err(anyhow::Error::msg)?,
        (None, None) => PeImpl::Impl1,
    };
    let results = equivalence_suite(&cfg)?;
    let out = &run.common.out;
    write_atomic(out, "dataflow_check.csv", &results_csv(&results))?;
    let tiles_text = sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
    write_atomic(
        out,
        "dataflow_check.config",
        &format!(
            "seed = {seed}\nmode = {mode}\nseeds = {}\nrows = {}\nwidth = {}\nheads = {}\ntiles = {tiles_text}\npe_impl = {}\ninject_fault = {}\n",
            cfg.seeds,
            cfg.rows,
            cfg.width,
            cfg.n_heads,
            cfg.pe_impl.name(),
            cfg.inject_fault
        ),
    )?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}: {} of {} cases", r.name, r.failures, r.cases))
        .collect();
    Ok(if failed.is_empty() { Outcome::Pass } else { Outcome::Fail(failed.join("\n")) })
}

fn kv_bandwidth(mut run: Run, trace_path: Option<PathBuf>, calibrate: bool) -> Result<Outcome> {
    let seed = run.seed()?;
    let mut synth = SyntheticTraceConfig { seed, ..Default::default() };
    run.file.take_into("layers", &mut synth.n_layers)?;
    run.file.take_into("context", &mut synth.context_len)?;
    run.file.take_into("steps", &mut synth.decode_steps)?;
    run.file.take_into("skip_prob", &mut synth.skip_prob)?;
    let mut sim = SimConfig::default();
    run.file.take_into("page_miss_penalty", &mut sim.hbm.page_miss_penalty_cycles)?;
    run.file.take_into("buffer_tokens", &mut sim.buffer.capacity_tokens)?;
    run.finish()?;
    if !(0.0..=1.0).contains(&synth.skip_prob) {
        bail!("skip_prob {} outside [0, 1]", synth.skip_prob);
    }

    let trace = match &trace_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            AccessTrace::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => synth.generate()?.1,
    };
    if calibrate {
        let shape = SyntheticTraceConfig {
            n_layers: trace.n_layers,
            context_len: trace.context_len,
            decode_steps: trace.steps(),
            ..synth
        };
        let (_, dense) = shape.dense().generate()?;
        sim.hbm.page_miss_penalty_cycles = calibrate_penalty(&dense, DENSE_TARGET_UTIL_PCT, &sim)?;
    }
    let reports = run.pool()?.install(|| {
        REPORT_CELLS.par_iter().map(|&(p, b)| simulate_sequence(&trace, p, b, &sim)).collect::<Result<Vec<_>, _>>()
    })?;
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for r in &reports {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    let out = &run.common.out;
    write_atomic(out, "kv_bandwidth.csv", &csv)?;
    let source = match &trace_path {
        Some(p) => format!("trace = {}\n", p.display()),
        None => format!(
            "layers = {}\ncontext = {}\nsteps = {}\nskip_prob = {}\n",
            synth.n_layers, synth.context_len, synth.decode_steps, synth.skip_prob
        ),
    };
    write_atomic(
        out,
        "kv_bandwidth.config",
        &format!(
            "seed = {seed}\n{source}page_miss_penalty = {}\nbuffer_tokens = {}\ncalibrated = {calibrate}\n",
            sim.hbm.page_miss_penalty_cycles, sim.buffer.capacity_tokens
        ),
    )?;
    Ok(Outcome::Pass)
}

fn speedup(mut run: Run, calibrate: bool) -> Result<Outcome> {
    let _ = run.seed()?;
    let mut perf = PerfParams::default();
    let mut skip_prob = 0.25;
    run.file.take_into("skip_prob", &mut skip_prob)?;
    run.file.take_into("nonlinear_cost", &mut perf.nonlinear_cycles_per_element)?;
    run.file.take_into("contention", &mut perf.contention)?;
    run.file.take_into("query_block_rows", &mut perf.query_block_rows)?;
    run.file.take_into("head_packing", &mut perf.head_packing)?;
    run.finish()?;
    if calibrate {
        perf.nonlinear_cycles_per_element =
            calibrate_nonlinear_cost(&perf, skip_prob, CALIBRATION_PREFILL_LEN, CALIBRATION_TARGET_SPEEDUP)?;
    }
    let report = speedup_grid(&perf, skip_prob)?;
    let out = &run.common.out;
    write_atomic(out, "speedup.csv", &report.to_csv())?;
    write_atomic(
        out,
        "speedup.config",
        &format!(
            "skip_prob = {skip_prob}\nnonlinear_cost = {}\ncontention = {}\nquery_block_rows = {}\nhead_packing = {}\n",
            perf.nonlinear_cycles_per_element, perf.contention, perf.query_block_rows, perf.head_packing
        ),
    )?;
    let mut failures = Vec::new();
    for e in &report.entries {
        if e.variant == Variant::Baseline {
            continue;
        }
        let prev = Variant::ALL[Variant::ALL.iter().position(|&v| v == e.variant).unwrap() - 1];
        let decode = if e.phase == Phase::Decode { e.decode_len } else { 0 };
        let before = report.get(e.phase, e.prefill_len, decode, prev).expect("grid is complete");
        if e.cycles > before.cycles {
            failures.push(format!("{} {} {}: slower than {}", e.phase, e.prefill_len, e.variant, prev));
        }
    }
    Ok(if failures.is_empty() { Outcome::Pass } else { Outcome::Fail(failures.join("\n")) })
}

fn e2e(mut run: Run, pe_impl: Option<PeImpl>) -> Result<Outcome> {
    let seed = run.seed()?;
    let mode = run.mode()?;
    let mut cfg = E2eConfig { mode, ..Default::default() };
    let file_impl: Option<String> = run.file.take("pe_impl")?;
    cfg.apply(&mut run.file)?;
    run.finish()?;
    cfg.model.seed = seed;
    cfg.pe_impl = match (pe_impl, file_impl) {
        (Some(i), _) => i,
        (None, Some(s)) => parse_impl(&s).map_err(anyhow::Error::msg)?,
        (None, None) => PeImpl::Impl1,
    };
    let outputs = run_e2e(&cfg)?;
    let out = &run.common.out;
    write_atomic(out, "trace.txt", &outputs.trace_text)?;
    write_atomic(out, "bandwidth.csv", &outputs.bandwidth_csv)?;
    write_atomic(out, "storage.csv", &outputs.storage_csv)?;
    write_atomic(out, "drift.csv", &outputs.drift_csv)?;
    write_atomic(out, "e2e.config", &cfg.to_config_text())?;
    Ok(Outcome::Pass)
}

fn execute(cli: Cli) -> Result<Outcome> {
    let file = match &cli.common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ConfigFile::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => ConfigFile::default(),
    };
    let run = Run { common: cli.common, file };
    match cli.command {
        Command::PeValidate { impls, trials } => pe_validate(run, impls, trials),
        Command::DataflowCheck { tiles, seeds, inject_fault, pe_impl } => {
            dataflow_check(run, tiles, seeds, inject_fault, pe_impl)
        }
        Command::KvBandwidth { synthetic: _, trace, calibrate } => kv_bandwidth(run, trace, calibrate),
        Command::Speedup { calibrate } => speedup(run, calibrate),
        Command::E2e { pe_impl } => e2e(run, pe_impl),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail(why)) => {
            eprintln!("check failed:\n{why}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

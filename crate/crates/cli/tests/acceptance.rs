//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use opu_core::dataflow::{equivalence_suite, CheckConfig, PropertyResult, RouteMask, Submodule, TileSpec};
use opu_core::kvsim::{
    calibrate_penalty, check_schedule, kv_storage_accounting, map_tokens, schedule_attention, simulate_sequence,
    synthetic_mask, AttentionStep, BandwidthReport, BufferConfig, HbmConfig, InvarianceBuffer, KvLayout, MappingPolicy,
    NeededEntry, RoundSchedule, SimConfig, SyntheticTraceConfig, REPORT_CELLS,
};
use opu_core::numerics::sweep::{sample_rows, sweep_cell, NAIVE_NAME};
use opu_core::numerics::{pack_pair, recover_dual_products, Distribution, PackScheme, PeImpl, PeMode, SweepConfig};
use opu_core::runner::{calibrate_nonlinear_cost, speedup_grid, PerfParams, Phase, Variant, Workload};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn bit_exact_recovery() -> Verdict {
    let check = |u0: u32, u1: u32, v: u32, width: u32, scheme: PackScheme| -> Result<(), String> {
        let pair = pack_pair(u0, u1, v, width, scheme).map_err(|e| format!("{scheme:?} pack {u0},{u1},{v}: {e}"))?;
        let got = recover_dual_products(&pair).map_err(|e| format!("{scheme:?} recover {u0},{u1},{v}: {e}"))?;
        ensure(got == (u0 * v, u1 * v), || format!("{scheme:?} width {width}: {u0},{u1},{v} gave {got:?}"))
    };
    let schemes = [PackScheme::Standard, PackScheme::Overpacked, PackScheme::OverpackedTruncated];
    for scheme in schemes {
        (0..64u32).into_par_iter().try_for_each(|u0| {
            for u1 in 0..64 {
                for v in 0..64 {
                    check(u0, u1, v, 6, scheme)?;
                }
            }
            Ok::<_, String>(())
        })?;
    }
    let random = 1_000_000u64;
    for (i, scheme) in [PackScheme::Overpacked, PackScheme::OverpackedTruncated].into_iter().enumerate() {
        (0..100u64).into_par_iter().try_for_each(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * i as u64 + chunk);
            for _ in 0..random / 100 {
                let [u0, u1, v] = [0; 3].map(|_: u32| rng.random_range(0..1u32 << 11));
                check(u0, u1, v, 11, scheme)?;
            }
            Ok::<_, String>(())
        })?;
    }
    Ok(format!("3 x 64^3 width-6 triples and 2 x {random} width-11 triples, zero mismatches"))
}

fn pe_error_table() -> Verdict {
    let cfg = SweepConfig { trials: 100_000, seed: 1, ..Default::default() };
    let (mode, dist) = (PeMode::Fp16Fp16, Distribution::Random);
    let sample = sweep_cell(&cfg, mode, dist, &PeImpl::ALL).map_err(|e| e.to_string())?;
    let rows = sample_rows(&cfg, mode, dist, &sample).map_err(|e| e.to_string())?;
    let err = |name: &str| rows.iter().find(|r| r.implementation == name).map(|r| r.mean_rel_err_pct).unwrap();
    let (e1, e2, e3, naive) = (err("IMPL1"), err("IMPL2"), err("IMPL3"), err(NAIVE_NAME));
    let summary = format!("IMPL1 {e1:.4}%, IMPL2 {e2:.4}%, IMPL3 {e3:.4}%, chained MAC {naive:.4}%");
    ensure(e1 <= e2, || format!("IMPL1 above IMPL2: {summary}"))?;
    ensure(sample.outputs[1].1 == sample.outputs[2].1, || "IMPL2 and IMPL3 differ bitwise".into())?;
    ensure((0.01..=0.12).contains(&e1), || format!("IMPL1 outside [0.01, 0.12]%: {summary}"))?;
    ensure((0.02..=0.25).contains(&e2), || format!("IMPL2 outside [0.02, 0.25]%: {summary}"))?;
    ensure(3.0 * e1.max(e2) <= naive, || format!("not 3x below the chained MAC: {summary}"))?;
    Ok(summary)
}

fn suite_failures(results: &[PropertyResult], names: &[&str]) -> Result<(usize, f64), String> {
    let mut cases = usize::MAX;
    let mut worst = 0.0f64;
    for name in names {
        let r = results.iter().find(|r| r.name == *name).ok_or_else(|| format!("property {name} missing"))?;
        ensure(r.passed(), || {
            format!(
                "{name}: {} of {} cases failed, max error {:.3e} > {:.0e}",
                r.failures, r.cases, r.max_error, r.tolerance
            )
        })?;
        cases = cases.min(r.cases);
        worst = worst.max(r.max_error);
    }
    Ok((cases, worst))
}

fn fused_equivalence() -> Verdict {
    let tilings = [(4, 8, 16), (5, 7, 12), (16, 32, 64)];
    let cfg = CheckConfig {
        seeds: 100,
        rows: 61,
        width: 120,
        tilings: tilings.iter().map(|&(r, c, s)| TileSpec::new(r, c, s).unwrap()).collect(),
        ..Default::default()
    };
    let results = equivalence_suite(&cfg).map_err(|e| e.to_string())?;
    let names = [
        "router_fused_vs_reference",
        "attention_fused_vs_reference",
        "router_tiling_invariance",
        "attention_tiling_invariance",
    ];
    let (cases, worst) = suite_failures(&results, &names)?;
    Ok(format!(
        "{} seeds x {} tilings, rows 61, width 120: {cases} cases per property, max error {worst:.2e}",
        cfg.seeds,
        tilings.len()
    ))
}

fn softmax_invariance() -> Verdict {
    let cfg = CheckConfig { seeds: 500, first_seed: 10_001, ..Default::default() };
    let results = equivalence_suite(&cfg).map_err(|e| e.to_string())?;
    let (cases, worst) = suite_failures(&results, &["softmax_partition_invariance", "attention_kv_permutation"])?;
    ensure(cases >= 500, || format!("only {cases} cases"))?;
    Ok(format!("{cases} cases per property, max error {worst:.2e} (tolerance 1e-12)"))
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<[usize; 3], String> {
    let n_ports = [2, 4, 8, 16][rng.random_range(0..4)];
    let channels = [1, 2, n_ports / 2, n_ports][rng.random_range(0..4)];
    let cfg = HbmConfig::with_ports(n_ports, channels);
    let span = n_ports as u64 * rng.random_range(1..4u64);
    let n_layers = rng.random_range(2..8);
    let n_tokens = rng.random_range(1..48);
    let mask = synthetic_mask(n_layers, n_tokens, rng.random_range(0.0..0.9), rng.random());
    let policy = [MappingPolicy::DenseInterleaved, MappingPolicy::InterleavedSkip, MappingPolicy::TokenWise]
        [rng.random_range(0..3)];
    let layouts: Vec<KvLayout> = (0..n_layers)
        .map(|l| map_tokens(&mask, l, policy, &cfg, span))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let layer = rng.random_range(0..n_layers);
    let query = n_tokens - 1;
    let needed_at = |l: usize| -> Vec<NeededEntry> {
        (0..=query)
            .map(|t| NeededEntry {
                token: t,
                prov: if policy == MappingPolicy::DenseInterleaved {
                    l
                } else {
                    mask.last_executed(l, t).expect("layer 0 executes")
                },
            })
            .collect()
    };
    let needed = needed_at(layer);
    let column = |l: usize| -> Vec<bool> { (0..=query).map(|t| mask.executes(l, Submodule::Mha, t)).collect() };
    let buffered = policy != MappingPolicy::DenseInterleaved && rng.random_bool(0.6);
    let buffer = buffered.then(|| {
        let mut b = InvarianceBuffer::new(BufferConfig {
            capacity_tokens: rng.random_range(1..40),
            n_read_ports: rng.random_range(1..5),
            n_write_ports: rng.random_range(1..5),
        });
        if layer > 0 && rng.random_bool(0.8) {
            let held: Vec<(usize, usize)> = needed_at(layer - 1).iter().map(|e| (e.token, e.prov)).collect();
            b.lookahead_update(&column(layer), &held);
        }
        b
    });
    let next = (buffered && layer + 1 < n_layers).then(|| column(layer + 1));
    let step = AttentionStep {
        layer,
        needed: &needed,
        new_entry: (policy == MappingPolicy::DenseInterleaved || mask.executes(layer, Submodule::Mha, query))
            .then_some(query),
        executes_next: next.as_deref(),
    };
    let rounds = schedule_attention(&step, buffer.as_ref(), &layouts, &cfg).map_err(|e| format!("schedule: {e}"))?;
    let (reads, writes) = buffer.as_ref().map_or((0, 0), |b| (b.config.n_read_ports, b.config.n_write_ports));
    check_schedule(&rounds, &step, &cfg, reads, writes).map_err(|e| format!("{policy:?}, {n_ports} ports: {e}"))?;
    let reads = rounds.iter().map(|r| r.buffer_reads.len()).sum();
    let copies = rounds.iter().map(|r| r.proactive_writes.len()).sum();
    Ok([rounds.len(), reads, copies])
}

fn fixture_caps() -> Result<(), String> {
    let cfg = HbmConfig::with_ports(4, 2);
    let buffer_cfg = BufferConfig { capacity_tokens: 16, n_read_ports: 2, n_write_ports: 2 };
    let layouts = |mask: &RouteMask| -> Vec<KvLayout> {
        (0..mask.n_layers()).map(|l| map_tokens(mask, l, MappingPolicy::TokenWise, &cfg, 128).unwrap()).collect()
    };
    let widths = |rounds: &[RoundSchedule]| rounds.iter().map(RoundSchedule::width).collect::<Vec<_>>();

    // every entry reused from layer 0 and held in the buffer
    let mut mask = RouteMask::new(2);
    for _ in 0..5 {
        mask.push_token(&[true, false], &[true, true]).unwrap();
    }
    let needed: Vec<NeededEntry> = (0..5).map(|t| NeededEntry { token: t, prov: 0 }).collect();
    let mut buf = InvarianceBuffer::new(buffer_cfg);
    buf.lookahead_update(&[false; 5], &needed.iter().map(|e| (e.token, 0)).collect::<Vec<_>>());
    let step = AttentionStep { layer: 1, needed: &needed, new_entry: None, executes_next: None };
    let rounds = schedule_attention(&step, Some(&buf), &layouts(&mask), &cfg).map_err(|e| e.to_string())?;
    check_schedule(&rounds, &step, &cfg, 2, 2).map_err(|e| e.to_string())?;
    ensure(rounds.iter().all(|r| r.hbm_fetches.is_empty()), || "reused entries went to HBM".into())?;
    ensure(widths(&rounds) == [2, 2, 1], || format!("reused-only rounds {:?}, expected [2, 2, 1]", widths(&rounds)))?;

    // current-layer entries, three of four skip the next layer and must be copied out
    let mask = RouteMask::dense(3, 4);
    let needed: Vec<NeededEntry> = (0..4).map(|t| NeededEntry { token: t, prov: 1 }).collect();
    let next = [false, false, true, false];
    let buf = InvarianceBuffer::new(buffer_cfg);
    let step = AttentionStep { layer: 1, needed: &needed, new_entry: None, executes_next: Some(&next) };
    let rounds = schedule_attention(&step, Some(&buf), &layouts(&mask), &cfg).map_err(|e| e.to_string())?;
    check_schedule(&rounds, &step, &cfg, 2, 2).map_err(|e| e.to_string())?;
    ensure(rounds[0].width() == 3, || format!("first round carries {} entries, expected 3", rounds[0].width()))
}

fn scheduler_legality() -> Verdict {
    let instances = 10_000u64;
    let [rounds, reads, copies] = (0..instances)
        .into_par_iter()
        .map(|i| random_instance(&mut ChaCha8Rng::seed_from_u64(i)).map_err(|e| format!("instance {i}: {e}")))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold([0; 3], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
    ensure(reads > 0 && copies > 0, || "random instances never touched the buffer".into())?;
    fixture_caps()?;
    Ok(format!(
        "{instances} random instances legal and complete ({rounds} rounds, {reads} buffer reads, {copies} buffer copies); \
         fixture caps 2 reused / 3 unskipped"
    ))
}

fn simulate_cells(trace: &opu_core::kvsim::AccessTrace, sim: &SimConfig) -> Result<Vec<BandwidthReport>, String> {
    REPORT_CELLS
        .par_iter()
        .map(|&(p, b)| simulate_sequence(trace, p, b, sim))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())
}

fn bandwidth_reproduction() -> Verdict {
    let std_trace = SyntheticTraceConfig::default();
    let (_, trace) = std_trace.generate().map_err(|e| e.to_string())?;
    let (_, dense) = std_trace.dense().generate().map_err(|e| e.to_string())?;
    let mut sim = SimConfig::default();
    sim.hbm.page_miss_penalty_cycles = calibrate_penalty(&dense, 88.7, &sim).map_err(|e| e.to_string())?;
    let cells = simulate_cells(&trace, &sim)?;
    let util: Vec<f64> = cells.iter().map(|r| r.hbm_utilization_pct).collect();
    let aggregate = cells[3].aggregate_pct(&sim.hbm);
    let summary = format!(
        "penalty {:.3}: dense {:.1}%, interleaved_skip {:.1}%, token_wise {:.1}%, buffered {:.1}% / aggregate {aggregate:.1}%",
        sim.hbm.page_miss_penalty_cycles, util[0], util[1], util[2], util[3]
    );
    ensure(within(util[0], 88.7, 1.0), || format!("dense off target: {summary}"))?;
    ensure(within(util[1], 55.8, 8.0), || format!("interleaved_skip off target: {summary}"))?;
    ensure(within(util[2], 78.3, 6.0), || format!("token_wise off target: {summary}"))?;
    ensure(within(util[3], 83.1, 5.0), || format!("buffered off target: {summary}"))?;
    ensure(aggregate >= 100.0, || format!("aggregate below peak: {summary}"))?;
    let penalties = [0.001, 0.5, 1.0, 4.0, 8.0, 16.0, 32.0, 256.0];
    for pen in penalties {
        let mut s = sim.clone();
        s.hbm.page_miss_penalty_cycles = pen;
        let r = simulate_cells(&trace, &s)?;
        let eff: Vec<f64> = r.iter().map(|c| c.effective_hbm_gbps).collect();
        ensure(eff[0] > eff[2] && eff[2] > eff[1], || format!("penalty {pen}: ordering broken, {eff:?} GB/s"))?;
        ensure(eff.iter().all(|&e| r[3].aggregate_effective_gbps > e), || {
            format!("penalty {pen}: aggregate {:.1} GB/s not above {eff:?}", r[3].aggregate_effective_gbps)
        })?;
    }
    Ok(format!("{summary}; ordering holds at {} penalties", penalties.len()))
}

fn speedup_reproduction() -> Verdict {
    let base = PerfParams::default();
    let cost = calibrate_nonlinear_cost(&base, 0.25, 512, 1.40).map_err(|e| e.to_string())?;
    let perf = PerfParams { nonlinear_cycles_per_element: cost, ..base };
    let grid = speedup_grid(&perf, 0.25).map_err(|e| e.to_string())?;
    let targets = [(Variant::PartialSkip, 1.14), (Variant::KvReuse, 1.29), (Variant::KvReuseOpt, 1.40)];
    let mut at512 = Vec::new();
    for len in [128, 256, 512, 1024] {
        let tol = if len == 512 { 0.05 } else { 0.10 };
        for (v, target) in targets {
            let s = grid.get(Phase::Prefill, len, 0, v).ok_or("missing grid cell")?.speedup;
            ensure(within(s, target, tol), || format!("prefill {len} {v}: {s:.4} vs {target} +- {tol}"))?;
            if len == 512 {
                at512.push(format!("{s:.3}"));
            }
        }
    }
    let gap = |n: usize| grid.decode_gap(Workload { prefill_len: 128, decode_len: n }).ok_or("missing decode cells");
    let (g512, g1024) = (gap(512)?, gap(1024)?);
    ensure(g1024 < g512, || format!("decode gap does not narrow: {g512:.4} -> {g1024:.4}"))?;
    Ok(format!("nonlinear cost {cost:.4}; prefill 512 {}; decode gap {g512:.3} -> {g1024:.3}", at512.join("/")))
}

fn storage_accounting() -> Verdict {
    let (layers, tokens) = (32, 10_000);
    let mask = synthetic_mask(layers, tokens, 0.25, 1);
    ensure(mask.layer_zero_anchored(), || "layer 0 not forced".into())?;
    let report = kv_storage_accounting(&mask, tokens, 8192).map_err(|e| e.to_string())?;
    let expected = 25.0 * (layers - 1) as f64 / layers as f64;
    let got = report.reduction_pct();
    ensure(within(got, expected, 1.5), || format!("reduction {got:.3}% vs {expected:.3}% +- 1.5"))?;
    Ok(format!("{got:.3}% measured vs {expected:.3}% expected"))
}

fn run_e2e_into(dir: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_opu"))
        .args(["--seed", "11", "--out"])
        .arg(dir)
        .arg("e2e")
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("e2e exited with {status}"))
}

fn e2e_determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_e2e_into(&a)?;
    run_e2e_into(&b)?;
    let files = ["trace.txt", "bandwidth.csv", "storage.csv", "drift.csv", "e2e.config"];
    let mut bytes = 0;
    for f in files {
        let (x, y) = (
            fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?,
            fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?,
        );
        ensure(!x.is_empty() && x == y, || format!("{f} differs between runs"))?;
        bytes += x.len();
    }
    Ok(format!("{} files, {bytes} bytes identical across two runs", files.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("bit-exact dual-product recovery", bit_exact_recovery),
        ("PE column error table", pe_error_table),
        ("fused dataflow equivalence", fused_equivalence),
        ("online softmax and permutation invariance", softmax_invariance),
        ("scheduler legality and completeness", scheduler_legality),
        ("KV bandwidth reproduction", bandwidth_reproduction),
        ("MHA speedup reproduction", speedup_reproduction),
        ("KV storage accounting", storage_accounting),
        ("end-to-end determinism", e2e_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = run();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {} {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Randomized fused-versus-reference property suite.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::PeImpl;
use crate::Scalar;

use super::attention::{
    fused_attention, reference_attention, AttentionConfig, Causal, CountingSpill, FaultySpill, SpillStore,
};
use super::engine::{DeviceEngine, ExactEngine, MatmulEngine};
use super::matrix::{Linear, Matrix};
use super::route::{GumbelConfig, GumbelRouter};
use super::router::{
    fused_router_submodule, reference_router_submodule, AccessLog, FusedRouterConfig, RouterParams, TileSpec,
};
use super::softmax::{online_softmax_update, SoftmaxFeatures};
use super::DataflowError;

pub const WIDE_TOLERANCE: f64 = 1e-9;
pub const INVARIANCE_TOLERANCE: f64 = 1e-12;
/// Binary32 nonlinearities and FP16 operands through the PE column against binary64.
pub const DEVICE_TOLERANCE: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckConfig {
    pub seeds: u64,
    pub first_seed: u64,
    /// Rows of every random instance (tokens).
    pub rows: usize,
    pub width: usize,
    pub n_heads: usize,
    pub tilings: Vec<TileSpec>,
    /// Run the fused kernels in binary32 through the PE column.
    pub device: bool,
    pub pe_impl: PeImpl,
    /// Corrupt one spilled score tile on its way back.
    pub inject_fault: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            seeds: 100,
            first_seed: 1,
            rows: 48,
            width: 64,
            n_heads: 4,
            tilings: [4, 8, 16].iter().map(|&n| TileSpec::square(n).expect("positive")).collect(),
            device: false,
            pe_impl: PeImpl::Impl1,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl PropertyResult {
    fn new(name: &'static str, tolerance: f64) -> Self {
        PropertyResult { name, cases: 0, failures: 0, max_error: 0.0, tolerance }
    }

    fn record(&mut self, error: f64, extra_ok: bool) {
        self.cases += 1;
        if error.is_nan() {
            self.max_error = f64::NAN;
        } else if !self.max_error.is_nan() {
            self.max_error = self.max_error.max(error);
        }
        let within =
            matches!(error.partial_cmp(&self.tolerance), Some(std::cmp::Ordering::Less | std::cmp::Ordering::Equal));
        if !within || !extra_ok {
            self.failures += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }
}

pub const CHECK_CSV_HEADER: &str = "property,cases,failures,max_error,tolerance,status";

pub fn results_csv(results: &[PropertyResult]) -> String {
    let mut out = format!("{CHECK_CSV_HEADER}\n");
    for r in results {
        let status = if r.passed() { "pass" } else { "fail" };
        let _ =
            writeln!(out, "{},{},{},{:.3e},{:.0e},{}", r.name, r.cases, r.failures, r.max_error, r.tolerance, status);
    }
    out
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

struct RouterCase {
    x: Matrix<f64>,
    router: RouterParams<f64>,
    gamma: Vec<f64>,
    w_sub: Linear<f64>,
}

fn router_case(cfg: &CheckConfig, rng: &mut ChaCha8Rng) -> Result<RouterCase, DataflowError> {
    let x = uniform(cfg.rows, cfg.width, rng);
    let router = RouterParams::new(uniform(cfg.width, 2, rng))?;
    let gamma = (0..cfg.width).map(|_| rng.random_range(0.5..1.5)).collect();
    let w_sub = Linear::dense(uniform(cfg.width, cfg.width, rng));
    Ok(RouterCase { x, router, gamma, w_sub })
}

fn run_fused_router<T: Scalar, E: MatmulEngine<T>>(
    case: &RouterCase,
    tiles: TileSpec,
    engine: &E,
) -> Result<(Vec<bool>, Matrix<f64>, bool), DataflowError> {
    let router =
        RouterParams { w_theta: case.router.w_theta.cast(), bias: case.router.bias.map(|b| T::from(b).unwrap()) };
    let gamma: Vec<T> = case.gamma.iter().map(|&g| T::from(g).unwrap()).collect();
    let mut log = AccessLog::default();
    let out = fused_router_submodule(
        &case.x.cast::<T>(),
        &router,
        &gamma,
        &case.w_sub.cast(),
        &FusedRouterConfig::new(tiles),
        &mut GumbelRouter::new(GumbelConfig::default()),
        engine,
        &mut log,
    )?;
    Ok((out.mask, out.projected.cast(), log.single_pass() && log.extra_row_buffers == 0))
}

/// Rows of `y` (one per executed entry of `mask`) whose token `other` also executed.
fn common_rows(mask: &[bool], y: &Matrix<f64>, other: &[bool]) -> Matrix<f64> {
    let mut idx = Vec::new();
    let mut i = 0;
    for (&m, &r) in mask.iter().zip(other) {
        if m {
            if r {
                idx.push(i);
            }
            i += 1;
        }
    }
    y.select_rows(&idx)
}

type Heads = Vec<Matrix<f64>>;

fn attention_case(cfg: &CheckConfig, rng: &mut ChaCha8Rng) -> (Heads, Heads, Heads) {
    let d_head = (cfg.width / cfg.n_heads).max(1);
    let mut heads = || (0..cfg.n_heads).map(|_| uniform(cfg.rows, d_head, rng)).collect::<Vec<_>>();
    (heads(), heads(), heads())
}

fn run_fused_attention<T: Scalar, E: MatmulEngine<T>, S: SpillStore<T>>(
    (q, k, v): &(Heads, Heads, Heads),
    acfg: &AttentionConfig<T>,
    engine: &E,
    spill: &mut S,
) -> Result<Heads, DataflowError> {
    let cast = |h: &Heads| h.iter().map(|m| m.cast::<T>()).collect::<Vec<_>>();
    let out = fused_attention(&cast(q), &cast(k), &cast(v), acfg, engine, spill)?;
    Ok(out.iter().map(|m| m.cast()).collect())
}

fn heads_diff(a: &Heads, b: &Heads) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_rel_diff(y)).fold(0.0, f64::max)
}

fn attention_variant<T: Scalar, E: MatmulEngine<T>>(
    case: &(Heads, Heads, Heads),
    tiles: TileSpec,
    engine: &E,
    fault: bool,
) -> Result<(Heads, bool), DataflowError> {
    let mut acfg = AttentionConfig::<T>::new(tiles.row_tile, tiles.col_tile);
    acfg.causal = Causal::Offset(0);
    if fault {
        let mut spill = FaultySpill { inner: CountingSpill::new(), target: (0, 0, 0), delta: T::one() };
        Ok((run_fused_attention(case, &acfg, engine, &mut spill)?, spill.inner.single_use()))
    } else {
        let mut spill = CountingSpill::new();
        Ok((run_fused_attention(case, &acfg, engine, &mut spill)?, spill.single_use()))
    }
}

/// Runs every property over `cfg.seeds` random instances and every tiling.
pub fn equivalence_suite(cfg: &CheckConfig) -> Result<Vec<PropertyResult>, DataflowError> {
    if cfg.tilings.is_empty() || cfg.rows == 0 || cfg.width == 0 || cfg.n_heads == 0 {
        return Err(DataflowError::Shape("check needs at least one tiling and positive sizes".into()));
    }
    let tol = if cfg.device { DEVICE_TOLERANCE } else { WIDE_TOLERANCE };
    let device = DeviceEngine { implementation: cfg.pe_impl };
    let mut router_eq = PropertyResult::new("router_fused_vs_reference", tol);
    let mut router_tiles = PropertyResult::new("router_tiling_invariance", tol);
    let mut attn_eq = PropertyResult::new("attention_fused_vs_reference", tol);
    let mut attn_tiles = PropertyResult::new("attention_tiling_invariance", tol);
    let mut softmax_split = PropertyResult::new("softmax_partition_invariance", INVARIANCE_TOLERANCE);
    let mut attn_perm = PropertyResult::new("attention_kv_permutation", INVARIANCE_TOLERANCE);

    for seed in cfg.first_seed..cfg.first_seed + cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = router_case(cfg, &mut rng)?;
        let reference = reference_router_submodule(
            &case.x,
            &case.router,
            &case.gamma,
            &case.w_sub,
            &FusedRouterConfig::new(cfg.tilings[0]),
            &mut GumbelRouter::new(GumbelConfig::default()),
        )?;
        let mut first: Option<(Vec<bool>, Matrix<f64>)> = None;
        for &tiles in &cfg.tilings {
            let (mask, y, single) = if cfg.device {
                run_fused_router::<f32, _>(&case, tiles, &device)?
            } else {
                run_fused_router::<f64, _>(&case, tiles, &ExactEngine)?
            };
            // Binary32 logits may flip near-tie decisions; those rows are not comparable.
            let same_mask = cfg.device || mask == reference.mask;
            let ours = common_rows(&mask, &y, &reference.mask);
            let theirs = common_rows(&reference.mask, &reference.projected, &mask);
            router_eq.record(ours.max_rel_diff(&theirs), same_mask && single);
            match &first {
                None => first = Some((mask, y)),
                Some((m0, y0)) => {
                    let a = common_rows(&mask, &y, m0);
                    let b = common_rows(m0, y0, &mask);
                    router_tiles.record(a.max_rel_diff(&b), cfg.device || *m0 == mask);
                }
            }
        }

        let attn = attention_case(cfg, &mut rng);
        let reference = reference_attention(&attn.0, &attn.1, &attn.2, None, &Causal::Offset(0))?;
        let mut first: Option<Heads> = None;
        for (i, &tiles) in cfg.tilings.iter().enumerate() {
            let fault = cfg.inject_fault && i == 0;
            let (out, single) = if cfg.device {
                attention_variant::<f32, _>(&attn, tiles, &device, fault)?
            } else {
                attention_variant::<f64, _>(&attn, tiles, &ExactEngine, fault)?
            };
            attn_eq.record(heads_diff(&out, &reference), single);
            match &first {
                None => first = Some(out),
                Some(o0) => attn_tiles.record(heads_diff(&out, o0), true),
            }
        }

        // Softmax features under a random split of one score row.
        let row: Vec<f64> = (0..cfg.rows.max(2)).map(|_| rng.random_range(-20.0..20.0)).collect();
        let cut = rng.random_range(1..row.len());
        let mut whole = SoftmaxFeatures::new(1);
        online_softmax_update(&mut whole, &Matrix::from_rows(std::slice::from_ref(&row))?)?;
        let mut split = SoftmaxFeatures::new(1);
        online_softmax_update(&mut split, &Matrix::from_rows(&[row[..cut].to_vec()])?)?;
        online_softmax_update(&mut split, &Matrix::from_rows(&[row[cut..].to_vec()])?)?;
        let err = ((whole.row_sum[0] - split.row_sum[0]) / whole.row_sum[0]).abs();
        softmax_split.record(err, whole.row_max[0] == split.row_max[0]);

        // Permuting K/V rows together leaves non-causal attention unchanged.
        let (q, k, v) = &attn;
        let mut perm: Vec<usize> = (0..cfg.rows).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let acfg = AttentionConfig::new(cfg.tilings[0].row_tile, cfg.tilings[0].col_tile);
        let base = fused_attention(q, k, v, &acfg, &ExactEngine, &mut CountingSpill::new())?;
        let kp: Heads = k.iter().map(|m| m.select_rows(&perm)).collect();
        let vp: Heads = v.iter().map(|m| m.select_rows(&perm)).collect();
        let permuted = fused_attention(q, &kp, &vp, &acfg, &ExactEngine, &mut CountingSpill::new())?;
        attn_perm.record(heads_diff(&permuted, &base), true);
    }
    Ok(vec![router_eq, router_tiles, attn_eq, attn_tiles, softmax_split, attn_perm])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CheckConfig {
        CheckConfig { seeds: 6, rows: 20, width: 24, n_heads: 3, ..Default::default() }
    }

    #[test]
    fn clean_run_passes() {
        let results = equivalence_suite(&small()).unwrap();
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
        assert_eq!(results[0].cases, 18);
        assert_eq!(results[1].cases, 12);
    }

    #[test]
    fn injected_fault_is_caught() {
        let results = equivalence_suite(&CheckConfig { inject_fault: true, ..small() }).unwrap();
        let attn = results.iter().find(|r| r.name == "attention_fused_vs_reference").unwrap();
        assert_eq!(attn.failures, 6);
        assert!(results.iter().find(|r| r.name == "router_fused_vs_reference").unwrap().passed());
    }

    #[test]
    fn device_mode_within_loose_tolerance() {
        let results = equivalence_suite(&CheckConfig { device: true, seeds: 2, ..small() }).unwrap();
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
        assert!(results[0].max_error > WIDE_TOLERANCE);
    }

    #[test]
    fn csv_lists_every_property() {
        let csv = results_csv(&equivalence_suite(&CheckConfig { seeds: 1, ..small() }).unwrap());
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",pass")));
    }
}

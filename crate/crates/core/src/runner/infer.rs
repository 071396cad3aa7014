use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataflow::router::tile_ranges;
use crate::dataflow::{
    fused_attention, fused_router_submodule, kv_fallback_resolve, reference_attention, reference_router_submodule,
    rope_apply, swiglu_interleaved, AccessLog, AttentionConfig, Causal, CountingSpill, FusedRouterConfig, GumbelConfig,
    GumbelRouter, KvStore, Linear, MatmulEngine, Matrix, RouteMask, RoutedOutput,
};
use crate::kvsim::AccessTrace;
use crate::Scalar;

use super::model::ToyModel;
use super::RunnerError;

/// Which implementation of each layer to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pipeline {
    /// Fused router/normalization and tiled two-pass attention through a matmul engine.
    #[default]
    Fused,
    /// Unfused references with plain matrix products; the engine is unused.
    Unfused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub pipeline: Pipeline,
    /// Execute every submodule for every token, ignoring the routers.
    pub force_dense: bool,
}

/// Everything a run accumulates: tokens, decisions, K/V entries and per-layer hidden states.
#[derive(Clone, Debug)]
pub struct InferenceState<T> {
    pub tokens: Vec<usize>,
    pub kv: KvStore<T>,
    /// `hidden[layer][token]`: input of `layer`; index `n_layers` holds the final output.
    pub hidden: Vec<Vec<Vec<T>>>,
    pub access_log: AccessLog,
    mha: Vec<Vec<bool>>,
    ffn: Vec<Vec<bool>>,
    routers: Vec<[GumbelRouter; 2]>,
    sampler: ChaCha8Rng,
    prefill_len: Option<usize>,
}

fn router_seed(seed: u64, layer: usize, sub: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((layer as u64) << 8 | sub as u64)
}

impl<T: Scalar> InferenceState<T> {
    pub fn new(model: &ToyModel<T>) -> Self {
        let cfg = &model.config;
        let routers = (0..cfg.n_layers)
            .map(|l| {
                [0, 1].map(|s| GumbelRouter::new(GumbelConfig { mode: cfg.routing, seed: router_seed(cfg.seed, l, s) }))
            })
            .collect();
        InferenceState {
            tokens: Vec::new(),
            kv: KvStore::new(),
            hidden: vec![Vec::new(); cfg.n_layers + 1],
            access_log: AccessLog::default(),
            mha: Vec::new(),
            ffn: Vec::new(),
            routers,
            sampler: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A5A),
            prefill_len: None,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn prefill_len(&self) -> Option<usize> {
        self.prefill_len
    }

    pub fn route_mask(&self) -> RouteMask {
        let n_layers = self.hidden.len() - 1;
        let mut mask = RouteMask::new(n_layers);
        for (m, f) in self.mha.iter().zip(&self.ffn) {
            mask.push_token(m, f).expect("columns sized to the layer count");
        }
        mask
    }

    /// Trace of the decode steps run so far.
    pub fn access_trace(&self) -> Result<AccessTrace, RunnerError> {
        let context = self.prefill_len.ok_or_else(|| RunnerError::Invalid("no prefill has run".into()))?;
        Ok(AccessTrace::from_mask(&self.route_mask(), context, self.n_tokens() - context)?)
    }

    /// Final hidden state of every token, one row each.
    pub fn outputs(&self) -> Matrix<T> {
        let rows = self.hidden.last().expect("at least one layer");
        Matrix::from_rows(rows).unwrap_or_else(|_| Matrix::zeros(0, 0))
    }

    /// Mask over all tokens so far where layers above `layer` count as executed; provenance at
    /// `layer` and below is exact.
    fn mask_through(&self, layer: usize) -> RouteMask {
        let n_layers = self.hidden.len() - 1;
        let mut mask = RouteMask::new(n_layers);
        for m in &self.mha {
            let col: Vec<bool> = (0..n_layers).map(|l| l > layer || m[l]).collect();
            mask.push_token(&col, &vec![true; n_layers]).expect("columns sized to the layer count");
        }
        mask
    }
}

/// `x * w` with each output column reduced tile by tile through `engine`.
pub fn project<T: Scalar, E: MatmulEngine<T>>(
    x: &Matrix<T>,
    w: &Linear<T>,
    reduce_tile: usize,
    engine: &E,
) -> Matrix<T> {
    Matrix::from_fn(x.rows(), w.cols(), |r, c| {
        tile_ranges(x.cols(), reduce_tile).fold(T::zero(), |acc, k| acc + engine.partial_dot(x.row(r), w, c, k))
    })
}

fn split_heads<T: Scalar>(m: &Matrix<T>, n_heads: usize, d_head: usize) -> Vec<Matrix<T>> {
    (0..n_heads).map(|h| m.col_block(h * d_head, (h + 1) * d_head)).collect()
}

fn merge_heads<T: Scalar>(heads: &[Matrix<T>]) -> Matrix<T> {
    let d_head = heads[0].cols();
    Matrix::from_fn(heads[0].rows(), d_head * heads.len(), |r, c| heads[c / d_head].get(r, c % d_head))
}

fn add_rows<T: Scalar>(x: &mut Matrix<T>, selected: &[usize], delta: &Matrix<T>) {
    for (i, &r) in selected.iter().enumerate() {
        for (o, &d) in x.row_mut(r).iter_mut().zip(delta.row(i)) {
            *o = *o + d;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn route<T: Scalar, E: MatmulEngine<T>>(
    x: &Matrix<T>,
    router: &crate::dataflow::RouterParams<T>,
    gamma: &[T],
    w_sub: &Linear<T>,
    cfg: &FusedRouterConfig<T>,
    gumbel: &mut GumbelRouter,
    engine: &E,
    log: &mut AccessLog,
    pipeline: Pipeline,
) -> Result<RoutedOutput<T>, RunnerError> {
    Ok(match pipeline {
        Pipeline::Fused => fused_router_submodule(x, router, gamma, w_sub, cfg, gumbel, engine, log)?,
        Pipeline::Unfused => reference_router_submodule(x, router, gamma, w_sub, cfg, gumbel)?,
    })
}

/// Runs `rows` new tokens (at positions `start..`) through every layer.
fn forward_rows<T: Scalar, E: MatmulEngine<T>>(
    model: &ToyModel<T>,
    state: &mut InferenceState<T>,
    tokens: &[usize],
    engine: &E,
    opts: RunOptions,
) -> Result<(), RunnerError> {
    let cfg = &model.config;
    let (d, n_heads, d_head) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(RunnerError::Invalid(format!("token id {bad} outside the vocabulary")));
    }
    let start = state.n_tokens();
    let end = start + tokens.len();
    if end > cfg.max_positions {
        return Err(RunnerError::Invalid(format!("sequence of {end} tokens exceeds {} positions", cfg.max_positions)));
    }
    state.tokens.extend_from_slice(tokens);
    state.mha.extend(tokens.iter().map(|_| vec![false; cfg.n_layers]));
    state.ffn.extend(tokens.iter().map(|_| vec![false; cfg.n_layers]));
    let mut x = model.embedding.select_rows(tokens);

    for (l, w) in model.layers.iter().enumerate() {
        state.hidden[l].extend((0..x.rows()).map(|r| x.row(r).to_vec()));
        let mut rcfg = FusedRouterConfig::new(cfg.tiles);
        rcfg.force_execute = l == 0 || opts.force_dense;

        // Attention.
        let gumbel = &mut state.routers[l][0];
        let routed = route(
            &x,
            &w.mha_router,
            &w.mha_gamma,
            &w.w_qkv,
            &rcfg,
            gumbel,
            engine,
            &mut state.access_log,
            opts.pipeline,
        )?;
        for (i, &e) in routed.mask.iter().enumerate() {
            state.mha[start + i][l] = e;
        }
        if !routed.selected.is_empty() {
            let positions: Vec<usize> = routed.selected.iter().map(|&r| start + r).collect();
            let all = vec![true; positions.len()];
            let mut q = routed.projected.col_block(0, d);
            let mut k = routed.projected.col_block(d, 2 * d);
            let v = routed.projected.col_block(2 * d, 3 * d);
            rope_apply(&mut q, &positions, &model.rope, &all)?;
            rope_apply(&mut k, &positions, &model.rope, &all)?;
            for (i, &t) in positions.iter().enumerate() {
                state.kv.insert(l, t, k.row(i).to_vec(), v.row(i).to_vec());
            }
            let mask = state.mask_through(l);
            let mut keys = Vec::with_capacity(end);
            let mut values = Vec::with_capacity(end);
            for t in 0..end {
                let (_, kr, vr) = kv_fallback_resolve(l, t, &mask, &state.kv)?;
                keys.push(kr.to_vec());
                values.push(vr.to_vec());
            }
            let (keys, values) = (Matrix::from_rows(&keys)?, Matrix::from_rows(&values)?);
            let (qh, kh, vh) = (
                split_heads(&q, n_heads, d_head),
                split_heads(&keys, n_heads, d_head),
                split_heads(&values, n_heads, d_head),
            );
            let causal = Causal::Positions(positions);
            let heads = match opts.pipeline {
                Pipeline::Fused => {
                    let mut acfg = AttentionConfig::new(cfg.tiles.row_tile, cfg.tiles.col_tile);
                    acfg.causal = causal;
                    fused_attention(&qh, &kh, &vh, &acfg, engine, &mut CountingSpill::new())?
                }
                Pipeline::Unfused => reference_attention(&qh, &kh, &vh, None, &causal)?,
            };
            let merged = merge_heads(&heads);
            let out = match opts.pipeline {
                Pipeline::Fused => project(&merged, &w.w_o, cfg.tiles.reduce_tile, engine),
                Pipeline::Unfused => merged.matmul(&w.w_o.dense)?,
            };
            add_rows(&mut x, &routed.selected, &out);
        }

        // Feed-forward.
        let gumbel = &mut state.routers[l][1];
        let routed = route(
            &x,
            &w.ffn_router,
            &w.ffn_gamma,
            &w.w_gate_up,
            &rcfg,
            gumbel,
            engine,
            &mut state.access_log,
            opts.pipeline,
        )?;
        for (i, &e) in routed.mask.iter().enumerate() {
            state.ffn[start + i][l] = e;
        }
        if !routed.selected.is_empty() {
            let act = swiglu_interleaved(&routed.projected)?;
            let out = match opts.pipeline {
                Pipeline::Fused => project(&act, &w.w_down, cfg.tiles.reduce_tile, engine),
                Pipeline::Unfused => act.matmul(&w.w_down.dense)?,
            };
            add_rows(&mut x, &routed.selected, &out);
        }
    }
    state.hidden[cfg.n_layers].extend((0..x.rows()).map(|r| x.row(r).to_vec()));
    Ok(())
}

/// Processes the prompt. Must be the first call on a fresh state.
pub fn run_prefill<T: Scalar, E: MatmulEngine<T>>(
    model: &ToyModel<T>,
    state: &mut InferenceState<T>,
    tokens: &[usize],
    engine: &E,
    opts: RunOptions,
) -> Result<(), RunnerError> {
    if state.n_tokens() != 0 {
        return Err(RunnerError::Invalid("prefill on a non-empty state".into()));
    }
    if tokens.is_empty() {
        return Err(RunnerError::Invalid("empty prompt".into()));
    }
    forward_rows(model, state, tokens, engine, opts)?;
    state.prefill_len = Some(tokens.len());
    Ok(())
}

/// Next-token logits of the last hidden state.
pub fn next_token_logits<T: Scalar>(model: &ToyModel<T>, state: &InferenceState<T>) -> Vec<f64> {
    let last = state.hidden[model.config.n_layers].last().expect("a token has run");
    (0..model.config.vocab_size)
        .map(|v| last.iter().enumerate().map(|(i, &a)| (a * model.lm_head.get(i, v)).to_f64().unwrap()).sum())
        .collect()
}

/// Samples from `softmax(logits)` with the state's seeded stream.
fn sample_token<T>(state: &mut InferenceState<T>, logits: &[f64]) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let mut u = state.sampler.random_range(0.0..weights.iter().sum::<f64>());
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Generates `n_steps` tokens, each sampled from the previous step's output and fed back in.
pub fn run_decode<T: Scalar, E: MatmulEngine<T>>(
    model: &ToyModel<T>,
    state: &mut InferenceState<T>,
    n_steps: usize,
    engine: &E,
    opts: RunOptions,
) -> Result<Vec<usize>, RunnerError> {
    if state.prefill_len.is_none() {
        return Err(RunnerError::Invalid("decode before prefill".into()));
    }
    let mut generated = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let logits = next_token_logits(model, state);
        let token = sample_token(state, &logits);
        forward_rows(model, state, &[token], engine, opts)?;
        generated.push(token);
    }
    Ok(generated)
}

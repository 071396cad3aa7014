use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataflow::{Linear, Matrix, RopeTable, RouterParams, RoutingMode, Submodule, EXECUTE};
use crate::Scalar;

use super::config::{ModelConfig, WeightMode};
use super::RunnerError;

/// Rows drawn per router when calibrating its bias.
pub const CALIBRATION_ROWS: usize = 8192;
/// Bias standing in for "always execute" / "always skip".
const SATURATED_BIAS: f64 = 1e30;

/// Weights of one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub mha_router: RouterParams<T>,
    pub mha_gamma: Vec<T>,
    /// `D x 3D`, columns `[Q | K | V]`.
    pub w_qkv: Linear<T>,
    pub w_o: Linear<T>,
    pub ffn_router: RouterParams<T>,
    pub ffn_gamma: Vec<T>,
    /// `D x 2F`, gate and up columns interleaved.
    pub w_gate_up: Linear<T>,
    pub w_down: Linear<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn router(&self, sub: Submodule) -> &RouterParams<T> {
        match sub {
            Submodule::Mha => &self.mha_router,
            Submodule::Ffn => &self.ffn_router,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub config: ModelConfig,
    /// `vocab x D`.
    pub embedding: Matrix<T>,
    /// `D x vocab` next-token projection, untied so a token does not simply predict itself.
    pub lm_head: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub rope: RopeTable<T>,
}

fn cast_router<T: Scalar, U: Scalar>(r: &RouterParams<T>) -> RouterParams<U> {
    RouterParams { w_theta: r.w_theta.cast(), bias: r.bias.map(|b| U::from(b).unwrap()) }
}

impl<T: Scalar> ToyModel<T> {
    /// Same weights in another scalar type; quantized codes and scales carry over unchanged.
    pub fn cast<U: Scalar>(&self) -> Result<ToyModel<U>, RunnerError> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                mha_router: cast_router(&l.mha_router),
                mha_gamma: l.mha_gamma.iter().map(|&g| U::from(g).unwrap()).collect(),
                w_qkv: l.w_qkv.cast(),
                w_o: l.w_o.cast(),
                ffn_router: cast_router(&l.ffn_router),
                ffn_gamma: l.ffn_gamma.iter().map(|&g| U::from(g).unwrap()).collect(),
                w_gate_up: l.w_gate_up.cast(),
                w_down: l.w_down.cast(),
            })
            .collect();
        Ok(ToyModel {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            lm_head: self.lm_head.cast(),
            layers,
            rope: RopeTable::new(self.config.max_positions, self.config.d_head, self.config.rope_base)?,
        })
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn linear(w: Matrix<f64>, mode: WeightMode) -> Linear<f64> {
    match mode {
        WeightMode::Fp16 => Linear::dense(w),
        WeightMode::Int4Symmetric => Linear::quantize_int4(&w),
    }
}

/// Standard-normal activation rows, the synthetic stand-in for router inputs.
pub fn synthetic_activations(rows: usize, d_model: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, d_model, |_, _| StandardNormal.sample(&mut rng))
}

/// Expected skip fraction of `rows` under `mode` for an execute-logit bias of `bias`.
/// Argmax skips when the logit gap is negative; Gumbel sampling skips with probability
/// `sigmoid(-gap)`.
fn skip_fraction(gaps: &[f64], bias: f64, mode: RoutingMode) -> f64 {
    let n = gaps.len() as f64;
    match mode {
        RoutingMode::DeterministicArgmax => gaps.iter().filter(|&&g| g + bias < 0.0).count() as f64 / n,
        RoutingMode::Sampled => gaps.iter().map(|&g| 1.0 / (1.0 + (g + bias).exp())).sum::<f64>() / n,
    }
}

/// Execute-logit bias giving skip rate `skip_prob` on `samples`, by bisection.
pub fn calibrate_router_bias(
    w_theta: &Matrix<f64>,
    samples: &Matrix<f64>,
    skip_prob: f64,
    mode: RoutingMode,
) -> Result<f64, RunnerError> {
    if skip_prob <= 0.0 {
        return Ok(SATURATED_BIAS);
    }
    if skip_prob >= 1.0 {
        return Ok(-SATURATED_BIAS);
    }
    let logits = samples.matmul(w_theta)?;
    let gaps: Vec<f64> = (0..logits.rows()).map(|r| logits.get(r, EXECUTE) - logits.get(r, 1 - EXECUTE)).collect();
    let spread = gaps.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    let (mut lo, mut hi) = (-2.0 * spread - 50.0, 2.0 * spread + 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if skip_fraction(&gaps, mid, mode) > skip_prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn router(d: usize, skip_prob: f64, mode: RoutingMode, rng: &mut ChaCha8Rng) -> Result<RouterParams<f64>, RunnerError> {
    let w = gaussian(d, 2, 1.0 / (d as f64).sqrt(), rng);
    let samples = synthetic_activations(CALIBRATION_ROWS, d, rng.random());
    let bias = calibrate_router_bias(&w, &samples, skip_prob, mode)?;
    let mut params = RouterParams::new(w)?;
    params.bias[EXECUTE] = bias;
    Ok(params)
}

/// Seeded random weights. Output projections are scaled down so the residual stream stays
/// close to unit variance across layers, which keeps the calibrated routers near their target.
pub fn build_toy_model(cfg: &ModelConfig) -> Result<ToyModel<f64>, RunnerError> {
    cfg.validate()?;
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let embedding = gaussian(cfg.vocab_size, d, 1.0, &mut rng);
    let in_std = 1.0 / (d as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let mha_router = router(d, cfg.skip_prob, cfg.routing, &mut rng)?;
        let w_qkv = linear(gaussian(d, 3 * d, in_std, &mut rng), cfg.weight_mode);
        let w_o = linear(gaussian(d, d, 0.25 * in_std, &mut rng), cfg.weight_mode);
        let ffn_router = router(d, cfg.skip_prob, cfg.routing, &mut rng)?;
        let gate = linear(gaussian(d, f, in_std, &mut rng), cfg.weight_mode);
        let up = linear(gaussian(d, f, in_std, &mut rng), cfg.weight_mode);
        let w_down = linear(gaussian(f, d, 0.25 / (f as f64).sqrt(), &mut rng), cfg.weight_mode);
        let mut gamma = || (0..d).map(|_| rng.random_range(0.8..1.2)).collect::<Vec<f64>>();
        let (mha_gamma, ffn_gamma) = (gamma(), gamma());
        layers.push(LayerWeights {
            mha_router,
            mha_gamma,
            w_qkv,
            w_o,
            ffn_router,
            ffn_gamma,
            w_gate_up: Linear::interleave(&gate, &up)?,
            w_down,
        });
    }
    let lm_head = gaussian(d, cfg.vocab_size, in_std, &mut rng);
    Ok(ToyModel {
        config: cfg.clone(),
        embedding,
        lm_head,
        layers,
        rope: RopeTable::new(cfg.max_positions, cfg.d_head, cfg.rope_base)?,
    })
}

/// Fraction of `rows` the router skips, routing each row once with a stream seeded by `seed`.
pub fn measured_skip_rate(
    router: &RouterParams<f64>,
    rows: &Matrix<f64>,
    mode: RoutingMode,
    seed: u64,
) -> Result<f64, RunnerError> {
    let mut logits = rows.matmul(&router.w_theta.dense)?;
    for r in 0..logits.rows() {
        for c in 0..2 {
            logits.set(r, c, logits.get(r, c) + router.bias[c]);
        }
    }
    let mut gumbel = crate::dataflow::GumbelRouter::new(crate::dataflow::GumbelConfig { mode, seed });
    let decisions = gumbel.route(&logits)?;
    Ok(decisions.iter().filter(|&&e| !e).count() as f64 / decisions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, ..Default::default() }
    }

    #[test]
    fn same_seed_same_model() {
        let a = build_toy_model(&small()).unwrap();
        assert_eq!(a, build_toy_model(&small()).unwrap());
        assert_ne!(a, build_toy_model(&ModelConfig { seed: 2, ..small() }).unwrap());
    }

    #[test]
    fn calibrated_routers_hit_target() {
        for mode in [RoutingMode::DeterministicArgmax, RoutingMode::Sampled] {
            let cfg = ModelConfig { routing: mode, ..small() };
            let model = build_toy_model(&cfg).unwrap();
            let fresh = synthetic_activations(10_000, cfg.d_model, 999);
            for layer in &model.layers {
                for sub in [Submodule::Mha, Submodule::Ffn] {
                    let rate = measured_skip_rate(layer.router(sub), &fresh, mode, 7).unwrap();
                    assert!((rate - 0.25).abs() <= 0.02, "{mode:?} {sub:?} {rate}");
                }
            }
        }
    }

    #[test]
    fn saturated_biases() {
        let w = gaussian(8, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let s = synthetic_activations(64, 8, 1);
        for (p, expect) in [(0.0, 0.0), (1.0, 1.0)] {
            let mut r = RouterParams::new(w.clone()).unwrap();
            r.bias[EXECUTE] = calibrate_router_bias(&w, &s, p, RoutingMode::DeterministicArgmax).unwrap();
            assert_eq!(measured_skip_rate(&r, &s, RoutingMode::Sampled, 3).unwrap(), expect);
        }
    }

    #[test]
    fn int4_weights_within_one_step() {
        let cfg = ModelConfig { weight_mode: WeightMode::Int4Symmetric, ..small() };
        let quant = build_toy_model(&cfg).unwrap();
        let plain = build_toy_model(&small()).unwrap();
        for (q, p) in quant.layers.iter().zip(&plain.layers) {
            for (lq, lp) in
                [(&q.w_qkv, &p.w_qkv), (&q.w_o, &p.w_o), (&q.w_gate_up, &p.w_gate_up), (&q.w_down, &p.w_down)]
            {
                let scales = &lq.quantized.as_ref().unwrap().scales;
                for (c, scale) in scales.iter().enumerate() {
                    let step = scale.to_f64();
                    for r in 0..lq.rows() {
                        assert!((lq.dense.get(r, c) - lp.dense.get(r, c)).abs() <= step);
                    }
                }
            }
        }
    }

    #[test]
    fn cast_keeps_codes() {
        let cfg = ModelConfig { weight_mode: WeightMode::Int4Symmetric, ..small() };
        let m = build_toy_model(&cfg).unwrap();
        let f = m.cast::<f32>().unwrap();
        assert_eq!(f.layers[0].w_o.quantized, m.layers[0].w_o.quantized);
        assert_eq!(f.layers[1].w_down.dense.get(3, 4) as f64, m.layers[1].w_down.dense.get(3, 4));
    }
}

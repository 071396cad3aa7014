use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Scalar;

use super::matrix::Matrix;
use super::DataflowError;

/// Index of the "execute" logit in a router output row.
pub const EXECUTE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Submodule {
    Mha,
    Ffn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoutingMode {
    DeterministicArgmax,
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GumbelConfig {
    pub mode: RoutingMode,
    pub seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { mode: RoutingMode::DeterministicArgmax, seed: 0 }
    }
}

/// Two-way router decision with a seeded Gumbel noise stream.
#[derive(Clone, Debug)]
pub struct GumbelRouter {
    cfg: GumbelConfig,
    rng: ChaCha8Rng,
}

impl GumbelRouter {
    pub fn new(cfg: GumbelConfig) -> Self {
        GumbelRouter { cfg, rng: ChaCha8Rng::seed_from_u64(cfg.seed) }
    }

    fn gumbel(&mut self) -> f64 {
        // U in (0, 1): avoid both logs blowing up.
        let u: f64 = self.rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    }

    /// One decision per row of an `n x 2` logit matrix; `true` means execute. Ties prefer execute.
    pub fn route<T: Scalar>(&mut self, logits: &Matrix<T>) -> Result<Vec<bool>, DataflowError> {
        if logits.cols() != 2 {
            return Err(DataflowError::Shape(format!("router logits need 2 columns, got {}", logits.cols())));
        }
        let mut out = Vec::with_capacity(logits.rows());
        for r in 0..logits.rows() {
            let skip = logits.get(r, 1 - EXECUTE).to_f64().unwrap();
            let exec = logits.get(r, EXECUTE).to_f64().unwrap();
            if !skip.is_finite() || !exec.is_finite() {
                return Err(DataflowError::NonFiniteLogit(r));
            }
            let decision = match self.cfg.mode {
                RoutingMode::DeterministicArgmax => exec >= skip,
                RoutingMode::Sampled => {
                    let gs = self.gumbel();
                    let ge = self.gumbel();
                    exec + ge >= skip + gs
                }
            };
            out.push(decision);
        }
        Ok(out)
    }
}

/// Per-(layer, submodule, token) execute flags with MHA provenance.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RouteMask {
    n_layers: usize,
    /// `mha[token][layer]`
    mha: Vec<Vec<bool>>,
    ffn: Vec<Vec<bool>>,
    /// `last_executed[token][layer]`, `None` until the token's first MHA execution.
    last_executed: Vec<Vec<Option<usize>>>,
}

impl RouteMask {
    pub fn new(n_layers: usize) -> Self {
        RouteMask { n_layers, ..Default::default() }
    }

    /// Every token executes every submodule.
    pub fn dense(n_layers: usize, n_tokens: usize) -> Self {
        let mut m = RouteMask::new(n_layers);
        for _ in 0..n_tokens {
            m.push_token(&vec![true; n_layers], &vec![true; n_layers]).expect("lengths match");
        }
        m
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_tokens(&self) -> usize {
        self.mha.len()
    }

    /// Appends a token's decisions across all layers.
    pub fn push_token(&mut self, mha: &[bool], ffn: &[bool]) -> Result<usize, DataflowError> {
        if mha.len() != self.n_layers || ffn.len() != self.n_layers {
            return Err(DataflowError::Shape("decision column length differs from layer count".into()));
        }
        let mut prov = Vec::with_capacity(self.n_layers);
        let mut last = None;
        for (l, &e) in mha.iter().enumerate() {
            if e {
                last = Some(l);
            }
            prov.push(last);
        }
        self.mha.push(mha.to_vec());
        self.ffn.push(ffn.to_vec());
        self.last_executed.push(prov);
        Ok(self.mha.len() - 1)
    }

    pub fn executes(&self, layer: usize, sub: Submodule, token: usize) -> bool {
        match sub {
            Submodule::Mha => self.mha[token][layer],
            Submodule::Ffn => self.ffn[token][layer],
        }
    }

    /// Most recent layer at or below `layer` where the token executed MHA.
    pub fn last_executed(&self, layer: usize, token: usize) -> Option<usize> {
        self.last_executed[token][layer]
    }

    pub fn executed_tokens(&self, layer: usize, sub: Submodule) -> Vec<usize> {
        (0..self.n_tokens()).filter(|&t| self.executes(layer, sub, t)).collect()
    }

    /// True when every token executes both submodules at layer 0.
    pub fn layer_zero_anchored(&self) -> bool {
        (0..self.n_tokens()).all(|t| self.mha[t][0] && self.ffn[t][0])
    }
}

/// K/V rows keyed by the (layer, token) that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvStore<T> {
    entries: BTreeMap<(usize, usize), (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> KvStore<T> {
    pub fn new() -> Self {
        KvStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, layer: usize, token: usize, k: Vec<T>, v: Vec<T>) {
        self.entries.insert((layer, token), (k, v));
    }

    pub fn get(&self, layer: usize, token: usize) -> Option<(&[T], &[T])> {
        self.entries.get(&(layer, token)).map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.entries.keys()
    }
}

/// K/V of `token` as seen by `layer`: the entry of the most recent layer that executed MHA for it.
pub fn kv_fallback_resolve<'a, T: Scalar>(
    layer: usize,
    token: usize,
    mask: &RouteMask,
    store: &'a KvStore<T>,
) -> Result<(usize, &'a [T], &'a [T]), DataflowError> {
    let prov = mask.last_executed(layer, token).ok_or(DataflowError::NoProvenance { layer, token })?;
    let (k, v) = store.get(prov, token).ok_or(DataflowError::MissingKv { layer: prov, token })?;
    Ok((prov, k, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_routing() {
        let mut r = GumbelRouter::new(GumbelConfig::default());
        let logits = Matrix::from_rows(&[vec![0.0, 10.0], vec![3.0, 3.0], vec![1.0, -1.0]]).unwrap();
        assert_eq!(r.route(&logits).unwrap(), vec![true, true, false]);
        let bad = Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(r.route(&bad).is_err());
    }

    #[test]
    fn deterministic_mode_leaves_stream_untouched() {
        let mut a = GumbelRouter::new(GumbelConfig { mode: RoutingMode::DeterministicArgmax, seed: 5 });
        let logits = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        a.route(&logits).unwrap();
        let fresh = GumbelRouter::new(GumbelConfig { mode: RoutingMode::DeterministicArgmax, seed: 5 });
        assert_eq!(a.rng, fresh.rng);
    }

    #[test]
    fn gumbel_max_matches_softmax() {
        let mut r = GumbelRouter::new(GumbelConfig { mode: RoutingMode::Sampled, seed: 11 });
        let n = 100_000;
        let logits = Matrix::from_fn(n, 2, |_, c| if c == EXECUTE { 3f64.ln() } else { 0.0 });
        let hits = r.route(&logits).unwrap().iter().filter(|&&e| e).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "{freq}");
    }

    #[test]
    fn provenance_recursion() {
        let mut m = RouteMask::new(6);
        m.push_token(&[true; 6], &[true; 6]).unwrap();
        m.push_token(&[true, false, false, false, false, false], &[true; 6]).unwrap();
        m.push_token(&[true, false, true, false, false, true], &[true; 6]).unwrap();
        assert_eq!(m.last_executed(4, 0), Some(4));
        assert_eq!(m.last_executed(5, 1), Some(0));
        assert_eq!(m.last_executed(4, 2), Some(2));
        assert_eq!(m.last_executed(5, 2), Some(5));
    }

    #[test]
    fn fallback_errors_without_anchor() {
        let mut m = RouteMask::new(3);
        m.push_token(&[false, false, true], &[true; 3]).unwrap();
        let store: KvStore<f64> = KvStore::new();
        assert!(matches!(kv_fallback_resolve(1, 0, &m, &store), Err(DataflowError::NoProvenance { .. })));
        assert!(matches!(kv_fallback_resolve(2, 0, &m, &store), Err(DataflowError::MissingKv { .. })));
        assert!(!m.layer_zero_anchored());
    }
}

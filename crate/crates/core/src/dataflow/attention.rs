use std::collections::BTreeMap;

use crate::Scalar;

use super::engine::MatmulEngine;
use super::matrix::Matrix;
use super::router::tile_ranges;
use super::softmax::{masked, normalize_scores, online_softmax_update, softmax_rows, SoftmaxFeatures};
use super::DataflowError;

/// Identifies one score tile: (head, row block, column block).
pub type SpillKey = (usize, usize, usize);

/// Off-chip store that receives raw score tiles between the two attention passes.
pub trait SpillStore<T> {
    fn write(&mut self, key: SpillKey, tile: Matrix<T>);
    fn read(&mut self, key: SpillKey) -> Result<Matrix<T>, DataflowError>;
}

/// Spill store that counts every write and read per tile.
#[derive(Clone, Debug, Default)]
pub struct CountingSpill<T> {
    tiles: BTreeMap<SpillKey, Matrix<T>>,
    pub writes: BTreeMap<SpillKey, usize>,
    pub reads: BTreeMap<SpillKey, usize>,
}

impl<T: Scalar> CountingSpill<T> {
    pub fn new() -> Self {
        CountingSpill { tiles: BTreeMap::new(), writes: BTreeMap::new(), reads: BTreeMap::new() }
    }

    /// Every tile was written exactly once and read back exactly once.
    pub fn single_use(&self) -> bool {
        !self.writes.is_empty()
            && self.writes.values().all(|&n| n == 1)
            && self.writes.keys().eq(self.reads.keys())
            && self.reads.values().all(|&n| n == 1)
    }
}

impl<T: Scalar> SpillStore<T> for CountingSpill<T> {
    fn write(&mut self, key: SpillKey, tile: Matrix<T>) {
        *self.writes.entry(key).or_insert(0) += 1;
        self.tiles.insert(key, tile);
    }

    fn read(&mut self, key: SpillKey) -> Result<Matrix<T>, DataflowError> {
        *self.reads.entry(key).or_insert(0) += 1;
        self.tiles.get(&key).cloned().ok_or(DataflowError::MissingSpill(key))
    }
}

/// Test hook: corrupts one score tile on its way back from the spill store.
#[derive(Clone, Debug)]
pub struct FaultySpill<T> {
    pub inner: CountingSpill<T>,
    pub target: SpillKey,
    pub delta: T,
}

impl<T: Scalar> SpillStore<T> for FaultySpill<T> {
    fn write(&mut self, key: SpillKey, tile: Matrix<T>) {
        self.inner.write(key, tile);
    }

    fn read(&mut self, key: SpillKey) -> Result<Matrix<T>, DataflowError> {
        let mut tile = self.inner.read(key)?;
        if key == self.target && tile.rows() > 0 && tile.cols() > 0 {
            tile.set(0, 0, tile.get(0, 0) + self.delta);
        }
        Ok(tile)
    }
}

/// Which keys each query row may see; key `j` sits at position `j`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Causal {
    #[default]
    Off,
    /// Query row `r` sits at position `offset + r`.
    Offset(usize),
    /// Explicit position of every query row.
    Positions(Vec<usize>),
}

impl Causal {
    fn masks(&self, row: usize, key: usize) -> bool {
        match self {
            Causal::Off => false,
            Causal::Offset(off) => key > off + row,
            Causal::Positions(p) => key > p[row],
        }
    }

    fn check(&self, rows: usize) -> Result<(), DataflowError> {
        match self {
            Causal::Positions(p) if p.len() != rows => {
                Err(DataflowError::Shape(format!("{} query positions for {rows} rows", p.len())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig<T> {
    pub row_tile: usize,
    pub col_tile: usize,
    /// Process heads two at a time over shared tiles.
    pub pair_heads: bool,
    /// Score scale; `None` means `1/sqrt(d_head)`.
    pub scale: Option<T>,
    pub causal: Causal,
}

impl<T: Scalar> AttentionConfig<T> {
    pub fn new(row_tile: usize, col_tile: usize) -> Self {
        AttentionConfig { row_tile, col_tile, pair_heads: true, scale: None, causal: Causal::Off }
    }
}

fn head_groups(n: usize, pair: bool) -> Vec<Vec<usize>> {
    if pair {
        (0..n).step_by(2).map(|h| (h..(h + 2).min(n)).collect()).collect()
    } else {
        (0..n).map(|h| vec![h]).collect()
    }
}

fn check_shapes<T: Scalar>(q: &[Matrix<T>], k: &[Matrix<T>], v: &[Matrix<T>]) -> Result<(), DataflowError> {
    if q.len() != k.len() || k.len() != v.len() || q.is_empty() {
        return Err(DataflowError::Shape("head counts of Q, K, V differ or are zero".into()));
    }
    for h in 0..q.len() {
        if q[h].cols() != k[h].cols() || k[h].rows() != v[h].rows() || k[h].rows() == 0 {
            return Err(DataflowError::Shape(format!("head {h}: inconsistent Q/K/V shapes")));
        }
    }
    Ok(())
}

fn resolve_scale<T: Scalar>(cfg: &AttentionConfig<T>, d: usize) -> T {
    cfg.scale.unwrap_or_else(|| T::one() / T::from(d).unwrap().sqrt())
}

/// Two-pass tiled attention. Pass one streams raw score tiles to `spill` while folding them
/// into the softmax features; pass two reads each tile back, rescales it and mixes values.
pub fn fused_attention<T: Scalar, E: MatmulEngine<T>, S: SpillStore<T>>(
    q: &[Matrix<T>],
    k: &[Matrix<T>],
    v: &[Matrix<T>],
    cfg: &AttentionConfig<T>,
    engine: &E,
    spill: &mut S,
) -> Result<Vec<Matrix<T>>, DataflowError> {
    check_shapes(q, k, v)?;
    cfg.causal.check(q[0].rows())?;
    if cfg.row_tile == 0 || cfg.col_tile == 0 {
        return Err(DataflowError::Tile("attention block sizes must be positive".into()));
    }
    let mut out: Vec<Matrix<T>> = q.iter().zip(v).map(|(qh, vh)| Matrix::zeros(qh.rows(), vh.cols())).collect();
    for group in head_groups(q.len(), cfg.pair_heads) {
        let n_q = q[group[0]].rows();
        if group.iter().any(|&h| q[h].rows() != n_q || k[h].rows() != k[group[0]].rows()) {
            return Err(DataflowError::Shape("paired heads differ in length".into()));
        }
        let n_k = k[group[0]].rows();
        for (bi, rows) in tile_ranges(n_q, cfg.row_tile).enumerate() {
            let mut features: Vec<SoftmaxFeatures<T>> =
                group.iter().map(|_| SoftmaxFeatures::new(rows.len())).collect();
            for (bj, cols) in tile_ranges(n_k, cfg.col_tile).enumerate() {
                for (g, &h) in group.iter().enumerate() {
                    let scale = resolve_scale(cfg, q[h].cols());
                    let tile = Matrix::from_fn(rows.len(), cols.len(), |r, c| {
                        let (qi, kj) = (rows.start + r, cols.start + c);
                        if cfg.causal.masks(qi, kj) {
                            masked()
                        } else {
                            engine.vec_dot(q[h].row(qi), k[h].row(kj)) * scale
                        }
                    });
                    online_softmax_update(&mut features[g], &tile)?;
                    spill.write((h, bi, bj), tile);
                }
            }
            for (bj, cols) in tile_ranges(n_k, cfg.col_tile).enumerate() {
                for (g, &h) in group.iter().enumerate() {
                    let p = normalize_scores(&spill.read((h, bi, bj))?, &features[g])?;
                    let v_block = v[h].row_block(cols.start, cols.end).transpose();
                    for r in 0..rows.len() {
                        for c in 0..v[h].cols() {
                            let acc = out[h].get(rows.start + r, c) + engine.vec_dot(p.row(r), v_block.row(c));
                            out[h].set(rows.start + r, c, acc);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `softmax(Q K^T * scale) V` per head, computed directly.
pub fn reference_attention<T: Scalar>(
    q: &[Matrix<T>],
    k: &[Matrix<T>],
    v: &[Matrix<T>],
    scale: Option<T>,
    causal: &Causal,
) -> Result<Vec<Matrix<T>>, DataflowError> {
    check_shapes(q, k, v)?;
    causal.check(q[0].rows())?;
    let mut out = Vec::with_capacity(q.len());
    for h in 0..q.len() {
        let scale = scale.unwrap_or_else(|| T::one() / T::from(q[h].cols()).unwrap().sqrt());
        let mut s = q[h].matmul(&k[h].transpose())?.map(|x| x * scale);
        for r in 0..s.rows() {
            for c in 0..s.cols() {
                if causal.masks(r, c) {
                    s.set(r, c, masked());
                }
            }
        }
        out.push(softmax_rows(&s).matmul(&v[h])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::engine::ExactEngine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heads(n: usize, rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix<f64>> {
        (0..n).map(|_| Matrix::from_fn(rows, d, |_, _| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn single_kv_row_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (heads(1, 3, 4, &mut rng), heads(1, 1, 4, &mut rng), heads(1, 1, 4, &mut rng));
        let o =
            fused_attention(&q, &k, &v, &AttentionConfig::new(2, 2), &ExactEngine, &mut CountingSpill::new()).unwrap();
        for r in 0..3 {
            assert_eq!(o[0].row(r), v[0].row(0));
        }
    }

    #[test]
    fn matches_reference_and_spills_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (heads(3, 16, 8, &mut rng), heads(3, 16, 8, &mut rng), heads(3, 16, 8, &mut rng));
        for causal in [
            Causal::Off,
            Causal::Offset(0),
            Causal::Positions(vec![15, 3, 7, 0, 1, 2, 9, 9, 4, 5, 6, 8, 10, 11, 12, 13]),
        ] {
            let reference = reference_attention(&q, &k, &v, None, &causal).unwrap();
            let mut cfg = AttentionConfig::new(4, 4);
            cfg.causal = causal;
            let mut spill = CountingSpill::new();
            let o = fused_attention(&q, &k, &v, &cfg, &ExactEngine, &mut spill).unwrap();
            assert!(spill.single_use());
            assert_eq!(spill.writes.len(), 3 * 4 * 4);
            for h in 0..3 {
                assert!(o[h].max_rel_diff(&reference[h]) < 1e-10);
            }
        }
    }

    #[test]
    fn pairing_does_not_change_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (heads(5, 9, 4, &mut rng), heads(5, 7, 4, &mut rng), heads(5, 7, 4, &mut rng));
        let mut cfg = AttentionConfig::new(3, 2);
        let paired = fused_attention(&q, &k, &v, &cfg, &ExactEngine, &mut CountingSpill::new()).unwrap();
        cfg.pair_heads = false;
        let single = fused_attention(&q, &k, &v, &cfg, &ExactEngine, &mut CountingSpill::new()).unwrap();
        assert_eq!(paired, single);
    }

    #[test]
    fn injected_fault_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (heads(2, 8, 4, &mut rng), heads(2, 8, 4, &mut rng), heads(2, 8, 4, &mut rng));
        let cfg = AttentionConfig::new(4, 4);
        let clean = fused_attention(&q, &k, &v, &cfg, &ExactEngine, &mut CountingSpill::new()).unwrap();
        let mut faulty = FaultySpill { inner: CountingSpill::new(), target: (1, 0, 1), delta: 0.5 };
        let bad = fused_attention(&q, &k, &v, &cfg, &ExactEngine, &mut faulty).unwrap();
        assert_eq!(clean[0], bad[0]);
        assert!(bad[1].max_rel_diff(&clean[1]) > 1e-6);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (heads(2, 4, 4, &mut rng), heads(2, 4, 4, &mut rng), heads(1, 4, 4, &mut rng));
        assert!(
            fused_attention(&q, &k, &v, &AttentionConfig::new(2, 2), &ExactEngine, &mut CountingSpill::new()).is_err()
        );
    }
}

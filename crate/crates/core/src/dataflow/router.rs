use std::collections::BTreeMap;

use crate::Scalar;

use super::engine::MatmulEngine;
use super::matrix::{Linear, Matrix};
use super::route::GumbelRouter;
use super::DataflowError;

/// Row-block, column-block and reduction tile sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TileSpec {
    pub row_tile: usize,
    pub col_tile: usize,
    pub reduce_tile: usize,
}

impl TileSpec {
    pub fn new(row_tile: usize, col_tile: usize, reduce_tile: usize) -> Result<Self, DataflowError> {
        if row_tile == 0 || col_tile == 0 || reduce_tile == 0 {
            return Err(DataflowError::Tile(format!(
                "tile sizes must be positive: {row_tile}/{col_tile}/{reduce_tile}"
            )));
        }
        Ok(TileSpec { row_tile, col_tile, reduce_tile })
    }

    /// Same size on every axis.
    pub fn square(n: usize) -> Result<Self, DataflowError> {
        TileSpec::new(n, n, n)
    }
}

/// Reduction ranges of `len` split into tiles of `size`; the last one may be short (zero padding is a no-op).
pub fn tile_ranges(len: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..len).step_by(size.max(1)).map(move |s| s..(s + size).min(len))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum NormKind {
    /// `(x - mean) / sigma * gamma`.
    #[default]
    MeanVariance,
    /// Mean forced to zero: RMS normalization.
    RmsOnly,
}

/// Per-row running sums and their finalized statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RowStats<T> {
    pub running_sum: Vec<T>,
    pub running_sum_sq: Vec<T>,
    pub mu: Vec<T>,
    /// Clamped variance `max(sum_sq / D - mu^2, 0)`.
    pub var: Vec<T>,
    /// `sqrt(var)`, without the epsilon floor.
    pub sigma: Vec<T>,
    pub width: usize,
}

impl<T: Scalar> RowStats<T> {
    pub fn new(rows: usize) -> Self {
        RowStats {
            running_sum: vec![T::zero(); rows],
            running_sum_sq: vec![T::zero(); rows],
            mu: vec![T::zero(); rows],
            var: vec![T::zero(); rows],
            sigma: vec![T::zero(); rows],
            width: 0,
        }
    }

    pub fn accumulate(&mut self, row: usize, values: &[T]) {
        for &x in values {
            self.running_sum[row] = self.running_sum[row] + x;
            self.running_sum_sq[row] = self.running_sum_sq[row] + x * x;
        }
    }

    pub fn finalize(&mut self, width: usize, kind: NormKind) {
        self.width = width;
        let d = T::from(width).unwrap();
        for r in 0..self.running_sum.len() {
            let mu = match kind {
                NormKind::MeanVariance => self.running_sum[r] / d,
                NormKind::RmsOnly => T::zero(),
            };
            let var = (self.running_sum_sq[r] / d - mu * mu).max(T::zero());
            self.mu[r] = mu;
            self.var[r] = var;
            self.sigma[r] = var.sqrt();
        }
    }
}

/// Access-counting probe for the fused kernels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccessLog {
    /// Visits per (row block, reduction tile) of the activation matrix.
    pub activation_tile_visits: BTreeMap<(usize, usize), usize>,
    /// Rows normalized by overwriting their own buffer slot.
    pub in_place_writes: usize,
    /// Extra row buffers allocated for normalized output (stays zero in the fused path).
    pub extra_row_buffers: usize,
}

impl AccessLog {
    pub fn single_pass(&self) -> bool {
        !self.activation_tile_visits.is_empty() && self.activation_tile_visits.values().all(|&v| v == 1)
    }
}

/// Router weights: `D x 2` projection plus a bias per logit.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T> {
    pub w_theta: Linear<T>,
    pub bias: [T; 2],
}

impl<T: Scalar> RouterParams<T> {
    pub fn new(w_theta: Matrix<T>) -> Result<Self, DataflowError> {
        if w_theta.cols() != 2 {
            return Err(DataflowError::Shape(format!(
                "router projection must be D x 2, got {} columns",
                w_theta.cols()
            )));
        }
        Ok(RouterParams { w_theta: Linear::dense(w_theta), bias: [T::zero(); 2] })
    }
}

/// Router logits and row statistics in one sweep over the reduction tiles of a row block.
pub fn router_stats_pass<T: Scalar, E: MatmulEngine<T>>(
    block: &Matrix<T>,
    router: &RouterParams<T>,
    tiles: &TileSpec,
    kind: NormKind,
    engine: &E,
    block_index: usize,
    log: &mut AccessLog,
) -> Result<(Matrix<T>, RowStats<T>), DataflowError> {
    let d = block.cols();
    if router.w_theta.rows() != d {
        return Err(DataflowError::Shape(format!("router expects width {}, block has {d}", router.w_theta.rows())));
    }
    let mut logits = Matrix::zeros(block.rows(), 2);
    let mut stats = RowStats::new(block.rows());
    for (t, range) in tile_ranges(d, tiles.reduce_tile).enumerate() {
        *log.activation_tile_visits.entry((block_index, t)).or_insert(0) += 1;
        for r in 0..block.rows() {
            let row = block.row(r);
            stats.accumulate(r, &row[range.clone()]);
            for c in 0..2 {
                let partial = engine.partial_dot(row, &router.w_theta, c, range.clone());
                logits.set(r, c, logits.get(r, c) + partial);
            }
        }
    }
    for r in 0..block.rows() {
        for c in 0..2 {
            logits.set(r, c, logits.get(r, c) + router.bias[c]);
        }
    }
    stats.finalize(d, kind);
    Ok((logits, stats))
}

/// Normalizes the selected rows of `block` in place. Returns the local indices that were normalized.
pub fn normalize_selected<T: Scalar>(
    block: &mut Matrix<T>,
    stats: &RowStats<T>,
    gamma: &[T],
    mask: &[bool],
    eps: T,
    log: &mut AccessLog,
) -> Result<Vec<usize>, DataflowError> {
    if mask.len() != block.rows() || gamma.len() != block.cols() {
        return Err(DataflowError::Shape("mask or gamma length does not match the block".into()));
    }
    let mut selected = Vec::new();
    for (r, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let denom = (stats.var[r] + eps).sqrt();
        if denom == T::zero() {
            return Err(DataflowError::DegenerateRow(r));
        }
        let mu = stats.mu[r];
        for (x, &g) in block.row_mut(r).iter_mut().zip(gamma) {
            *x = (*x - mu) / denom * g;
        }
        log.in_place_writes += 1;
        selected.push(r);
    }
    Ok(selected)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedRouterConfig<T> {
    pub tiles: TileSpec,
    pub norm: NormKind,
    pub eps: T,
    /// Override the router and execute every token (layer 0).
    pub force_execute: bool,
}

impl<T: Scalar> FusedRouterConfig<T> {
    pub fn new(tiles: TileSpec) -> Self {
        FusedRouterConfig { tiles, norm: NormKind::MeanVariance, eps: T::from(1e-5).unwrap(), force_execute: false }
    }
}

/// Routing decisions and the submodule projection of the executed rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedOutput<T> {
    pub mask: Vec<bool>,
    /// Indices of executed rows, ascending.
    pub selected: Vec<usize>,
    /// One row per executed token.
    pub projected: Matrix<T>,
}

/// Route, normalize and project: a single sweep of each row block gives both router logits and the
/// normalization statistics; executed rows are normalized in place and multiplied by `w_sub`.
#[allow(clippy::too_many_arguments)]
pub fn fused_router_submodule<T: Scalar, E: MatmulEngine<T>>(
    x: &Matrix<T>,
    router: &RouterParams<T>,
    gamma: &[T],
    w_sub: &Linear<T>,
    cfg: &FusedRouterConfig<T>,
    gumbel: &mut GumbelRouter,
    engine: &E,
    log: &mut AccessLog,
) -> Result<RoutedOutput<T>, DataflowError> {
    if w_sub.rows() != x.cols() {
        return Err(DataflowError::Shape(format!("projection expects width {}, input has {}", w_sub.rows(), x.cols())));
    }
    let tiles = cfg.tiles;
    let mut mask = Vec::with_capacity(x.rows());
    let mut selected = Vec::new();
    let mut out_rows: Vec<Vec<T>> = Vec::new();
    for (bi, start) in (0..x.rows()).step_by(tiles.row_tile).enumerate() {
        let end = (start + tiles.row_tile).min(x.rows());
        let mut block = x.row_block(start, end);
        let (logits, stats) = router_stats_pass(&block, router, &tiles, cfg.norm, engine, bi, log)?;
        let mut decisions = gumbel.route(&logits)?;
        if cfg.force_execute {
            decisions.iter_mut().for_each(|d| *d = true);
        }
        let local = normalize_selected(&mut block, &stats, gamma, &decisions, cfg.eps, log)?;
        for &r in &local {
            let row = block.row(r);
            let mut out = vec![T::zero(); w_sub.cols()];
            for cols in tile_ranges(w_sub.cols(), tiles.col_tile) {
                for c in cols {
                    let mut acc = T::zero();
                    for k in tile_ranges(x.cols(), tiles.reduce_tile) {
                        acc = acc + engine.partial_dot(row, w_sub, c, k);
                    }
                    out[c] = acc;
                }
            }
            out_rows.push(out);
            selected.push(start + r);
        }
        mask.extend(decisions);
    }
    let y = if out_rows.is_empty() { Matrix::zeros(0, w_sub.cols()) } else { Matrix::from_rows(&out_rows)? };
    Ok(RoutedOutput { mask, selected, projected: y })
}

/// Unfused pipeline: full logits, route, select, two-pass normalization, plain matmul.
pub fn reference_router_submodule<T: Scalar>(
    x: &Matrix<T>,
    router: &RouterParams<T>,
    gamma: &[T],
    w_sub: &Linear<T>,
    cfg: &FusedRouterConfig<T>,
    gumbel: &mut GumbelRouter,
) -> Result<RoutedOutput<T>, DataflowError> {
    let mut logits = x.matmul(&router.w_theta.dense)?;
    for r in 0..logits.rows() {
        for c in 0..2 {
            logits.set(r, c, logits.get(r, c) + router.bias[c]);
        }
    }
    let mut mask = gumbel.route(&logits)?;
    if cfg.force_execute {
        mask.iter_mut().for_each(|d| *d = true);
    }
    let selected: Vec<usize> = (0..x.rows()).filter(|&r| mask[r]).collect();
    let d = T::from(x.cols()).unwrap();
    let mut normed = x.select_rows(&selected);
    for (r, &token) in selected.iter().enumerate() {
        let row = normed.row(r).to_vec();
        let mu = match cfg.norm {
            NormKind::MeanVariance => row.iter().fold(T::zero(), |a, &v| a + v) / d,
            NormKind::RmsOnly => T::zero(),
        };
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / d;
        let denom = (var + cfg.eps).sqrt();
        if denom == T::zero() {
            return Err(DataflowError::DegenerateRow(token));
        }
        for (o, (&v, &g)) in normed.row_mut(r).iter_mut().zip(row.iter().zip(gamma)) {
            *o = (v - mu) / denom * g;
        }
    }
    let y = normed.matmul(&w_sub.dense)?;
    Ok(RoutedOutput { mask, selected, projected: y })
}

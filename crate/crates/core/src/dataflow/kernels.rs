use crate::Scalar;

use super::matrix::Matrix;
use super::DataflowError;

/// Precomputed rotary angles per (position, pair index).
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable<T> {
    pub cos: Matrix<T>,
    pub sin: Matrix<T>,
    pub d_head: usize,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(max_positions: usize, d_head: usize, base: f64) -> Result<Self, DataflowError> {
        if !d_head.is_multiple_of(2) {
            return Err(DataflowError::Shape(format!("rotary head width {d_head} must be even")));
        }
        let half = d_head / 2;
        let angle = |p: usize, i: usize| p as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
        Ok(RopeTable {
            cos: Matrix::from_fn(max_positions, half, |p, i| T::from(angle(p, i).cos()).unwrap()),
            sin: Matrix::from_fn(max_positions, half, |p, i| T::from(angle(p, i).sin()).unwrap()),
            d_head,
        })
    }

    pub fn max_positions(&self) -> usize {
        self.cos.rows()
    }
}

/// Rotates (even, odd) element pairs of every head chunk of the masked rows; other rows pass through untouched.
pub fn rope_apply<T: Scalar>(
    rows: &mut Matrix<T>,
    positions: &[usize],
    table: &RopeTable<T>,
    mask: &[bool],
) -> Result<(), DataflowError> {
    if positions.len() != rows.rows() || mask.len() != rows.rows() || !rows.cols().is_multiple_of(table.d_head) {
        return Err(DataflowError::Shape("rotary inputs disagree in shape".into()));
    }
    for r in 0..rows.rows() {
        if !mask[r] {
            continue;
        }
        let p = positions[r];
        if p >= table.max_positions() {
            return Err(DataflowError::Position(p));
        }
        let row = rows.row_mut(r);
        for chunk in row.chunks_mut(table.d_head) {
            for i in 0..table.d_head / 2 {
                let (c, s) = (table.cos.get(p, i), table.sin.get(p, i));
                let (e, o) = (chunk[2 * i], chunk[2 * i + 1]);
                chunk[2 * i] = e * c - o * s;
                chunk[2 * i + 1] = e * s + o * c;
            }
        }
    }
    Ok(())
}

/// `z / (1 + exp(-z))`.
pub fn silu<T: Scalar>(z: T) -> T {
    z / (T::one() + (-z).exp())
}

pub fn swiglu<T: Scalar>(gate: &Matrix<T>, up: &Matrix<T>) -> Result<Matrix<T>, DataflowError> {
    if gate.rows() != up.rows() || gate.cols() != up.cols() {
        return Err(DataflowError::Shape("gate and up tiles differ in shape".into()));
    }
    Ok(Matrix::from_fn(gate.rows(), gate.cols(), |r, c| silu(gate.get(r, c)) * up.get(r, c)))
}

/// SwiGLU over a tile whose columns alternate gate and up values.
pub fn swiglu_interleaved<T: Scalar>(tile: &Matrix<T>) -> Result<Matrix<T>, DataflowError> {
    if !tile.cols().is_multiple_of(2) {
        return Err(DataflowError::Shape("interleaved tile needs an even column count".into()));
    }
    Ok(Matrix::from_fn(tile.rows(), tile.cols() / 2, |r, c| silu(tile.get(r, 2 * c)) * tile.get(r, 2 * c + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn position_zero_is_identity() {
        let table = RopeTable::<f64>::new(8, 4, 10000.0).unwrap();
        let mut rows = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let before = rows.clone();
        rope_apply(&mut rows, &[0], &table, &[true]).unwrap();
        assert_eq!(rows, before);
        assert!(rope_apply(&mut rows, &[8], &table, &[true]).is_err());
    }

    #[test]
    fn unmasked_rows_untouched() {
        let table = RopeTable::<f64>::new(8, 2, 10000.0).unwrap();
        let mut rows = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.3, -0.7]]).unwrap();
        rope_apply(&mut rows, &[3, 5], &table, &[true, false]).unwrap();
        assert_eq!(rows.row(1), &[0.3, -0.7]);
        assert_ne!(rows.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn swiglu_limits() {
        let z = Matrix::from_rows(&[vec![0.0f64, 40.0]]).unwrap();
        let u = Matrix::from_rows(&[vec![3.0, 2.0]]).unwrap();
        let out = swiglu(&z, &u).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        assert!((out.get(0, 1) - 80.0).abs() < 1e-12);
        let inter = Matrix::from_rows(&[vec![0.0, 3.0, 40.0, 2.0]]).unwrap();
        assert_eq!(swiglu_interleaved(&inter).unwrap(), out);
    }

    proptest! {
        #[test]
        fn matches_complex_rotation(x in proptest::collection::vec(-3.0f64..3.0, 8), pos in 0usize..64) {
            let table = RopeTable::<f64>::new(64, 8, 10000.0).unwrap();
            let mut rows = Matrix::from_rows(std::slice::from_ref(&x)).unwrap();
            rope_apply(&mut rows, &[pos], &table, &[true]).unwrap();
            for i in 0..4 {
                let theta = pos as f64 * 10000f64.powf(-2.0 * i as f64 / 8.0);
                // (a + ib) * e^{i theta}
                let (a, b) = (x[2 * i], x[2 * i + 1]);
                let re = a * theta.cos() - b * theta.sin();
                let im = a * theta.sin() + b * theta.cos();
                prop_assert!((rows.get(0, 2 * i) - re).abs() <= 1e-12);
                prop_assert!((rows.get(0, 2 * i + 1) - im).abs() <= 1e-12);
                let n0 = (a * a + b * b).sqrt();
                let n1 = (rows.get(0, 2 * i).powi(2) + rows.get(0, 2 * i + 1).powi(2)).sqrt();
                prop_assert!((n0 - n1).abs() <= 1e-12);
            }
        }

        #[test]
        fn swiglu_matches_formula(g in -20.0f64..20.0, u in -5.0f64..5.0) {
            let out = swiglu(&Matrix::from_rows(&[vec![g]]).unwrap(), &Matrix::from_rows(&[vec![u]]).unwrap()).unwrap();
            let expected = g * u / (1.0 + (-g).exp());
            prop_assert!((out.get(0, 0) - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }
}

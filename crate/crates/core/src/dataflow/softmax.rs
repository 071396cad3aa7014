use crate::Scalar;

use super::matrix::Matrix;
use super::DataflowError;

/// Score value standing in for a masked position.
pub fn masked<T: Scalar>() -> T {
    T::min_value()
}

fn is_masked<T: Scalar>(v: T) -> bool {
    v == T::min_value()
}

/// Running row max and the exponential sum rescaled to it.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxFeatures<T> {
    pub row_max: Vec<T>,
    pub row_sum: Vec<T>,
}

impl<T: Scalar> SoftmaxFeatures<T> {
    pub fn new(rows: usize) -> Self {
        SoftmaxFeatures { row_max: vec![T::neg_infinity(); rows], row_sum: vec![T::zero(); rows] }
    }

    pub fn rows(&self) -> usize {
        self.row_max.len()
    }
}

/// Folds one score tile into the running features. Fully masked rows are left untouched.
pub fn online_softmax_update<T: Scalar>(
    features: &mut SoftmaxFeatures<T>,
    tile: &Matrix<T>,
) -> Result<(), DataflowError> {
    if tile.rows() != features.rows() {
        return Err(DataflowError::Shape(format!("tile has {} rows, features {}", tile.rows(), features.rows())));
    }
    for r in 0..tile.rows() {
        let row = tile.row(r);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DataflowError::NonFiniteScore(r));
        }
        let live = row.iter().copied().filter(|&v| !is_masked(v));
        let Some(rowmax) = live.clone().reduce(T::max) else {
            continue;
        };
        let rowsum = live.fold(T::zero(), |a, v| a + (v - rowmax).exp());
        let max_new = features.row_max[r].max(rowmax);
        features.row_sum[r] =
            (features.row_max[r] - max_new).exp() * features.row_sum[r] + (rowmax - max_new).exp() * rowsum;
        features.row_max[r] = max_new;
    }
    Ok(())
}

/// Second-pass rescale `exp(score - row_max) / row_sum`; masked positions become exactly zero.
pub fn normalize_scores<T: Scalar>(
    tile: &Matrix<T>,
    features: &SoftmaxFeatures<T>,
) -> Result<Matrix<T>, DataflowError> {
    if tile.rows() != features.rows() {
        return Err(DataflowError::Shape(format!("tile has {} rows, features {}", tile.rows(), features.rows())));
    }
    let mut p = Matrix::zeros(tile.rows(), tile.cols());
    for r in 0..tile.rows() {
        if features.row_sum[r] == T::zero() {
            return Err(DataflowError::ZeroDenominator(r));
        }
        for c in 0..tile.cols() {
            let s = tile.get(r, c);
            if !is_masked(s) {
                p.set(r, c, (s - features.row_max[r]).exp() / features.row_sum[r]);
            }
        }
    }
    Ok(p)
}

/// Direct softmax of each row, the reference for the tiled path.
pub fn softmax_rows<T: Scalar>(scores: &Matrix<T>) -> Matrix<T> {
    let mut p = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let m = row.iter().copied().filter(|&v| !is_masked(v)).fold(T::neg_infinity(), T::max);
        let sum = row.iter().filter(|&&v| !is_masked(v)).fold(T::zero(), |a, &v| a + (v - m).exp());
        for (c, &v) in row.iter().enumerate() {
            if !is_masked(v) {
                p.set(r, c, (v - m).exp() / sum);
            }
        }
    }
    p
}

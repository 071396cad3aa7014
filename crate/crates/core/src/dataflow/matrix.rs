use crate::numerics::{encode_fp16_saturating, Fp16Bits, Int4Val};
use crate::Scalar;

use super::DataflowError;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, DataflowError> {
        if data.len() != rows * cols {
            return Err(DataflowError::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, DataflowError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DataflowError::Shape("ragged rows".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Self {
        Matrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Self {
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Straightforward triple loop, left-to-right accumulation.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>, DataflowError> {
        if self.cols != other.rows {
            return Err(DataflowError::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for c in 0..other.cols {
                let mut acc = T::zero();
                for k in 0..self.cols {
                    acc = acc + self.get(r, k) * other.get(k, c);
                }
                out.set(r, c, acc);
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| U::from(v).unwrap()).collect() }
    }

    /// Largest elementwise difference relative to the largest magnitude of `reference`.
    pub fn max_rel_diff(&self, reference: &Matrix<T>) -> f64 {
        assert_eq!((self.rows, self.cols), (reference.rows, reference.cols));
        let scale = reference.data.iter().fold(0.0f64, |m, v| m.max(v.to_f64().unwrap().abs())).max(f64::MIN_POSITIVE);
        self.data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.to_f64().unwrap() - b.to_f64().unwrap()).abs()))
            / scale
    }
}

/// Per-output-channel symmetric 4-bit weights with FP16 scales.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights {
    /// Column-major: `codes[c * rows + r]`.
    pub codes: Vec<Int4Val>,
    pub scales: Vec<Fp16Bits>,
    pub rows: usize,
}

impl QuantizedWeights {
    pub fn column(&self, c: usize) -> &[Int4Val] {
        &self.codes[c * self.rows..(c + 1) * self.rows]
    }
}

/// Weight matrix of a linear layer. When quantized, `dense` holds the exact dequantized values.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub dense: Matrix<T>,
    pub quantized: Option<QuantizedWeights>,
}

impl<T: Scalar> Linear<T> {
    pub fn dense(w: Matrix<T>) -> Self {
        Linear { dense: w, quantized: None }
    }

    /// Symmetric per-column quantization: scale = max|w| / 7 rounded to FP16, codes = round(w / scale).
    pub fn quantize_int4(w: &Matrix<T>) -> Self {
        let (rows, cols) = (w.rows(), w.cols());
        let mut codes = Vec::with_capacity(rows * cols);
        let mut scales = Vec::with_capacity(cols);
        let mut dense = Matrix::zeros(rows, cols);
        for c in 0..cols {
            let amax = (0..rows).fold(0.0f64, |m, r| m.max(w.get(r, c).to_f64().unwrap().abs()));
            let scale_bits = encode_fp16_saturating(if amax > 0.0 { amax / 7.0 } else { 1.0 }).expect("finite scale");
            let scale_bits =
                if scale_bits.is_zero() || scale_bits.is_subnormal() { Fp16Bits(0x0400) } else { scale_bits };
            let scale = scale_bits.to_f64();
            for r in 0..rows {
                let q = (w.get(r, c).to_f64().unwrap() / scale).round().clamp(-8.0, 7.0) as i8;
                codes.push(Int4Val::new(q).expect("clamped"));
                dense.set(r, c, T::from(q as f64 * scale).unwrap());
            }
            scales.push(scale_bits);
        }
        Linear { dense, quantized: Some(QuantizedWeights { codes, scales, rows }) }
    }

    pub fn rows(&self) -> usize {
        self.dense.rows()
    }

    pub fn cols(&self) -> usize {
        self.dense.cols()
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear { dense: self.dense.cast(), quantized: self.quantized.clone() }
    }

    /// Reorders columns so that gate and up projections alternate: `[g0, u0, g1, u1, ...]`.
    pub fn interleave(gate: &Linear<T>, up: &Linear<T>) -> Result<Linear<T>, DataflowError> {
        if gate.rows() != up.rows() || gate.cols() != up.cols() {
            return Err(DataflowError::Shape("gate/up projections differ in shape".into()));
        }
        let n = gate.cols();
        let pick = |c: usize| if c.is_multiple_of(2) { (gate, c / 2) } else { (up, c / 2) };
        let dense = Matrix::from_fn(gate.rows(), 2 * n, |r, c| {
            let (src, cc) = pick(c);
            src.dense.get(r, cc)
        });
        let quantized = match (&gate.quantized, &up.quantized) {
            (Some(_), Some(_)) => {
                let mut codes = Vec::new();
                let mut scales = Vec::new();
                for c in 0..2 * n {
                    let (src, cc) = pick(c);
                    let q = src.quantized.as_ref().unwrap();
                    codes.extend_from_slice(q.column(cc));
                    scales.push(q.scales[cc]);
                }
                Some(QuantizedWeights { codes, scales, rows: gate.rows() })
            }
            (None, None) => None,
            _ => return Err(DataflowError::Shape("mixed quantized and dense projections".into())),
        };
        Ok(Linear { dense, quantized })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert!(a.matmul(&Matrix::<f64>::zeros(3, 1)).is_err());
    }

    #[test]
    fn int4_round_trip_within_one_step() {
        let w = Matrix::from_fn(16, 4, |r, c| ((r * 7 + c * 3) as f64 * 0.37).sin());
        let q = Linear::quantize_int4(&w);
        let qw = q.quantized.as_ref().unwrap();
        for c in 0..4 {
            let step = qw.scales[c].to_f64();
            for r in 0..16 {
                let back = qw.column(c)[r].value() as f64 * step;
                assert!((back - w.get(r, c)).abs() <= step);
                assert_eq!(back, q.dense.get(r, c));
            }
        }
    }

    #[test]
    fn interleave_alternates_columns() {
        let g = Linear::dense(Matrix::from_fn(2, 2, |r, c| (10 * r + c) as f64));
        let u = Linear::dense(Matrix::from_fn(2, 2, |r, c| (100 + 10 * r + c) as f64));
        let i = Linear::interleave(&g, &u).unwrap();
        assert_eq!(i.dense.row(0), &[0.0, 100.0, 1.0, 101.0]);
    }
}

use std::ops::Range;

use crate::numerics::{encode_fp16_saturating, pe_dot, Fp16Bits, Int4Val, PeColumnConfig, PeImpl, PeMode, Weights};
use crate::Scalar;

use super::matrix::Linear;

/// Partial dot product of an activation row with one weight column over a reduction range.
pub trait MatmulEngine<T: Scalar> {
    fn partial_dot(&self, x: &[T], w: &Linear<T>, col: usize, k: Range<usize>) -> T;

    /// Dot product of two activation vectors (attention scores and value mixing).
    fn vec_dot(&self, a: &[T], b: &[T]) -> T;
}

/// Reference arithmetic in the scalar type itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactEngine;

impl<T: Scalar> MatmulEngine<T> for ExactEngine {
    fn partial_dot(&self, x: &[T], w: &Linear<T>, col: usize, k: Range<usize>) -> T {
        k.fold(T::zero(), |acc, i| acc + x[i] * w.dense.get(i, col))
    }

    fn vec_dot(&self, a: &[T], b: &[T]) -> T {
        a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
    }
}

/// Routes every reduction through the bit-level PE column in 64-lane chunks.
/// Activations are rounded to FP16 on the way in; chunk results are summed in `T`.
#[derive(Clone, Copy, Debug)]
pub struct DeviceEngine {
    pub implementation: PeImpl,
}

impl Default for DeviceEngine {
    fn default() -> Self {
        DeviceEngine { implementation: PeImpl::Impl1 }
    }
}

fn to_fp16<T: Scalar>(v: T) -> Fp16Bits {
    encode_fp16_saturating(v.to_f64().unwrap()).expect("finite activation").flush_subnormal().0
}

impl DeviceEngine {
    fn depth(&self) -> usize {
        crate::numerics::pe::DEFAULT_DEPTH
    }

    fn fp16_dot(&self, a: &[Fp16Bits], b: &[Fp16Bits]) -> f64 {
        let depth = self.depth();
        let cfg = PeColumnConfig::new(PeMode::Fp16Fp16, self.implementation);
        let mut total = 0.0;
        for start in (0..a.len()).step_by(depth) {
            let end = (start + depth).min(a.len());
            let mut x = vec![Fp16Bits::ZERO; depth];
            let mut w = vec![Fp16Bits::ZERO; depth];
            x[..end - start].copy_from_slice(&a[start..end]);
            w[..end - start].copy_from_slice(&b[start..end]);
            total += pe_dot(&x, Weights::Fp16(&w), &cfg).expect("valid column").value.to_f64();
        }
        total
    }

    fn int4_dot(&self, a: &[Fp16Bits], q: &[Int4Val]) -> f64 {
        let depth = self.depth();
        let cfg = PeColumnConfig::new(PeMode::Fp16Int4, self.implementation);
        let mut total = 0.0;
        for start in (0..a.len()).step_by(depth) {
            let end = (start + depth).min(a.len());
            let mut x = vec![Fp16Bits::ZERO; depth];
            let mut w = vec![Int4Val::default(); depth];
            x[..end - start].copy_from_slice(&a[start..end]);
            w[..end - start].copy_from_slice(&q[start..end]);
            total += pe_dot(&x, Weights::Int4(&w), &cfg).expect("valid column").value.to_f64();
        }
        total
    }
}

impl<T: Scalar> MatmulEngine<T> for DeviceEngine {
    fn partial_dot(&self, x: &[T], w: &Linear<T>, col: usize, k: Range<usize>) -> T {
        let a: Vec<Fp16Bits> = x[k.clone()].iter().map(|&v| to_fp16(v)).collect();
        let value = match &w.quantized {
            Some(q) => {
                let codes = &q.column(col)[k];
                self.int4_dot(&a, codes) * q.scales[col].to_f64()
            }
            None => {
                let b: Vec<Fp16Bits> = k.map(|i| to_fp16(w.dense.get(i, col))).collect();
                self.fp16_dot(&a, &b)
            }
        };
        T::from(value).unwrap()
    }

    fn vec_dot(&self, a: &[T], b: &[T]) -> T {
        let a: Vec<Fp16Bits> = a.iter().map(|&v| to_fp16(v)).collect();
        let b: Vec<Fp16Bits> = b.iter().map(|&v| to_fp16(v)).collect();
        T::from(self.fp16_dot(&a, &b)).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::matrix::Matrix;

    #[test]
    fn device_engine_tracks_exact() {
        let w = Linear::dense(Matrix::from_fn(100, 3, |r, c| ((r + 3 * c) as f64 * 0.11).cos()));
        let x: Vec<f32> = (0..100).map(|i| (i as f32 * 0.07).sin()).collect();
        let wf: Linear<f32> = Linear::dense(w.dense.cast());
        for c in 0..3 {
            let exact: f32 = ExactEngine.partial_dot(&x, &wf, c, 0..100);
            let dev: f32 = DeviceEngine::default().partial_dot(&x, &wf, c, 0..100);
            assert!((exact - dev).abs() < 0.02 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn device_engine_int4_applies_scale() {
        let w = Matrix::from_fn(64, 2, |r, c| ((r * 5 + c) as f64 * 0.3).sin());
        let q: Linear<f64> = Linear::quantize_int4(&w);
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.05).cos()).collect();
        for c in 0..2 {
            let exact = ExactEngine.partial_dot(&x, &q, c, 0..64);
            let dev = DeviceEngine::default().partial_dot(&x, &q, c, 0..64);
            assert!((exact - dev).abs() < 0.01 * exact.abs().max(1.0), "{exact} vs {dev}");
        }
    }
}

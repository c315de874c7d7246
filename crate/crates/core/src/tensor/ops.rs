//! Elementwise and row-wise numerical primitives shared by the forward-only
//! tensor API and the gradient tape.

use super::{Element, Tensor};
use crate::error::{Error, Result};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via erf.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Exact GeLU: `x * Phi(x)`.
#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let x = x.to_f64();
    T::from_f64(x * normal_cdf(x))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    let x = x.to_f64();
    let y = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    T::from_f64(y)
}

/// Softmax over each row of a `rows x cols` buffer.
pub(crate) fn softmax_rows<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    let mut tmp = vec![0.0f64; cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (t, v) in tmp.iter_mut().zip(row) {
            *t = libm::exp(v.to_f64() - max);
            sum += *t;
        }
        for (o, t) in out[r * cols..(r + 1) * cols].iter_mut().zip(&tmp) {
            *o = T::from_f64(t / sum);
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| libm::exp(v.to_f64() - max)).sum();
        let lse = max + libm::log(sum);
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = T::from_f64(v.to_f64() - lse);
        }
    }
    out
}

/// Layer normalisation of each row (no affine parameters). Returns the
/// normalised values and the per-row reciprocal standard deviations.
pub(crate) fn layer_norm_rows<T: Element>(
    x: &[T],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<T>, Vec<f64>) {
    let mut out = vec![T::ZERO; x.len()];
    let mut rstds = Vec::with_capacity(rows);
    let n = cols as f64;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
        let rstd = 1.0 / libm::sqrt(var + eps);
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = T::from_f64((v.to_f64() - mean) * rstd);
        }
        rstds.push(rstd);
    }
    (out, rstds)
}

/// Softmax along an arbitrary axis of an N-d tensor.
pub(crate) fn softmax_axis<T: Element>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let x = t.data();
    let mut out = vec![T::ZERO; x.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)].to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = libm::exp(x[at(k)].to_f64() - max);
                sum += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[at(k)] = T::from_f64(b / sum);
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maclaurin series for erf, used as an independent oracle.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..80 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        let oracle = 1.0 * 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu(1.0f64) - oracle).abs() < 1e-12);
        assert!((gelu(1.0f32) as f64 - 0.841345).abs() < 1e-5);
        assert!(gelu(-10.0f64).abs() < 1e-8);
    }

    #[test]
    fn gelu_derivative_at_zero() {
        assert_eq!(gelu_grad(0.0), 0.5);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        for x in [-7.5, -1.0, 0.3, 2.0, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0f64).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&[1.0f64, 1.0, 1.0], 1, 3);
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax_rows(&[0.0f64, 3f64.ln()], 1, 2);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_axis_zero_normalises_columns() {
        let t = Tensor::<f64>::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 5.0, -1.0]).unwrap();
        let s = t.softmax(0).unwrap();
        for j in 0..3 {
            let col = s.data()[j] + s.data()[3 + j];
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert_eq!(t.softmax(1).unwrap().data(), softmax_rows(t.data(), 2, 3).as_slice());
        assert!(t.softmax(2).is_err());
    }

    #[test]
    fn layer_norm_rows_zero_mean_unit_var() {
        let x = [1.0f64, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 8.0];
        let (y, _) = layer_norm_rows(&x, 2, 4, 0.0);
        for r in 0..2 {
            let row = &y[r * 4..r * 4 + 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}

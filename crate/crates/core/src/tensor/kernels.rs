//! Matrix product kernels.
//!
//! Operands are widened to f64 and every output element is reduced over the
//! inner dimension in ascending order, so results are bit-identical whatever
//! vector width the CPU offers. No fused multiply-add is used.

use super::Element;

fn widen<T: Element>(src: &[T]) -> Vec<f64> {
    src.iter().map(|v| v.to_f64()).collect()
}

fn widen_transposed<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j].to_f64();
        }
    }
    out
}

const MR: usize = 4;
const NR: usize = 16;

/// `out[m x p] = a[m x n] · b[n x p]`. Output tiles of `MR x NR` are held in
/// registers while `k` runs; each element is still the plain ascending-`k`
/// sum, so every tiling gives identical bits.
#[inline(always)]
fn gemm_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    let pj = p - p % NR;
    let mi = m - m % MR;
    for j0 in (0..pj).step_by(NR) {
        for i0 in (0..mi).step_by(MR) {
            let mut acc = [[0.0f64; NR]; MR];
            for k in 0..n {
                let br: &[f64; NR] = b[k * p + j0..k * p + j0 + NR].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * n + k];
                    for c in 0..NR {
                        row[c] += av * br[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * p + j0..(i0 + r) * p + j0 + NR].copy_from_slice(row);
            }
        }
        for i in mi..m {
            let mut acc = [0.0f64; NR];
            for k in 0..n {
                let br: &[f64; NR] = b[k * p + j0..k * p + j0 + NR].try_into().expect("tile");
                let av = a[i * n + k];
                for c in 0..NR {
                    acc[c] += av * br[c];
                }
            }
            out[i * p + j0..i * p + j0 + NR].copy_from_slice(&acc);
        }
    }
    if pj < p {
        for i in 0..m {
            for j in pj..p {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[i * n + k] * b[k * p + j];
                }
                out[i * p + j] = s;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    gemm_body(a, b, out, m, n, p)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    gemm_body(a, b, out, m, n, p)
}

fn gemm(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            unsafe { gemm_avx512(a, b, &mut out, m, n, p) };
            return out;
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_avx2(a, b, &mut out, m, n, p) };
            return out;
        }
    }
    gemm_body(a, b, &mut out, m, n, p);
    out
}

fn narrow<T: Element>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

/// `a[m x n] · b[n x p]`.
pub(crate) fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    narrow(gemm(&widen(a), &widen(b), m, n, p))
}

/// `a[m x n] · b[p x n]^T`.
pub(crate) fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    narrow(gemm(&widen(a), &widen_transposed(b, p, n), m, n, p))
}

/// `a[m x n]^T · b[m x p]`.
pub(crate) fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    narrow(gemm(&widen_transposed(a, m, n), &widen(b), n, m, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[i * n + k] * b[k * p + j];
                }
                out[i * p + j] = s;
            }
        }
        out
    }

    #[test]
    fn blocked_kernel_matches_naive_bitwise() {
        let (m, n, p) = (7, 5, 9);
        let a: Vec<f64> = (0..m * n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..n * p).map(|i| ((i * 17 % 13) as f64 - 6.0) / 7.0).collect();
        let fast = matmul_nn(&a, &b, m, n, p);
        let slow = naive(&a, &b, m, n, p);
        assert!(fast.iter().zip(&slow).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn every_dispatch_path_is_bit_identical() {
        let (m, n, p) = (9, 33, 37);
        let a: Vec<f64> = (0..m * n).map(|i| ((i * 7919 % 1000) as f64).sin()).collect();
        let b: Vec<f64> = (0..n * p).map(|i| ((i * 104_729 % 1000) as f64).cos()).collect();
        let mut scalar = vec![0.0; m * p];
        gemm_body(&a, &b, &mut scalar, m, n, p);
        assert_eq!(gemm(&a, &b, m, n, p), scalar);
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            let mut wide = vec![0.0; m * p];
            // SAFETY: guarded by runtime detection.
            unsafe { gemm_avx2(&a, &b, &mut wide, m, n, p) };
            assert!(wide.iter().zip(&scalar).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let (m, n, p) = (3, 4, 2);
        let a: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..n * p).map(|i| 1.0 - i as f64 * 0.25).collect();
        let reference = naive(&a, &b, m, n, p);
        let bt = widen_transposed(&b, n, p);
        assert_eq!(matmul_nt(&a, &bt, m, n, p), reference);
        let at = widen_transposed(&a, m, n);
        assert_eq!(matmul_tn(&at, &b, n, m, p), reference);
    }
}

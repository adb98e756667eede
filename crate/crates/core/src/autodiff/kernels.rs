//! Dense numeric kernels shared by the tape ops and the tensor helpers.
//!
//! Everything here works on flat row-major slices; shape bookkeeping lives in
//! the callers.

use rayon::prelude::*;

use super::Element;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PARALLEL_WORK: usize = 1 << 16;

/// `out (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `trans_a` means `a` is stored as `k×m`; `trans_b` means `b` is stored as
/// `n×k`. When `accumulate` is false `out` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Element>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.iter_mut().for_each(|v| *v = F::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let row = |i: usize, out_row: &mut [F]| {
        match (trans_a, trans_b) {
            (false, false) => {
                let a_row = &a[i * k..(i + 1) * k];
                for (p, &av) in a_row.iter().enumerate() {
                    if av == F::zero() {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            (false, true) => {
                let a_row = &a[i * k..(i + 1) * k];
                for (j, o) in out_row.iter_mut().enumerate() {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut acc = F::zero();
                    for (&x, &y) in a_row.iter().zip(b_row) {
                        acc += x * y;
                    }
                    *o += acc;
                }
            }
            (true, false) => {
                for p in 0..k {
                    let av = a[p * m + i];
                    if av == F::zero() {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            (true, true) => {
                for (j, o) in out_row.iter_mut().enumerate() {
                    let mut acc = F::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    *o += acc;
                }
            }
        }
    };
    if m * n * k >= PARALLEL_WORK && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        out.chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    }
}

/// Row-wise `softmax(x * inv_t)` over the trailing axis of width `k`,
/// stabilized by subtracting each row's maximum.
pub fn softmax_rows<F: Element>(x: &[F], k: usize, inv_t: F, out: &mut [F]) {
    for (src, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) * inv_t).exp();
            total += *d;
        }
        let inv = F::one() / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
}

/// Row-wise `log_softmax(x * inv_t)` over the trailing axis of width `k`.
pub fn log_softmax_rows<F: Element>(x: &[F], k: usize, inv_t: F, out: &mut [F]) {
    for (src, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for &s in src {
            total += ((s - max) * inv_t).exp();
        }
        let log_z = total.ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max) * inv_t - log_z;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu<F: Element>(x: F) -> F {
    let c = F::of_f64(GELU_C);
    let a = F::of_f64(GELU_A);
    let half = F::of_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Element>(x: F) -> F {
    let c = F::of_f64(GELU_C);
    let a = F::of_f64(GELU_A);
    let half = F::of_f64(0.5);
    let three = F::of_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `x` (with shape `shape`) into `out` so that output axis `i` is input
/// axis `axes[i]`.
pub fn permute<F: Element>(x: &[F], shape: &[usize], axes: &[usize], out: &mut [F]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let rank = shape.len();
    let mut index = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for d in 0..rank {
            src += index[d] * in_strides[axes[d]];
        }
        *o = x[src];
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        out
    }

    #[test]
    fn gemm_all_transpose_variants_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let expected = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let lhs = if ta { &at } else { &a };
            let rhs = if tb { &bt } else { &b };
            let mut out = vec![0.0; m * n];
            gemm(lhs, rhs, &mut out, m, k, n, ta, tb, false);
            for (x, y) in out.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12, "{ta} {tb}");
            }
        }
    }

    #[test]
    fn permute_swaps_middle_axes() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let mut out = vec![0.0; 24];
        permute(&x, &[2, 3, 4], &[0, 2, 1], &mut out);
        // out[b, j, i] == x[b, i, j]
        assert_eq!(out[12 + 2 * 3 + 1], x[12 + 4 + 2]);
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-12);
    }
}

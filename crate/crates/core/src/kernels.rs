//! Row kernels shared by the autodiff graph and the incremental decoder.
//!
//! Every multi-row routine computes each output row with the same sequential
//! loop, so the parallel and sequential paths produce bitwise identical
//! results; only the distribution of rows over threads differs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_MIN_WORK: usize = 1 << 16;

/// Execution policy for the row-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon over rows when the `parallel` feature is on and the work is large
    /// enough; otherwise sequential.
    Auto,
}

/// Run `f(row_index, row)` over `out` split into rows of `row_len`.
pub fn for_each_row<F>(exec: Exec, out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Auto && work >= PARALLEL_MIN_WORK {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = (exec, work);
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += x · W` for a row vector `x[k]` and row-major `W[k, n]`.
#[inline]
pub fn vec_mat_acc(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
    for (p, &a) in x.iter().enumerate() {
        if a != 0.0 {
            axpy(a, &w[p * n..(p + 1) * n], out);
        }
    }
}

/// `x · W` for a row vector.
pub fn vec_mat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    vec_mat_acc(x, w, n, &mut out);
    out
}

/// `C[m, n] = A[m, k] · B[k, n]`.
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_row(exec, &mut c, n, m * k * n, |i, row| {
        vec_mat_acc(&a[i * k..(i + 1) * k], b, n, row)
    });
    c
}

/// `C[m, n] = A[m, k] · B[n, k]ᵀ`.
pub fn matmul_nt(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_row(exec, &mut c, n, m * k * n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// `C[k, n] = A[m, k]ᵀ · B[m, n]`, accumulated in ascending `m` for every entry.
pub fn matmul_tn(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for_each_row(exec, &mut c, n, m * k * n, |p, row| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[i * n..(i + 1) * n], row);
            }
        }
    });
    c
}

/// Numerically stable in-place softmax. `-inf` entries become exactly 0.
/// Returns `false` if the row has no finite entry.
pub fn softmax_in_place(row: &mut [f64]) -> bool {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return false;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// `log Σ exp(row)`, stable against overflow.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// RMS-normalize `x` in groups of `group` entries, scaling by `gain` (same
/// length as `x`). Writes into `out`, returns nothing; the inverse RMS of each
/// group is pushed to `inv_rms`.
pub fn rmsnorm_groups(x: &[f64], gain: &[f64], group: usize, eps: f64, out: &mut [f64], inv_rms: &mut Vec<f64>) {
    for ((xs, gs), os) in x
        .chunks(group)
        .zip(gain.chunks(group))
        .zip(out.chunks_mut(group))
    {
        let ms = xs.iter().map(|v| v * v).sum::<f64>() / group as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for ((o, &v), &g) in os.iter_mut().zip(xs).zip(gs) {
            *o = v * r * g;
        }
        inv_rms.push(r);
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of the exact GELU, `Φ(x) + x · φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// One causal attention row for a single head.
///
/// `keys`/`values` are row-major with row stride `stride`; the head occupies
/// columns `offset..offset + q.len()`. Keys `0..=last` are attended, with
/// `bias[k]` added to the scaled score of key `k`. `probs` receives the
/// attention weights and `out` the weighted value sum.
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    stride: usize,
    offset: usize,
    last: usize,
    bias: &[f64],
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let dk = q.len();
    for k in 0..=last {
        let kr = &keys[k * stride + offset..k * stride + offset + dk];
        probs[k] = dot(q, kr) * scale + bias[k];
    }
    softmax_in_place(&mut probs[..=last]);
    out.iter_mut().for_each(|o| *o = 0.0);
    for k in 0..=last {
        axpy(
            probs[k],
            &values[k * stride + offset..k * stride + offset + dk],
            out,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_variants_agree_with_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (5, 4, 6);
        let a = random(&mut rng, m * k);
        let b = random(&mut rng, k * n);
        let c = matmul(Exec::Auto, &a, &b, m, k, n);
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let c_nt = matmul_nt(Exec::Auto, &a, &bt, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let c_tn = matmul_tn(Exec::Auto, &at, &b, k, m, n);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - want).abs() < 1e-12);
                assert!((c_nt[i * n + j] - want).abs() < 1e-12);
                assert!((c_tn[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_are_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (96, 80, 72);
        let a = random(&mut rng, m * k);
        let b = random(&mut rng, k * n);
        assert_eq!(
            matmul(Exec::Sequential, &a, &b, m, k, n),
            matmul(Exec::Auto, &a, &b, m, k, n)
        );
        let bt = random(&mut rng, n * k);
        assert_eq!(
            matmul_nt(Exec::Sequential, &a, &bt, m, k, n),
            matmul_nt(Exec::Auto, &a, &bt, m, k, n)
        );
        let c = random(&mut rng, m * n);
        assert_eq!(
            matmul_tn(Exec::Sequential, &a, &c, m, k, n),
            matmul_tn(Exec::Auto, &a, &c, m, k, n)
        );
    }

    #[test]
    fn softmax_masks_and_rejects_empty_rows() {
        let mut row = vec![2.5, f64::NEG_INFINITY];
        assert!(softmax_in_place(&mut row));
        assert_eq!(row, vec![1.0, 0.0]);
        let mut dead = vec![f64::NEG_INFINITY; 3];
        assert!(!softmax_in_place(&mut dead));
    }
}

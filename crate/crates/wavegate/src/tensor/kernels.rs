//! Batched matrix-multiply kernels.
//!
//! Three contraction layouts cover forward and both backward passes:
//!
//! - `nn`: C[m,n] += A[m,k] · B[k,n]
//! - `nt`: C[m,n] += A[m,k] · B[n,k]ᵀ
//! - `tn`: C[k,n] += A[m,k]ᵀ · B[m,n]
//!
//! All kernels accumulate into `c` so gradient buffers can be written
//! without a separate add. Batches are laid out contiguously; `b_shared`
//! reuses one B (unbatched weight matrix) across the batch.
//!
//! With the `parallel` feature (default) the work is split over output rows
//! with rayon; each row is produced by one task with a fixed reduction
//! order, so results are identical to the sequential fallback.

use super::Real;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows below this many inner products are not worth a rayon dispatch.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 14;

#[inline]
fn nn_row<F: Real>(a_row: &[F], b: &[F], c_row: &mut [F], k: usize, n: usize) {
    for (p, &av) in a_row.iter().enumerate().take(k) {
        if av == F::zero() {
            continue;
        }
        let b_row = &b[p * n..p * n + n];
        for (cv, &bv) in c_row.iter_mut().zip(b_row) {
            *cv += av * bv;
        }
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // 4-way split accumulation: vectorizes well and keeps a fixed
    // summation order for determinism.
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

pub fn mm_nn_seq<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) {
    for bi in 0..batch {
        let a_b = &a[bi * m * k..(bi + 1) * m * k];
        let b_b = if b_shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
        let c_b = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            nn_row(&a_b[i * k..(i + 1) * k], b_b, &mut c_b[i * n..(i + 1) * n], k, n);
        }
    }
}

#[cfg(feature = "parallel")]
pub fn mm_nn_par<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    _batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) {
    c.par_chunks_mut(n).enumerate().for_each(|(row, c_row)| {
        let (bi, i) = (row / m, row % m);
        let a_row = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
        let b_b = if b_shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
        nn_row(a_row, b_b, c_row, k, n);
    });
}

pub fn mm_nn<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) {
    #[cfg(feature = "parallel")]
    {
        if batch * m * k * n >= PAR_MIN_WORK {
            return mm_nn_par(a, b, c, batch, m, k, n, b_shared);
        }
    }
    mm_nn_seq(a, b, c, batch, m, k, n, b_shared)
}

pub fn mm_nt_seq<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) {
    for bi in 0..batch {
        let a_b = &a[bi * m * k..(bi + 1) * m * k];
        let b_b = if b_shared { b } else { &b[bi * n * k..(bi + 1) * n * k] };
        let c_b = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let a_row = &a_b[i * k..(i + 1) * k];
            for j in 0..n {
                c_b[i * n + j] += dot(a_row, &b_b[j * k..(j + 1) * k]);
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn mm_nt_par<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    _batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) {
    c.par_chunks_mut(n).enumerate().for_each(|(row, c_row)| {
        let (bi, i) = (row / m, row % m);
        let a_row = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
        let b_b = if b_shared { b } else { &b[bi * n * k..(bi + 1) * n * k] };
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &b_b[j * k..(j + 1) * k]);
        }
    });
}

pub fn mm_nt<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) {
    #[cfg(feature = "parallel")]
    {
        if batch * m * k * n >= PAR_MIN_WORK {
            return mm_nt_par(a, b, c, batch, m, k, n, b_shared);
        }
    }
    mm_nt_seq(a, b, c, batch, m, k, n, b_shared)
}

pub fn mm_tn_seq<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for bi in 0..batch {
        let a_b = &a[bi * m * k..(bi + 1) * m * k];
        let b_b = &b[bi * m * n..(bi + 1) * m * n];
        let c_b = &mut c[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            let b_row = &b_b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_b[i * k + p];
                if av == F::zero() {
                    continue;
                }
                let c_row = &mut c_b[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn mm_tn_par<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    _batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    c.par_chunks_mut(n).enumerate().for_each(|(row, c_row)| {
        let (bi, p) = (row / k, row % k);
        let a_b = &a[bi * m * k..(bi + 1) * m * k];
        let b_b = &b[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let av = a_b[i * k + p];
            if av == F::zero() {
                continue;
            }
            let b_row = &b_b[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    });
}

pub fn mm_tn<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    #[cfg(feature = "parallel")]
    {
        if batch * m * k * n >= PAR_MIN_WORK {
            return mm_tn_par(a, b, c, batch, m, k, n);
        }
    }
    mm_tn_seq(a, b, c, batch, m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn rand_vec(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
        (0..n).map(|_| rng.next_normal()).collect()
    }

    #[test]
    fn nt_and_tn_agree_with_naive() {
        let mut rng = SplitMix64::new(5);
        let (m, k, n) = (7, 5, 9);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(k * n, &mut rng);
        let want = naive_nn(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        mm_nn_seq(&a, &b, &mut c, 1, m, k, n, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // nt with B stored transposed reproduces the nn product
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        mm_nt_seq(&a, &bt, &mut c, 1, m, k, n, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: C[k,n] = A^T B with B of shape [m,n]
        let bmn = rand_vec(m * n, &mut rng);
        let mut c = vec![0.0; k * n];
        mm_tn_seq(&a, &bmn, &mut c, 1, m, k, n);
        let mut want_tn = vec![0.0; k * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    want_tn[p * n + j] += a[i * k + p] * bmn[i * n + j];
                }
            }
        }
        for (x, y) in c.iter().zip(&want_tn) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let mut rng = SplitMix64::new(6);
        let (batch, m, k, n) = (3, 17, 33, 29);
        let a = rand_vec(batch * m * k, &mut rng);
        let b = rand_vec(batch * k * n, &mut rng);
        let mut cs = vec![0.0; batch * m * n];
        let mut cp = vec![0.0; batch * m * n];
        mm_nn_seq(&a, &b, &mut cs, batch, m, k, n, false);
        mm_nn_par(&a, &b, &mut cp, batch, m, k, n, false);
        assert_eq!(cs, cp);

        let bmn = rand_vec(batch * m * n, &mut rng);
        let mut cs = vec![0.0; batch * k * n];
        let mut cp = vec![0.0; batch * k * n];
        mm_tn_seq(&a, &bmn, &mut cs, batch, m, k, n);
        mm_tn_par(&a, &bmn, &mut cp, batch, m, k, n);
        assert_eq!(cs, cp);

        let bnk = rand_vec(batch * n * k, &mut rng);
        let mut cs = vec![0.0; batch * m * n];
        let mut cp = vec![0.0; batch * m * n];
        mm_nt_seq(&a, &bnk, &mut cs, batch, m, k, n, false);
        mm_nt_par(&a, &bnk, &mut cp, batch, m, k, n, false);
        assert_eq!(cs, cp);
    }
}

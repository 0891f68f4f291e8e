//! Small dense matmul kernels behind the convolution and linear layers.
//!
//! Accumulation order is fixed per output element (the shared reduction index
//! ascends sequentially), so results are bit-identical regardless of thread
//! count. Parallelism only ever splits disjoint output rows.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_FLOP_THRESHOLD: usize = 1 << 15;
const COL_BLOCK: usize = 2048;

/// `out[m, n] += a[m, k] * b[k, n]`
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [S], i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        let mut jb = 0;
        while jb < n {
            let je = (jb + COL_BLOCK).min(n);
            for (p, &aip) in a_row.iter().enumerate() {
                let b_row = &b[p * n + jb..p * n + je];
                let out_blk = &mut out_row[jb..je];
                for (o, &bv) in out_blk.iter_mut().zip(b_row.iter()) {
                    *o += aip * bv;
                }
            }
            jb = je;
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(r, i);
        }
    }
}

/// `out[k, n] += transpose(a)[k, m] * b[m, n]` with `a` stored as `m x k`.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |out_row: &mut [S], r: usize| {
        for i in 0..m {
            let coeff = a[i * k + r];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += coeff * bv;
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(r, row_slice)| row(row_slice, r));
    } else {
        for (r, row_slice) in out.chunks_mut(n).enumerate() {
            row(row_slice, r);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_example() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variant_matches_explicit_transpose() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64) * 0.25 - 1.0).collect();
        let b: Vec<f64> = (0..m * n).map(|v| (v as f64) * 0.5 - 3.0).collect();
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for r in 0..k {
                at[r * m + i] = a[i * k + r];
            }
        }
        let mut out1 = vec![0.0; k * n];
        matmul_tn_acc(&a, &b, &mut out1, m, k, n);
        let mut out2 = vec![0.0; k * n];
        matmul_acc(&at, &b, &mut out2, k, m, n);
        assert_eq!(out1, out2);
    }

    #[test]
    fn parallel_path_is_bit_identical_to_serial() {
        // Force both paths over the same inputs by size.
        let m = 64;
        let k = 33;
        let n = 67;
        let a: Vec<f32> = (0..m * k).map(|v| ((v * 2654435761usize) % 1000) as f32 * 1e-3 - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|v| ((v * 40503usize) % 1000) as f32 * 1e-3 - 0.5).collect();
        let mut big = vec![0.0f32; m * n];
        matmul_acc(&a, &b, &mut big, m, k, n);
        // Serial reference with identical per-element accumulation order.
        let mut serial = vec![0.0f32; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                for j in 0..n {
                    serial[i * n + j] += aip * b[p * n + j];
                }
            }
        }
        // Block tiling changes nothing because p stays the reduction axis.
        assert_eq!(big, serial);
    }
}

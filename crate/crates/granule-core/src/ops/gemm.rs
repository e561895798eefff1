//! Dense matrix products for convolution and linear layers.
//!
//! All three variants parallelize over rows of the output; the inner
//! reduction always runs in ascending-k order, so results do not depend on
//! the thread count.

use crate::par;
use crate::tensor::Element;

/// C = A·B with A: m×k, B: k×n, C: m×n (all row-major).
pub fn gemm_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![E::zero(); m * n];
    par::for_each_chunk_mut(&mut c, n, |row, c_row| {
        let a_row = &a[row * k..(row + 1) * k];
        for (kk, &a_value) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (c_value, &b_value) in c_row.iter_mut().zip(b_row) {
                *c_value = *c_value + a_value * b_value;
            }
        }
    });
    c
}

/// C = A·Bᵀ with A: m×k, B: n×k, C: m×n. Both operands are walked
/// contiguously, which suits `x·Wᵀ` in linear layers.
pub fn gemm_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![E::zero(); m * n];
    par::for_each_chunk_mut(&mut c, n, |row, c_row| {
        let a_row = &a[row * k..(row + 1) * k];
        for (col, c_value) in c_row.iter_mut().enumerate() {
            let b_row = &b[col * k..(col + 1) * k];
            let mut acc = E::zero();
            for (&a_value, &b_value) in a_row.iter().zip(b_row) {
                acc = acc + a_value * b_value;
            }
            *c_value = acc;
        }
    });
    c
}

/// C = Aᵀ·B with A: k×m, B: k×n, C: m×n. Used for weight gradients.
pub fn gemm_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![E::zero(); m * n];
    par::for_each_chunk_mut(&mut c, n, |row, c_row| {
        for kk in 0..k {
            let a_value = a[kk * m + row];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (c_value, &b_value) in c_row.iter_mut().zip(b_row) {
                *c_value = *c_value + a_value * b_value;
            }
        }
    });
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_matches_hand_product() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(gemm_nn(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn variants_agree_on_random_input() {
        let mut state = 1u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let c = gemm_nn(&a, &b, m, k, n);

        // A·B == (Bᵀ·Aᵀ)ᵀ exercised through gemm_nt: C[i][j] = row_i(A)·row_j(Bᵀ)
        let mut b_t = vec![0.0f64; n * k];
        for row in 0..k {
            for col in 0..n {
                b_t[col * k + row] = b[row * n + col];
            }
        }
        assert_eq!(gemm_nt(&a, &b_t, m, k, n), c);

        let mut a_t = vec![0.0f64; k * m];
        for row in 0..m {
            for col in 0..k {
                a_t[col * m + row] = a[row * k + col];
            }
        }
        assert_eq!(gemm_tn(&a_t, &b, m, k, n), c);
    }
}

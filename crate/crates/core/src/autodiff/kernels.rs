//! Row-major matrix kernels shared by forward and backward passes.
//!
//! All kernels accumulate into `c`; callers zero it when they want a plain product.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *c_ij += dot(a_row, b_row);
        }
    }
}

/// `c[p×q] += a[m×p]ᵀ · b[m×q]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let b_row = &b[i * q..(i + 1) * q];
        for (r, &a_ir) in a_row.iter().enumerate() {
            if a_ir == 0.0 {
                continue;
            }
            let c_row = &mut c[r * q..(r + 1) * q];
            for (c_rj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_rj += a_ir * b_ij;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators; summation order is fixed, so results are reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

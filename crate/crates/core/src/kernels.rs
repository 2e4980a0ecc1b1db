//! Shared dense-array arithmetic kernels.
//!
//! Both the plain `f64` math types and the tape primitives route through
//! these functions so that a taped forward pass reproduces the untaped
//! one operation for operation.

/// `c[m x n] = a[m x k] * b[k x n]`, row-major, accumulation in k-ascending order.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

/// `c[m x n] = a^T[m x k] * b[k x n]` where `a` is stored as `[k x m]`.
pub(crate) fn matmul_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[l * m + i] * b[l * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

/// `c[m x k] = a[m x n] * b^T` where `b` is stored as `[k x n]`.
pub(crate) fn matmul_tb(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..n {
                acc += a[i * n + l] * b[j * n + l];
            }
            c[i * k + j] = acc;
        }
    }
}

/// Dot product with index-ascending accumulation.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

//! Small free-function helpers on raw f64 slices: vectors and row-major
//! matrices with explicit dimensions. Shared by the tape, the integrators,
//! and the control oracles.

use alloc::vec;
use alloc::vec::Vec;

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| x * c).collect()
}

/// `a + c * b`.
pub fn axpy(a: &[f64], c: f64, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + c * y).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(norm2(a))
}

/// Logistic sigmoid. One shared definition so plain and tape forward
/// passes agree bitwise.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Squared Euclidean distance.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-major matmul: `a` is (m, k), `b` is (k, n); result (m, n).
pub fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// `a` is (rows, cols) row-major; returns `a · x`.
pub fn mat_vec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|i| dot(&a[i * cols..(i + 1) * cols], x)).collect()
}

/// `aᵀ · x` for `a` (rows, cols) row-major.
pub fn mat_t_vec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let xi = x[i];
        for j in 0..cols {
            out[j] += a[i * cols + j] * xi;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Symmetric part `(a + aᵀ) / 2` of a square matrix.
pub fn sym_part(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    out
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

/// Spectral norm of a square matrix by power iteration on `aᵀa`.
pub fn operator_norm(a: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / libm::sqrt(n as f64); n];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let av = mat_vec(a, n, n, &v);
        let atav = mat_t_vec(a, n, n, &av);
        let nrm = norm(&atav);
        if nrm == 0.0 {
            return 0.0;
        }
        v = scale(&atav, 1.0 / nrm);
        let next = libm::sqrt(nrm);
        if (next - sigma).abs() <= 1e-13 * next.max(1.0) {
            return next;
        }
        sigma = next;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2x2() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(mat_mul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_matvec() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // (2,3)
        assert_eq!(mat_vec(&a, 2, 3, &[1.0, 0.0, 1.0]), vec![4.0, 10.0]);
        assert_eq!(mat_t_vec(&a, 2, 3, &[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn operator_norm_diagonal() {
        let a = [3.0, 0.0, 0.0, -7.0];
        assert!((operator_norm(&a, 2) - 7.0).abs() < 1e-10);
    }

    #[test]
    fn operator_norm_rotation_is_one() {
        let c = libm::cos(0.7);
        let s = libm::sin(0.7);
        let a = [c, -s, s, c];
        assert!((operator_norm(&a, 2) - 1.0).abs() < 1e-10);
    }
}

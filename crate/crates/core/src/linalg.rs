//! Small dense symmetric-matrix helpers (Cholesky-based, for d ≲ 32).
//!
//! Everything works on row-major square matrices stored as flat slices.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::numeric(
                        "cholesky",
                        format!("matrix not positive definite (pivot {} at row {})", sum, i),
                    ));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// log det A from its Cholesky factor.
pub fn chol_logdet(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Solve A x = b given L with A = L·Lᵀ (forward then back substitution).
pub fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), n);
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// xᵀ A⁻¹ x via one forward substitution (x'ᵀx' with L x' = x).
pub fn chol_quadform(l: &[f64], n: usize, x: &[f64]) -> f64 {
    assert_eq!(x.len(), n);
    let mut y = x.to_vec();
    let mut q = 0.0;
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
        q += y[i] * y[i];
    }
    q
}

/// tr(A⁻¹) from the Cholesky factor of A.
pub fn chol_trace_inverse(l: &[f64], n: usize) -> f64 {
    let mut tr = 0.0;
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        tr += chol_solve(l, n, &e)[j];
    }
    tr
}

/// tr(A⁻¹ B) for symmetric B, from the Cholesky factor of A.
pub fn chol_trace_inverse_times(l: &[f64], n: usize, b: &[f64]) -> f64 {
    assert_eq!(b.len(), n * n);
    let mut tr = 0.0;
    let mut col = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            col[i] = b[i * n + j];
        }
        tr += chol_solve(l, n, &col)[j];
    }
    tr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors_a_known_matrix() {
        // A = [[4,2],[2,3]] → L = [[2,0],[1,√2]], det A = 8.
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-12);
        assert!((l[2] - 1.0).abs() < 1e-12);
        assert!((l[3] - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((chol_logdet(&l, 2) - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn solve_and_quadform_agree() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = [1.0, -2.0];
        let sol = chol_solve(&l, 2, &x);
        // Check A·sol = x.
        assert!((4.0 * sol[0] + 2.0 * sol[1] - 1.0).abs() < 1e-12);
        assert!((2.0 * sol[0] + 3.0 * sol[1] + 2.0).abs() < 1e-12);
        let q = chol_quadform(&l, 2, &x);
        let direct = x[0] * sol[0] + x[1] * sol[1];
        assert!((q - direct).abs() < 1e-12);
    }

    #[test]
    fn trace_of_inverse() {
        // A⁻¹ = 1/8 [[3,−2],[−2,4]] → trace 7/8.
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        assert!((chol_trace_inverse(&l, 2) - 0.875).abs() < 1e-12);
        // tr(A⁻¹·A) = n.
        assert!((chol_trace_inverse_times(&l, 2, &a) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, −1
        assert!(cholesky(&a, 2).is_err());
    }
}

//! Cyclic Jacobi eigensolver for dense symmetric matrices.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const MAX_SWEEPS: usize = 100;

/// Unsorted eigenpairs of a symmetric matrix plus the number of sweeps used.
#[derive(Debug, Clone)]
pub struct JacobiOutput<T> {
    pub eigenvalues: Vec<T>,
    /// Eigenvectors stored as columns.
    pub eigenvectors: Matrix<T>,
    pub sweeps: usize,
}

fn off_diagonal_norm<T: Scalar>(a: &Matrix<T>) -> T {
    let n = a.rows();
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Diagonalizes `a` by cyclic row-order Jacobi rotations.
///
/// Stops once the off-diagonal Frobenius norm drops below
/// `T::EIG_TOL * ‖a‖_F`; the caller is responsible for symmetry.
pub fn jacobi_eigen<T: Scalar>(a: &Matrix<T>) -> Result<JacobiOutput<T>> {
    if !a.is_square() {
        return Err(Error::Contract(format!("eigendecomposition of non-square {:?}", a.shape())));
    }
    let n = a.rows();
    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    let tol = T::lit(T::EIG_TOL) * a.frobenius();
    for sweep in 0..=MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            return Ok(JacobiOutput {
                eigenvalues: (0..n).map(|i| a[(i, i)]).collect(),
                eigenvectors: v,
                sweeps: sweep,
            });
        }
        if sweep == MAX_SWEEPS {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                let t = if theta >= T::zero() { T::one() } else { -T::one() } / (theta.abs() + theta.hypot(T::one()));
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi iteration did not converge within {MAX_SWEEPS} sweeps"
    )))
}

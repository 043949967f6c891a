//! Graph Fourier transform, its inverse, total variation and the DCT basis.

use crate::error::{shape_err, Result};
use crate::graph::{BasisScope, SpectralBasis};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Spectral coefficients `Uᵀ·x`, tagged with the basis that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTokens<T> {
    pub coefficients: Matrix<T>,
    pub scope: BasisScope,
}

fn check_rows<T: Scalar>(rows: usize, basis: &SpectralBasis<T>) -> Result<()> {
    if rows != basis.n() {
        return Err(shape_err(format!("{} rows", basis.n()), format!("{rows} rows")));
    }
    Ok(())
}

/// Forward transform, column by column: `Uᵀ·signal`.
pub fn gft<T: Scalar>(signal: &Matrix<T>, basis: &SpectralBasis<T>) -> Result<SpectralTokens<T>> {
    check_rows(signal.rows(), basis)?;
    Ok(SpectralTokens {
        coefficients: basis.eigenvectors.t_matmul(signal)?,
        scope: basis.scope,
    })
}

/// Inverse transform: `U·coefficients`.
pub fn igft<T: Scalar>(coeffs: &SpectralTokens<T>, basis: &SpectralBasis<T>) -> Result<Matrix<T>> {
    check_rows(coeffs.coefficients.rows(), basis)?;
    basis.eigenvectors.matmul(&coeffs.coefficients)
}

/// Both sides of the total-variation identity for a single-column signal:
/// `(xᵀ L x, Σ λ_i x̂_i²)`.
pub fn total_variation<T: Scalar>(signal: &[T], laplacian: &Matrix<T>, basis: &SpectralBasis<T>) -> Result<(T, T)> {
    let n = signal.len();
    check_rows(n, basis)?;
    if laplacian.shape() != (n, n) {
        return Err(shape_err(format!("{n}x{n} Laplacian"), format!("{:?}", laplacian.shape())));
    }
    let x = Matrix::from_vec(n, 1, signal.to_vec())?;
    let lx = laplacian.matmul(&x)?;
    let spatial = signal.iter().zip(lx.as_slice()).map(|(&a, &b)| a * b).sum();
    let coeffs = gft(&x, basis)?.coefficients;
    let spectral = coeffs
        .as_slice()
        .iter()
        .zip(&basis.eigenvalues)
        .map(|(&c, &lam)| lam * c * c)
        .sum();
    Ok((spatial, spectral))
}

/// Orthonormal DCT-II basis; column `k` is frequency `k`, whose index fills the eigenvalue slot.
pub fn dct_basis<T: Scalar>(n: usize) -> SpectralBasis<T> {
    let nf = T::from_usize_lossy(n.max(1));
    let pi = T::lit(std::f64::consts::PI);
    let two = T::lit(2.0);
    let eigenvectors = Matrix::from_fn(n, n, |j, k| {
        let alpha = if k == 0 { (T::one() / nf).sqrt() } else { (two / nf).sqrt() };
        let arg = pi * (two * T::from_usize_lossy(j) + T::one()) * T::from_usize_lossy(k) / (two * nf);
        alpha * arg.cos()
    });
    SpectralBasis {
        eigenvectors,
        eigenvalues: (0..n).map(T::from_usize_lossy).collect(),
        scope: BasisScope::Dct,
    }
}

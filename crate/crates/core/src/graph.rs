//! Key-point graphs with data-dependent distance scaling, their Laplacians
//! and the spectral bases shared by every adapter layer.

use std::cmp::Ordering;

use crate::eigen::jacobi_eigen;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ordering::OrderingResult;
use crate::pointcloud::Point3;
use crate::scalar::Scalar;

/// Stand-in for the minimum positive distance when every pair coincides.
pub const DEGENERATE_MIN_DISTANCE: f64 = 1e-9;
/// Coincident pairs are treated as this fraction of the minimum positive distance.
pub const COINCIDENT_FRACTION: f64 = 1e-6;
/// Relative residual bound `‖LU − UΛ‖_∞ / ‖L‖_∞` accepted from the eigensolver (f64).
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphScope {
    Global,
    Local(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisScope {
    Global,
    Local(usize),
    Dct,
}

impl From<GraphScope> for BasisScope {
    fn from(s: GraphScope) -> Self {
        match s {
            GraphScope::Global => BasisScope::Global,
            GraphScope::Local(i) => BasisScope::Local(i),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph<T> {
    pub adjacency: Matrix<T>,
    pub scope: GraphScope,
}

impl<T: Scalar> WeightedGraph<T> {
    pub fn n(&self) -> usize {
        self.adjacency.rows()
    }
}

/// Orthonormal eigenvectors (columns) with ascending eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis<T> {
    pub eigenvectors: Matrix<T>,
    pub eigenvalues: Vec<T>,
    pub scope: BasisScope,
}

impl<T: Scalar> SpectralBasis<T> {
    pub fn n(&self) -> usize {
        self.eigenvectors.rows()
    }

    /// `‖UᵀU − I‖_∞`
    pub fn orthonormality_error(&self) -> T {
        let utu = self
            .eigenvectors
            .t_matmul(&self.eigenvectors)
            .expect("square basis");
        utu.sub(&Matrix::identity(self.n())).expect("same shape").inf_norm()
    }

    /// `‖LU − UΛ‖_∞`
    pub fn residual(&self, laplacian: &Matrix<T>) -> Result<T> {
        let lu = laplacian.matmul(&self.eigenvectors)?;
        let mut ul = self.eigenvectors.clone();
        for i in 0..ul.rows() {
            for (v, &lam) in ul.row_mut(i).iter_mut().zip(&self.eigenvalues) {
                *v *= lam;
            }
        }
        Ok(lu.sub(&ul)?.inf_norm())
    }
}

/// Euclidean distance matrix Δ.
pub fn pairwise_distances<T: Scalar>(points: &[Point3<T>]) -> Matrix<T> {
    let n = points.len();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = crate::pointcloud::dist2(&points[i], &points[j]).sqrt();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Smallest strictly positive off-diagonal distance, if any.
pub fn min_positive_distance<T: Scalar>(distances: &Matrix<T>) -> Option<T> {
    let n = distances.rows();
    let mut best: Option<T> = None;
    for i in 0..n {
        for j in 0..n {
            let v = distances[(i, j)];
            if i != j && v > T::zero() && best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        }
    }
    best
}

/// `w_ij = 1 / (δ_ij / min(Δ) + I_ij)` with `min(Δ)` over positive off-diagonal distances.
///
/// Coincident distinct points are clamped to `COINCIDENT_FRACTION · min(Δ)`;
/// if no positive distance exists `min(Δ)` falls back to `DEGENERATE_MIN_DISTANCE`.
pub fn build_adjacency<T: Scalar>(distances: &Matrix<T>, scope: GraphScope) -> Result<WeightedGraph<T>> {
    let n = distances.rows();
    if !distances.is_square() {
        return Err(Error::Size(format!("distance matrix must be square, got {:?}", distances.shape())));
    }
    if n < 2 {
        return Err(Error::Size(format!("a graph needs at least 2 vertices, got {n}")));
    }
    let min_d = min_positive_distance(distances).unwrap_or_else(|| T::lit(DEGENERATE_MIN_DISTANCE));
    let floor = min_d * T::lit(COINCIDENT_FRACTION);
    let adjacency = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            T::one()
        } else {
            let d = distances[(i, j)].max(floor);
            T::one() / (d / min_d)
        }
    });
    Ok(WeightedGraph { adjacency, scope })
}

/// Vertex degrees `d_ii = Σ_l w_il`, self-weight included.
pub fn degrees<T: Scalar>(graph: &WeightedGraph<T>) -> Vec<T> {
    let w = &graph.adjacency;
    (0..w.rows()).map(|i| w.row(i).iter().copied().sum()).collect()
}

/// Unnormalized Laplacian `L = D − W`.
pub fn laplacian<T: Scalar>(graph: &WeightedGraph<T>) -> Matrix<T> {
    let d = degrees(graph);
    let mut l = graph.adjacency.scale(-T::one());
    for (i, di) in d.into_iter().enumerate() {
        l[(i, i)] += di;
    }
    l
}

/// Full symmetric eigendecomposition, eigenvalues ascending.
///
/// Each eigenvector is signed so that its largest-magnitude entry is
/// positive (first such entry on near ties).
pub fn eigendecompose<T: Scalar>(l: &Matrix<T>, scope: BasisScope) -> Result<SpectralBasis<T>> {
    if !l.is_square() {
        return Err(Error::Contract(format!("Laplacian must be square, got {:?}", l.shape())));
    }
    let sym_tol = T::lit(T::SYM_TOL) * T::one().max(l.max_abs());
    if !l.is_symmetric(sym_tol) {
        return Err(Error::Contract("Laplacian is not symmetric".into()));
    }
    let raw = jacobi_eigen(l)?;
    let n = l.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        raw.eigenvalues[a]
            .partial_cmp(&raw.eigenvalues[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut eigenvectors = Matrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    let tie = T::lit(1e-9);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(raw.eigenvalues[src]);
        let mut col = raw.eigenvectors.column(src);
        let peak = col.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if let Some(lead) = col.iter().position(|v| v.abs() >= peak * (T::one() - tie)) {
            if col[lead] < T::zero() {
                col.iter_mut().for_each(|v| *v = -*v);
            }
        }
        eigenvectors.set_column(dst, &col);
    }
    let basis = SpectralBasis {
        eigenvectors,
        eigenvalues,
        scope,
    };
    let bound = T::lit(RESIDUAL_TOL * T::EIG_TOL / 1e-12) * l.inf_norm();
    let res = basis.residual(l)?;
    if !(res <= bound) {
        return Err(Error::Numeric(format!("eigen residual {res} exceeds {bound}")));
    }
    Ok(basis)
}

/// Adjacency, Laplacian and basis for one vertex set.
#[derive(Debug, Clone)]
pub struct GraphSpectrum<T> {
    pub graph: WeightedGraph<T>,
    pub laplacian: Matrix<T>,
    pub basis: SpectralBasis<T>,
}

pub fn graph_spectrum<T: Scalar>(points: &[Point3<T>], scope: GraphScope) -> Result<GraphSpectrum<T>> {
    let graph = build_adjacency(&pairwise_distances(points), scope)?;
    let laplacian = laplacian(&graph);
    let basis = eigendecompose(&laplacian, scope.into())?;
    Ok(GraphSpectrum {
        graph,
        laplacian,
        basis,
    })
}

/// One global basis plus one basis per local group; computed once per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleBases<T> {
    pub global: SpectralBasis<T>,
    pub local: Vec<SpectralBasis<T>>,
}

pub fn build_multiscale_bases<T: Scalar>(keypoints: &[Point3<T>], ordering: &OrderingResult) -> Result<MultiScaleBases<T>> {
    if ordering.n() != keypoints.len() {
        return Err(Error::Size(format!(
            "ordering covers {} points, got {} key points",
            ordering.n(),
            keypoints.len()
        )));
    }
    let global = graph_spectrum(keypoints, GraphScope::Global)?.basis;
    let local = (0..ordering.k)
        .map(|i| {
            let pts: Vec<Point3<T>> = ordering.group(i).iter().map(|&j| keypoints[j]).collect();
            graph_spectrum(&pts, GraphScope::Local(i)).map(|s| s.basis)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiScaleBases { global, local })
}

use proptest::prelude::*;
use spectral_peft::graph::{graph_spectrum, pairwise_distances, build_adjacency, GraphScope};
use spectral_peft::linalg::Matrix;
use spectral_peft::spectral::{dct_basis, gft, igft, total_variation};

fn cloud(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec([-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0], n)
}

fn sized_cloud() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::sample::select(vec![2usize, 3, 8, 16, 32]).prop_flat_map(cloud)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn basis_is_orthonormal_with_ascending_spectrum(pts in sized_cloud()) {
        let s = graph_spectrum(&pts, GraphScope::Global).unwrap();
        let b = &s.basis;
        prop_assert!(b.orthonormality_error() < 1e-8);
        prop_assert!(b.residual(&s.laplacian).unwrap() <= 1e-8 * s.laplacian.inf_norm());
        prop_assert!(b.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(b.eigenvalues.iter().all(|&l| l >= -1e-10));
        prop_assert!(b.eigenvalues[0].abs() < 1e-8);
        // complete graph: only one vanishing eigenvalue
        prop_assert!(b.eigenvalues[1] > 1e-8);
        let c = 1.0 / (pts.len() as f64).sqrt();
        for i in 0..pts.len() {
            prop_assert!((b.eigenvectors[(i, 0)].abs() - c).abs() < 1e-8);
        }
        for i in 0..pts.len() {
            let row: f64 = s.laplacian.row(i).iter().sum();
            prop_assert!(row.abs() < 1e-12 * s.laplacian.inf_norm().max(1.0));
        }
    }

    #[test]
    fn adjacency_is_scale_free(pts in sized_cloud(), c in 0.01f64..100.0) {
        let scaled: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] * c, p[1] * c, p[2] * c]).collect();
        let a = build_adjacency(&pairwise_distances(&pts), GraphScope::Global).unwrap().adjacency;
        let b = build_adjacency(&pairwise_distances(&scaled), GraphScope::Global).unwrap().adjacency;
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!(a.as_slice().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn transform_round_trip_parseval_and_linearity(
        pts in cloud(16),
        x in prop::collection::vec(-3.0f64..3.0, 16 * 3),
        y in prop::collection::vec(-3.0f64..3.0, 16 * 3),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let b = graph_spectrum(&pts, GraphScope::Global).unwrap().basis;
        let x = Matrix::from_vec(16, 3, x).unwrap();
        let y = Matrix::from_vec(16, 3, y).unwrap();
        let fx = gft(&x, &b).unwrap();
        prop_assert!(igft(&fx, &b).unwrap().max_abs_diff(&x) < 1e-10);
        for j in 0..3 {
            let n0: f64 = x.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = fx.coefficients.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() < 1e-10);
        }
        let mix = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = gft(&mix, &b).unwrap().coefficients;
        let rhs = fx.coefficients.scale(alpha).add(&gft(&y, &b).unwrap().coefficients.scale(beta)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn total_variation_matches_spectral_form(pts in sized_cloud(), seed in any::<u32>()) {
        let s = graph_spectrum(&pts, GraphScope::Global).unwrap();
        let x: Vec<f64> = (0..pts.len()).map(|i| ((seed as usize + 7 * i) % 13) as f64 - 6.0).collect();
        let (spatial, spectral) = total_variation(&x, &s.laplacian, &s.basis).unwrap();
        prop_assert!(spatial >= -1e-10);
        prop_assert!((spatial - spectral).abs() <= 1e-8 * spatial.abs().max(1.0));
        // u_iᵀ L u_i = λ_i
        for i in 0..pts.len() {
            let (q, _) = total_variation(&s.basis.eigenvectors.column(i), &s.laplacian, &s.basis).unwrap();
            prop_assert!((q - s.basis.eigenvalues[i]).abs() <= 1e-8 * s.laplacian.inf_norm());
        }
    }
}

#[test]
fn dct_round_trip() {
    for n in [1usize, 2, 5, 16] {
        let b = dct_basis::<f64>(n);
        assert!(b.orthonormality_error() < 1e-12);
        let x = Matrix::from_fn(n, 2, |i, j| (i as f64).sin() + j as f64);
        assert!(igft(&gft(&x, &b).unwrap(), &b).unwrap().max_abs_diff(&x) < 1e-12);
    }
}

#[test]
fn f32_basis_is_orthonormal_to_single_precision() {
    let pts: Vec<[f32; 3]> = (0..12).map(|i| [(i as f32 * 0.7).sin(), (i as f32 * 1.3).cos(), i as f32 * 0.1]).collect();
    let b = graph_spectrum(&pts, GraphScope::Global).unwrap().basis;
    assert!(b.orthonormality_error() < 1e-4);
}

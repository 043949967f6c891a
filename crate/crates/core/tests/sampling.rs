use proptest::prelude::*;
use spectral_peft::linalg::Matrix;
use spectral_peft::ordering::{sort_keypoints, OrderingMethod};
use spectral_peft::pointcloud::{
    dist2, embed_patches, farthest_point_sampling, group_patches, EmbedParams, PatchSet, PointCloud,
};

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

fn min_pairwise(points: &[[f64; 3]], idx: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            best = best.min(dist2(&points[i], &points[j]).sqrt());
        }
    }
    best
}

fn best_subset(points: &[[f64; 3]], n: usize) -> f64 {
    fn rec(points: &[[f64; 3]], n: usize, start: usize, cur: &mut Vec<usize>, best: &mut f64) {
        if cur.len() == n {
            *best = best.max(min_pairwise(points, cur));
            return;
        }
        for i in start..points.len() {
            cur.push(i);
            rec(points, n, i + 1, cur, best);
            cur.pop();
        }
    }
    let mut best = 0.0;
    rec(points, n, 0, &mut Vec::new(), &mut best);
    best
}

fn embed_params(hidden: usize, d: usize, seed: u64) -> EmbedParams<f64> {
    let mut s = seed;
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    EmbedParams {
        w1: Matrix::from_fn(hidden, 3, |_, _| next()),
        b1: Matrix::from_fn(1, hidden, |_, _| next()),
        w2: Matrix::from_fn(d, hidden, |_, _| next()),
        b2: Matrix::from_fn(1, d, |_, _| next()),
    }
}

#[test]
fn unit_cube_corners_against_brute_force() {
    let mut pts = Vec::new();
    for x in 0..2 {
        for y in 0..2 {
            for z in 0..2 {
                pts.push([x as f64, y as f64, z as f64]);
            }
        }
    }
    let cloud = PointCloud::new(pts.clone(), None, "cube").unwrap();
    let idx = farthest_point_sampling(&cloud, 4, 0).unwrap();
    // after 0 and 7 every other corner sits at distance 1 from one of them,
    // so the greedy set cannot reach the tetrahedron found by brute force
    assert_eq!(idx, vec![0, 7, 1, 2]);
    let best = best_subset(&pts, 4);
    assert!((best - 2f64.sqrt()).abs() < 1e-12);
    assert!((min_pairwise(&pts, &idx) - 1.0).abs() < 1e-12);
    assert!(min_pairwise(&pts, &idx) >= 0.5 * best);
}

proptest! {
    #[test]
    fn fps_is_deterministic(pts in prop::collection::vec(point(), 4..40), n in 1usize..4, start in 0usize..4) {
        let cloud = PointCloud::new(pts, None, "p").unwrap();
        let a = farthest_point_sampling(&cloud, n, start).unwrap();
        let b = farthest_point_sampling(&cloud, n, start).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fps_is_within_half_of_optimal(pts in prop::collection::vec(point(), 3..=10), n in 2usize..=4) {
        prop_assume!(n <= pts.len());
        let cloud = PointCloud::new(pts.clone(), None, "p").unwrap();
        let idx = farthest_point_sampling(&cloud, n, 0).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
        prop_assert!(min_pairwise(&pts, &idx) >= 0.5 * best_subset(&pts, n) - 1e-12);
    }

    #[test]
    fn embedding_ignores_point_order_within_a_patch(
        pts in prop::collection::vec(point(), 16..32),
        seed in any::<u64>(),
        rot in 1usize..8,
    ) {
        let cloud = PointCloud::new(pts, None, "p").unwrap();
        let kp = farthest_point_sampling(&cloud, 4, 0).unwrap();
        let ps = group_patches(&cloud, &kp, 8).unwrap();
        let mut shuffled = ps.clone();
        for i in 0..ps.n() {
            let mut patch = ps.patch(i).to_vec();
            patch.rotate_left(rot);
            shuffled.patches[i * 8..(i + 1) * 8].copy_from_slice(&patch);
        }
        let p = embed_params(6, 5, seed);
        prop_assert_eq!(embed_patches(&ps, &p).unwrap().values, embed_patches(&shuffled, &p).unwrap().values);
    }

    #[test]
    fn token_rows_follow_key_points(pts in prop::collection::vec(point(), 16..32), seed in any::<u64>()) {
        let cloud = PointCloud::new(pts, None, "p").unwrap();
        let kp = farthest_point_sampling(&cloud, 8, 0).unwrap();
        let ps: PatchSet<f64> = group_patches(&cloud, &kp, 4).unwrap();
        let perm = sort_keypoints(&ps.keypoints, OrderingMethod::Random, 1, seed).unwrap().permutation;
        let p = embed_params(4, 3, seed ^ 1);
        let base = embed_patches(&ps, &p).unwrap().values;
        let moved = embed_patches(&ps.permuted(&perm), &p).unwrap().values;
        prop_assert_eq!(moved, base.select_rows(&perm));
    }
}

//! Point clouds, farthest point sampling, kNN patch grouping and the
//! PointNet-style patch embedder that turns patches into tokens.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ordering::OrderTag;
use crate::scalar::Scalar;

pub type Point3<T> = [T; 3];

#[inline]
pub fn dist2<T: Scalar>(a: &Point3<T>, b: &Point3<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Raw 3D points plus sample metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Point3<T>>,
    pub label: Option<usize>,
    pub id: String,
}

impl<T: Scalar> PointCloud<T> {
    /// Fails if any coordinate is NaN or infinite.
    pub fn new(points: Vec<Point3<T>>, label: Option<usize>, id: impl Into<String>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Numeric(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            label,
            id: id.into(),
        })
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parses the `x y z` text format with an optional leading `# label <int>` line.
    ///
    /// Blank lines are skipped. Anything else that is not three decimals is
    /// rejected with its 1-based line number.
    pub fn parse(text: &str, id: impl Into<String>) -> Result<Self> {
        let mut label = None;
        let mut points = Vec::new();
        let mut seen_content = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                match (parts.next(), parts.next(), parts.next()) {
                    (Some("label"), Some(v), None) if !seen_content => {
                        let v = v.parse::<usize>().map_err(|e| Error::Parse {
                            line: line_no,
                            msg: format!("bad label {v:?}: {e}"),
                        })?;
                        label = Some(v);
                        seen_content = true;
                        continue;
                    }
                    _ => {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("unexpected header {line:?}"),
                        })
                    }
                }
            }
            seen_content = true;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 3 coordinates, found {}", fields.len()),
                });
            }
            let mut p = [T::zero(); 3];
            for (slot, f) in p.iter_mut().zip(&fields) {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("not a decimal: {f:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("non-finite coordinate {f:?}"),
                    });
                }
                *slot = T::lit(v);
            }
            points.push(p);
        }
        Self::new(points, label, id)
    }

    /// Inverse of [`PointCloud::parse`]; coordinates use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(l) = self.label {
            let _ = writeln!(out, "# label {l}");
        }
        for p in &self.points {
            let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
        }
        out
    }
}

/// Greedy farthest point sampling starting at `start`.
///
/// Each step picks the unselected point with the largest distance to the
/// selected set; ties go to the lowest index.
pub fn farthest_point_sampling<T: Scalar>(cloud: &PointCloud<T>, n: usize, start: usize) -> Result<Vec<usize>> {
    farthest_point_sampling_points(cloud.points(), n, start)
}

pub fn farthest_point_sampling_points<T: Scalar>(points: &[Point3<T>], n: usize, start: usize) -> Result<Vec<usize>> {
    let size = points.len();
    if n > size {
        return Err(Error::Size(format!("cannot sample {n} key points from {size} points")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if start >= size {
        return Err(Error::Size(format!("start index {start} outside cloud of {size}")));
    }
    let mut selected = vec![false; size];
    let mut min_d2 = vec![T::infinity(); size];
    let mut order = Vec::with_capacity(n);
    let mut current = start;
    loop {
        selected[current] = true;
        order.push(current);
        if order.len() == n {
            break;
        }
        let anchor = points[current];
        let mut best: Option<(usize, T)> = None;
        for (i, p) in points.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = dist2(p, &anchor);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            match best {
                Some((_, bd)) if min_d2[i] <= bd => {}
                _ => best = Some((i, min_d2[i])),
            }
        }
        current = best.expect("unselected point remains").0;
    }
    Ok(order)
}

/// Key points with their kNN patches, coordinates centered on the key point.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T> {
    pub keypoint_indices: Vec<usize>,
    pub keypoints: Vec<Point3<T>>,
    /// `n * g` source indices, patch-major.
    pub members: Vec<usize>,
    /// `n * g` centered coordinates, patch-major.
    pub patches: Vec<Point3<T>>,
    pub g: usize,
}

impl<T: Scalar> PatchSet<T> {
    pub fn n(&self) -> usize {
        self.keypoints.len()
    }

    pub fn patch(&self, i: usize) -> &[Point3<T>] {
        &self.patches[i * self.g..(i + 1) * self.g]
    }

    pub fn patch_members(&self, i: usize) -> &[usize] {
        &self.members[i * self.g..(i + 1) * self.g]
    }

    /// Same patches with key points reordered so that new patch `j` is old patch `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n());
        let mut out = Self {
            keypoint_indices: Vec::with_capacity(perm.len()),
            keypoints: Vec::with_capacity(perm.len()),
            members: Vec::with_capacity(self.members.len()),
            patches: Vec::with_capacity(self.patches.len()),
            g: self.g,
        };
        for &p in perm {
            out.keypoint_indices.push(self.keypoint_indices[p]);
            out.keypoints.push(self.keypoints[p]);
            out.members.extend_from_slice(self.patch_members(p));
            out.patches.extend_from_slice(self.patch(p));
        }
        out
    }
}

/// Groups the `g` nearest neighbours of each key point into a centered patch.
///
/// The key point itself always occupies slot 0; remaining slots are ordered
/// by (distance, index).
pub fn group_patches<T: Scalar>(cloud: &PointCloud<T>, keypoints: &[usize], g: usize) -> Result<PatchSet<T>> {
    let pts = cloud.points();
    if g > pts.len() {
        return Err(Error::Size(format!("group size {g} exceeds cloud size {}", pts.len())));
    }
    if g == 0 {
        return Err(Error::Size("group size must be positive".into()));
    }
    if let Some(&bad) = keypoints.iter().find(|&&k| k >= pts.len()) {
        return Err(Error::Size(format!("key point index {bad} outside cloud of {}", pts.len())));
    }
    let mut members = Vec::with_capacity(keypoints.len() * g);
    let mut patches = Vec::with_capacity(keypoints.len() * g);
    let mut scratch: Vec<(T, usize)> = Vec::with_capacity(pts.len());
    for &kp in keypoints {
        let center = pts[kp];
        scratch.clear();
        scratch.extend(
            pts.iter()
                .enumerate()
                .filter(|&(i, _)| i != kp)
                .map(|(i, p)| (dist2(p, &center), i)),
        );
        let take = g - 1;
        if take > 0 && take < scratch.len() {
            scratch.select_nth_unstable_by(take - 1, cmp_dist_index);
            scratch.truncate(take);
        }
        scratch.sort_unstable_by(cmp_dist_index);
        scratch.truncate(take);
        members.push(kp);
        patches.push([T::zero(); 3]);
        for &(_, i) in &scratch {
            members.push(i);
            let p = pts[i];
            patches.push([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        }
    }
    Ok(PatchSet {
        keypoint_indices: keypoints.to_vec(),
        keypoints: keypoints.iter().map(|&k| pts[k]).collect(),
        members,
        patches,
        g,
    })
}

fn cmp_dist_index<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> std::cmp::Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Token rows with a tag naming the key-point order they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<T> {
    pub values: Matrix<T>,
    pub order_tag: OrderTag,
}

/// Weights of the two-layer patch embedder: `w2 · maxpool(relu(w1 · p + b1)) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams<T> {
    /// hidden × 3
    pub w1: Matrix<T>,
    /// 1 × hidden
    pub b1: Matrix<T>,
    /// d × hidden
    pub w2: Matrix<T>,
    /// 1 × d
    pub b2: Matrix<T>,
}

impl<T: Scalar> EmbedParams<T> {
    pub fn zeros(hidden: usize, d: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, 3),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(d, hidden),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.w1.cols() != 3 || self.b1.shape() != (1, h) || self.w2.cols() != h || self.b2.shape() != (1, self.dim()) {
            return Err(Error::Shape {
                expected: format!("w1 {h}x3, b1 1x{h}, w2 dx{h}, b2 1xd"),
                got: format!(
                    "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    self.w1.shape(),
                    self.b1.shape(),
                    self.w2.shape(),
                    self.b2.shape()
                ),
            });
        }
        if !(self.w1.all_finite() && self.b1.all_finite() && self.w2.all_finite() && self.b2.all_finite()) {
            return Err(Error::Numeric("embedding weights contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Winning point per (patch, hidden channel) from the max-pool; `None` when
/// every activation in that channel was clipped to zero.
#[derive(Debug, Clone)]
pub struct EmbedTrace<T> {
    pub pooled: Matrix<T>,
    pub winners: Vec<Option<usize>>,
}

pub fn embed_patches<T: Scalar>(patchset: &PatchSet<T>, params: &EmbedParams<T>) -> Result<TokenMatrix<T>> {
    embed_patches_traced(patchset, params).map(|(t, _)| t)
}

pub fn embed_patches_traced<T: Scalar>(
    patchset: &PatchSet<T>,
    params: &EmbedParams<T>,
) -> Result<(TokenMatrix<T>, EmbedTrace<T>)> {
    params.validate()?;
    let (n, h) = (patchset.n(), params.hidden());
    let mut pooled = Matrix::zeros(n, h);
    let mut winners = vec![None; n * h];
    for i in 0..n {
        let patch = patchset.patch(i);
        for c in 0..h {
            let w = params.w1.row(c);
            let b = params.b1[(0, c)];
            let mut best = T::zero();
            let mut arg = None;
            for (j, p) in patch.iter().enumerate() {
                let a = w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + b;
                if a > best {
                    best = a;
                    arg = Some(j);
                }
            }
            pooled[(i, c)] = best;
            winners[i * h + c] = arg;
        }
    }
    let mut values = pooled.matmul_t(&params.w2)?;
    values.add_row_broadcast(params.b2.as_slice());
    Ok((
        TokenMatrix {
            values,
            order_tag: OrderTag::Original,
        },
        EmbedTrace { pooled, winners },
    ))
}

/// Parameter gradients of the embedder given the gradient of its output tokens.
pub fn embed_backward<T: Scalar>(
    patchset: &PatchSet<T>,
    params: &EmbedParams<T>,
    trace: &EmbedTrace<T>,
    d_tokens: &Matrix<T>,
) -> Result<EmbedParams<T>> {
    let (n, h) = (patchset.n(), params.hidden());
    if d_tokens.shape() != (n, params.dim()) {
        return Err(Error::Shape {
            expected: format!("{}x{}", n, params.dim()),
            got: format!("{:?}", d_tokens.shape()),
        });
    }
    let mut grads = EmbedParams::zeros(h, params.dim());
    grads.w2 = d_tokens.t_matmul(&trace.pooled)?;
    grads.b2 = Matrix::row_vector(&d_tokens.column_sums());
    let d_pooled = d_tokens.matmul(&params.w2)?;
    for i in 0..n {
        let patch = patchset.patch(i);
        for c in 0..h {
            if let Some(j) = trace.winners[i * h + c] {
                let g = d_pooled[(i, c)];
                let p = patch[j];
                grads.w1[(c, 0)] += g * p[0];
                grads.w1[(c, 1)] += g * p[1];
                grads.w1[(c, 2)] += g * p[2];
                grads.b1[(0, c)] += g;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud<f64> {
        PointCloud::new(points, None, "t").unwrap()
    }

    #[test]
    fn fps_picks_endpoint_on_a_line() {
        let c = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sampling(&c, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_exhaustive_returns_every_index_from_start() {
        let c = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let idx = farthest_point_sampling(&c, 4, 2).unwrap();
        assert_eq!(idx[0], 2);
        let mut s = idx.clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3]);
        // from x=2: x=0 is farthest, then x=1 and x=3 tie at distance 1 and the lower index wins
        assert_eq!(idx, vec![2, 0, 1, 3]);
    }

    #[test]
    fn fps_rejects_oversized_requests() {
        let c = cloud(vec![[0.0; 3]; 3]);
        assert!(matches!(farthest_point_sampling(&c, 4, 0), Err(Error::Size(_))));
        assert!(matches!(farthest_point_sampling(&c, 2, 3), Err(Error::Size(_))));
    }

    #[test]
    fn fps_with_duplicates_still_returns_distinct_indices() {
        let c = cloud(vec![[0.0; 3]; 5]);
        let idx = farthest_point_sampling(&c, 5, 0).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn group_size_one_gives_centered_keypoints() {
        let c = cloud(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [0.0, 0.0, 1.0]]);
        let ps = group_patches(&c, &[2, 0], 1).unwrap();
        assert_eq!(ps.patches, vec![[0.0; 3], [0.0; 3]]);
        assert_eq!(ps.members, vec![2, 0]);
    }

    #[test]
    fn grid_center_patch_holds_axis_neighbours() {
        let mut pts = Vec::new();
        for y in -1..=1 {
            for x in -1..=1 {
                pts.push([x as f64, y as f64, 0.0]);
            }
        }
        let c = cloud(pts);
        let ps = group_patches(&c, &[4], 5).unwrap();
        let mut got: Vec<[i64; 3]> = ps.patch(0).iter().map(|p| p.map(|v| v as i64)).collect();
        got.sort();
        let mut want = vec![[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]];
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn duplicate_points_group_deterministically() {
        let c = cloud(vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]]);
        let a = group_patches(&c, &[3], 3).unwrap();
        let b = group_patches(&c, &[3], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.members, vec![3, 0, 1]);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let text = "# label 4\n0.5 -1 2e-3\n\n1 2 3\n";
        let c = PointCloud::<f64>::parse(text, "x").unwrap();
        assert_eq!(c.label, Some(4));
        assert_eq!(c.points(), &[[0.5, -1.0, 0.002], [1.0, 2.0, 3.0]]);
        let again = PointCloud::<f64>::parse(&c.to_text(), "x").unwrap();
        assert_eq!(again, c);

        let err = PointCloud::<f64>::parse("1 2 3\n1 2\n", "x").unwrap_err();
        assert_eq!(err, Error::Parse { line: 2, msg: "expected 3 coordinates, found 2".into() });
        let err = PointCloud::<f64>::parse("1 2 3\n# label 2\n", "x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = PointCloud::<f64>::parse("1 nan 3\n", "x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = PointCloud::<f64>::parse("1 x 3\n", "x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn non_finite_points_are_rejected() {
        assert!(PointCloud::new(vec![[0.0, f64::INFINITY, 0.0]], None, "bad").is_err());
    }

    #[test]
    fn zero_patch_with_zero_bias_embeds_to_zero() {
        let c = cloud(vec![[0.0; 3]; 4]);
        let ps = group_patches(&c, &[0, 1], 2).unwrap();
        let mut p = EmbedParams::zeros(3, 2);
        p.w1 = Matrix::from_fn(3, 3, |i, j| (i as f64) - (j as f64));
        p.w2 = Matrix::from_fn(2, 3, |i, j| 1.0 + (i * j) as f64);
        let t = embed_patches(&ps, &p).unwrap();
        assert_eq!(t.values, Matrix::zeros(2, 2));
    }

    #[test]
    fn hand_sized_embedding() {
        // one patch of two centered points, hidden = d = 2
        let ps = PatchSet {
            keypoint_indices: vec![0],
            keypoints: vec![[0.0; 3]],
            members: vec![0, 1],
            patches: vec![[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]],
            g: 2,
        };
        let p: EmbedParams<f64> = EmbedParams {
            w1: Matrix::from_rows(&[[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]]),
            b1: Matrix::row_vector(&[0.5, -0.25]),
            w2: Matrix::from_rows(&[[2.0, -1.0], [0.5, 3.0]]),
            b2: Matrix::row_vector(&[0.1, -0.2]),
        };
        // channel 0: point0 -> 0.5, point1 -> 1 + 1 + 0.5 = 2.5  => 2.5
        // channel 1: point0 -> -0.25, point1 -> -2.25        => relu 0
        // token = [2*2.5 - 0 + 0.1, 0.5*2.5 + 0 - 0.2] = [5.1, 1.05]
        let t = embed_patches(&ps, &p).unwrap();
        assert!((t.values[(0, 0)] - 5.1).abs() < 1e-15);
        assert!((t.values[(0, 1)] - 1.05).abs() < 1e-15);
    }

    #[test]
    fn non_finite_embedding_weights_error() {
        let ps = PatchSet {
            keypoint_indices: vec![0],
            keypoints: vec![[0.0; 3]],
            members: vec![0],
            patches: vec![[0.0; 3]],
            g: 1,
        };
        let mut p = EmbedParams::<f64>::zeros(2, 2);
        p.w2[(1, 1)] = f64::NAN;
        assert!(matches!(embed_patches(&ps, &p), Err(Error::Numeric(_))));
    }
}

//! Key-point serialization along space-filling curves and the `k`-group
//! partition used to build local sub-graphs.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pointcloud::{dist2, Point3, TokenMatrix};
use crate::scalar::Scalar;

pub const DEFAULT_BITS: u32 = 10;
pub const MAX_BITS: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OrderingMethod {
    Random,
    Knn,
    ZOrder,
    TransZOrder,
    Hilbert,
}

impl OrderingMethod {
    pub const ALL: [OrderingMethod; 5] = [
        OrderingMethod::Random,
        OrderingMethod::Knn,
        OrderingMethod::ZOrder,
        OrderingMethod::TransZOrder,
        OrderingMethod::Hilbert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderingMethod::Random => "random",
            OrderingMethod::Knn => "knn",
            OrderingMethod::ZOrder => "z_order",
            OrderingMethod::TransZOrder => "trans_z_order",
            OrderingMethod::Hilbert => "hilbert",
        }
    }
}

impl fmt::Display for OrderingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OrderingMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ordering method {s:?}")))
    }
}

/// Which key-point order the rows of a token matrix follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderTag {
    Original,
    Sorted(OrderingMethod),
}

/// Axis-aligned box used for quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds<T> {
    pub min: Point3<T>,
    pub max: Point3<T>,
}

impl<T: Scalar> Bounds<T> {
    pub fn unit() -> Self {
        Self {
            min: [T::zero(); 3],
            max: [T::one(); 3],
        }
    }

    /// Tight box around `points`. Panics on an empty slice.
    pub fn tight(points: &[Point3<T>]) -> Self {
        assert!(!points.is_empty(), "bounds of an empty point set");
        let mut b = Self {
            min: points[0],
            max: points[0],
        };
        for p in &points[1..] {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        b
    }

    /// Per-axis cell index in `[0, 2^bits)`.
    pub fn quantize(&self, point: &Point3<T>, bits: u32) -> Result<[u32; 3]> {
        check_bits(bits)?;
        let levels = 1u32 << bits;
        let mut q = [0u32; 3];
        for a in 0..3 {
            let (lo, hi, v) = (self.min[a], self.max[a], point[a]);
            if !(v >= lo && v <= hi) {
                return Err(Error::Range(format!("coordinate {v} on axis {a} outside [{lo}, {hi}]")));
            }
            let extent = hi - lo;
            if extent > T::zero() {
                let cell = ((v - lo) / extent * T::from_usize_lossy(levels as usize)).floor();
                q[a] = cell.to_u32().unwrap_or(0).min(levels - 1);
            }
        }
        Ok(q)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Range(format!("bits must be in 1..={MAX_BITS}, got {bits}")));
    }
    Ok(())
}

/// Interleaves the cells of `axes` (in that order) from the most significant bit down.
fn interleave(q: [u32; 3], axes: [usize; 3], bits: u32) -> u64 {
    let mut code = 0u64;
    for b in (0..bits).rev() {
        for &a in &axes {
            code = (code << 1) | u64::from((q[a] >> b) & 1);
        }
    }
    code
}

/// Morton code with axis priority (x, y, z).
pub fn z_order_key<T: Scalar>(point: &Point3<T>, bounds: &Bounds<T>, bits: u32) -> Result<u64> {
    Ok(interleave(bounds.quantize(point, bits)?, [0, 1, 2], bits))
}

/// Morton code with the interleave order reversed to (z, y, x).
pub fn trans_z_order_key<T: Scalar>(point: &Point3<T>, bounds: &Bounds<T>, bits: u32) -> Result<u64> {
    Ok(interleave(bounds.quantize(point, bits)?, [2, 1, 0], bits))
}

/// 3D Hilbert index (Skilling's transpose construction).
pub fn hilbert_key<T: Scalar>(point: &Point3<T>, bounds: &Bounds<T>, bits: u32) -> Result<u64> {
    let q = bounds.quantize(point, bits)?;
    Ok(hilbert_index(q, bits))
}

fn hilbert_index(mut x: [u32; 3], bits: u32) -> u64 {
    let n = x.len();
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..n {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..n {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    q = m;
    while q > 1 {
        if x[n - 1] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in x.iter_mut() {
        *v ^= t;
    }
    interleave(x, [0, 1, 2], bits)
}

/// A key-point permutation split into `k` equal groups.
///
/// `permutation[j]` is the original index of the point at sorted position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingResult {
    pub permutation: Vec<usize>,
    pub inverse: Vec<usize>,
    pub method: OrderingMethod,
    pub k: usize,
    pub m: usize,
}

impl OrderingResult {
    /// Builds the result from a permutation, validating bijectivity and divisibility.
    pub fn from_permutation(permutation: Vec<usize>, method: OrderingMethod, k: usize) -> Result<Self> {
        let n = permutation.len();
        check_groups(n, k)?;
        let mut inverse = vec![usize::MAX; n];
        for (j, &p) in permutation.iter().enumerate() {
            if p >= n || inverse[p] != usize::MAX {
                return Err(Error::Contract(format!("not a permutation of 0..{n}")));
            }
            inverse[p] = j;
        }
        Ok(Self {
            permutation,
            inverse,
            method,
            k,
            m: n / k,
        })
    }

    pub fn n(&self) -> usize {
        self.permutation.len()
    }

    /// Original indices of the points in group `i`, in sorted order.
    pub fn group(&self, i: usize) -> &[usize] {
        &self.permutation[i * self.m..(i + 1) * self.m]
    }

    pub fn tag(&self) -> OrderTag {
        OrderTag::Sorted(self.method)
    }

    /// Rows of `original` arranged in sorted order.
    pub fn sort_rows<T: Scalar>(&self, original: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_rows(original.rows())?;
        Ok(original.select_rows(&self.permutation))
    }

    /// Rows of a sorted-order matrix moved back to original order.
    pub fn unsort_rows<T: Scalar>(&self, sorted: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_rows(sorted.rows())?;
        Ok(sorted.select_rows(&self.inverse))
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.n() {
            return Err(Error::Size(format!("matrix has {rows} rows, ordering covers {}", self.n())));
        }
        Ok(())
    }
}

fn check_groups(n: usize, k: usize) -> Result<()> {
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!("group count k={k} must divide n={n}")));
    }
    Ok(())
}

pub fn sort_keypoints<T: Scalar>(
    keypoints: &[Point3<T>],
    method: OrderingMethod,
    k: usize,
    seed: u64,
) -> Result<OrderingResult> {
    sort_keypoints_with_bits(keypoints, method, k, seed, DEFAULT_BITS)
}

/// Sorts key points by the method's key (ties by original index) and splits into `k` groups.
pub fn sort_keypoints_with_bits<T: Scalar>(
    keypoints: &[Point3<T>],
    method: OrderingMethod,
    k: usize,
    seed: u64,
    bits: u32,
) -> Result<OrderingResult> {
    let n = keypoints.len();
    check_groups(n, k)?;
    check_bits(bits)?;
    let perm = match method {
        OrderingMethod::Random => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            perm
        }
        OrderingMethod::Knn => nearest_neighbour_chain(keypoints),
        OrderingMethod::ZOrder | OrderingMethod::TransZOrder | OrderingMethod::Hilbert => {
            let bounds = Bounds::tight(keypoints);
            let key = match method {
                OrderingMethod::ZOrder => z_order_key::<T>,
                OrderingMethod::TransZOrder => trans_z_order_key::<T>,
                _ => hilbert_key::<T>,
            };
            let mut keyed = keypoints
                .iter()
                .enumerate()
                .map(|(i, p)| key(p, &bounds, bits).map(|c| (c, i)))
                .collect::<Result<Vec<_>>>()?;
            keyed.sort_unstable();
            keyed.into_iter().map(|(_, i)| i).collect()
        }
    };
    OrderingResult::from_permutation(perm, method, k)
}

/// Greedy chain: start at point 0, always step to the nearest unvisited point.
fn nearest_neighbour_chain<T: Scalar>(points: &[Point3<T>]) -> Vec<usize> {
    let n = points.len();
    let mut visited = vec![false; n];
    let mut chain = Vec::with_capacity(n);
    if n == 0 {
        return chain;
    }
    let mut cur = 0;
    loop {
        visited[cur] = true;
        chain.push(cur);
        if chain.len() == n {
            break;
        }
        let mut best: Option<(usize, T)> = None;
        for (i, p) in points.iter().enumerate() {
            if visited[i] {
                continue;
            }
            let d = dist2(p, &points[cur]);
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((i, d)),
            }
        }
        cur = best.expect("unvisited point remains").0;
    }
    chain
}

/// Moves sorted-order token rows back to the original key-point order.
pub fn reorder_tokens<T: Scalar>(tokens: &TokenMatrix<T>, ordering: &OrderingResult) -> Result<TokenMatrix<T>> {
    Ok(TokenMatrix {
        values: ordering.unsort_rows(&tokens.values)?,
        order_tag: OrderTag::Original,
    })
}

/// Arranges original-order token rows in sorted order.
pub fn sort_tokens<T: Scalar>(tokens: &TokenMatrix<T>, ordering: &OrderingResult) -> Result<TokenMatrix<T>> {
    Ok(TokenMatrix {
        values: ordering.sort_rows(&tokens.values)?,
        order_tag: ordering.tag(),
    })
}

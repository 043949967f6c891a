//! The point-cloud spectral adapter: a low-rank bottleneck whose tokens are
//! tuned in the global and local graph Fourier domains.
//!
//! ```text
//! T_s   = T_in · W_dᵀ
//! G     = U_G (F_G + swish(F_G W_lᵀ + b)),          F_G = U_Gᵀ T_s
//! L     = reorder(concat_i U_i (F_i + swish(F_i W_lᵀ + b))), F_i = U_iᵀ sort(T_s)_i
//! T_out = s · (swish(T_s) + G + L) · W_uᵀ
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{build_multiscale_bases, MultiScaleBases, SpectralBasis};
use crate::linalg::Matrix;
use crate::ordering::{sort_keypoints, OrderingMethod, OrderingResult};
use crate::pointcloud::Point3;
use crate::scalar::{swish, swish_grad, Scalar};
use crate::spectral::dct_basis;

/// Trainable adapter weights for one transformer layer. `scale` is a fixed hyper-parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    /// r × C
    pub w_down: Matrix<T>,
    /// r × r, shared by the global and every local branch
    pub lin_w: Matrix<T>,
    /// 1 × r
    pub lin_b: Matrix<T>,
    /// C × r
    pub w_up: Matrix<T>,
    pub scale: T,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn zeros(r: usize, c: usize, scale: T) -> Self {
        Self {
            w_down: Matrix::zeros(r, c),
            lin_w: Matrix::zeros(r, r),
            lin_b: Matrix::zeros(1, r),
            w_up: Matrix::zeros(c, r),
            scale,
        }
    }

    /// Fresh adapter: `W_d ~ U(−1/√C, 1/√C)`, everything else zero.
    pub fn init<R: Rng + ?Sized>(r: usize, c: usize, scale: T, rng: &mut R) -> Result<Self> {
        if r >= c {
            return Err(Error::Config(format!("adapter rank r={r} must be below channel count C={c}")));
        }
        let bound = 1.0 / (c as f64).sqrt();
        let mut p = Self::zeros(r, c, scale);
        for v in p.w_down.as_mut_slice() {
            *v = T::lit(rng.random_range(-bound..=bound));
        }
        Ok(p)
    }

    pub fn rank(&self) -> usize {
        self.w_down.rows()
    }

    pub fn channels(&self) -> usize {
        self.w_down.cols()
    }

    /// Trainable scalars: `2rC + r² + r`.
    pub fn count(&self) -> usize {
        adapter_param_count(self.rank(), self.channels())
    }

    fn validate(&self) -> Result<()> {
        let (r, c) = (self.rank(), self.channels());
        if self.lin_w.shape() != (r, r) || self.lin_b.shape() != (1, r) || self.w_up.shape() != (c, r) {
            return Err(shape_err(
                format!("lin_w {r}x{r}, lin_b 1x{r}, w_up {c}x{r}"),
                format!(
                    "lin_w {:?}, lin_b {:?}, w_up {:?}",
                    self.lin_w.shape(),
                    self.lin_b.shape(),
                    self.w_up.shape()
                ),
            ));
        }
        Ok(())
    }
}

pub fn adapter_param_count(r: usize, c: usize) -> usize {
    2 * r * c + r * r + r
}

/// Trainable scalars across `layers` adapters plus a head.
pub fn count_trainable(r: usize, c: usize, layers: usize, head: usize) -> usize {
    layers * adapter_param_count(r, c) + head
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Gft,
    Dct,
}

impl BasisKind {
    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Gft => "gft",
            BasisKind::Dct => "dct",
        }
    }
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gft" => Ok(BasisKind::Gft),
            "dct" => Ok(BasisKind::Dct),
            _ => Err(Error::Config(format!("unknown basis {s:?}"))),
        }
    }
}

/// Per-sample spectral bases and key-point ordering, shared by every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterContext<T> {
    pub global: SpectralBasis<T>,
    pub local: Vec<SpectralBasis<T>>,
    pub ordering: OrderingResult,
}

impl<T: Scalar> AdapterContext<T> {
    pub fn new(bases: MultiScaleBases<T>, ordering: OrderingResult) -> Result<Self> {
        let n = ordering.n();
        if bases.global.n() != n || bases.local.len() != ordering.k || bases.local.iter().any(|b| b.n() != ordering.m) {
            return Err(Error::Size(format!(
                "bases do not match ordering with n={n}, k={}, m={}",
                ordering.k, ordering.m
            )));
        }
        Ok(Self {
            global: bases.global,
            local: bases.local,
            ordering,
        })
    }

    pub fn from_keypoints(
        keypoints: &[Point3<T>],
        method: OrderingMethod,
        k: usize,
        seed: u64,
        kind: BasisKind,
    ) -> Result<Self> {
        let ordering = sort_keypoints(keypoints, method, k, seed)?;
        let bases = match kind {
            BasisKind::Gft => build_multiscale_bases(keypoints, &ordering)?,
            BasisKind::Dct => MultiScaleBases {
                global: dct_basis(ordering.n()),
                local: (0..ordering.k).map(|_| dct_basis(ordering.m)).collect(),
            },
        };
        Self::new(bases, ordering)
    }

    pub fn n(&self) -> usize {
        self.ordering.n()
    }
}

#[derive(Debug, Clone)]
struct BranchCache<T> {
    coeffs: Matrix<T>,
    preact: Matrix<T>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache<T> {
    t_in: Matrix<T>,
    compressed: Matrix<T>,
    global: BranchCache<T>,
    local: Vec<BranchCache<T>>,
    mix: Matrix<T>,
    /// Spatial output of the global branch, original order.
    pub global_branch: Matrix<T>,
    /// Spatial output of the local branches, original order.
    pub local_branch: Matrix<T>,
}

impl<T: Scalar> AdapterCache<T> {
    /// Global-branch spectral coefficients `Uᵀ T_s`.
    pub fn global_coefficients(&self) -> &Matrix<T> {
        &self.global.coeffs
    }

    /// Spectral coefficients of local group `g`.
    pub fn local_coefficients(&self, g: usize) -> &Matrix<T> {
        &self.local[g].coeffs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads<T> {
    pub w_down: Matrix<T>,
    pub lin_w: Matrix<T>,
    pub lin_b: Matrix<T>,
    pub w_up: Matrix<T>,
    pub input: Matrix<T>,
}

/// `U (F + swish(F Wᵀ + b))` with `F = Uᵀ signal`.
fn branch_forward<T: Scalar>(
    signal: &Matrix<T>,
    basis: &SpectralBasis<T>,
    p: &AdapterParams<T>,
) -> Result<(Matrix<T>, BranchCache<T>)> {
    let coeffs = basis.eigenvectors.t_matmul(signal)?;
    let mut preact = coeffs.matmul_t(&p.lin_w)?;
    preact.add_row_broadcast(p.lin_b.as_slice());
    let tuned = coeffs.zip_map(&preact, |f, z| f + swish(z))?;
    let out = basis.eigenvectors.matmul(&tuned)?;
    Ok((out, BranchCache { coeffs, preact }))
}

/// Accumulates linear-layer grads and returns the gradient w.r.t. the branch input.
fn branch_backward<T: Scalar>(
    d_out: &Matrix<T>,
    basis: &SpectralBasis<T>,
    cache: &BranchCache<T>,
    p: &AdapterParams<T>,
    grads: &mut AdapterGrads<T>,
) -> Result<Matrix<T>> {
    let d_tuned = basis.eigenvectors.t_matmul(d_out)?;
    let d_pre = d_tuned.zip_map(&cache.preact, |g, z| g * swish_grad(z))?;
    let mut d_coeffs = d_pre.matmul(&p.lin_w)?;
    d_coeffs.add_assign(&d_tuned)?;
    grads.lin_w.add_assign(&d_pre.t_matmul(&cache.coeffs)?)?;
    for (b, g) in grads.lin_b.as_mut_slice().iter_mut().zip(d_pre.column_sums()) {
        *b += g;
    }
    basis.eigenvectors.matmul(&d_coeffs)
}

fn check_inputs<T: Scalar>(t_in: &Matrix<T>, p: &AdapterParams<T>, ctx: &AdapterContext<T>) -> Result<()> {
    p.validate()?;
    if t_in.cols() != p.channels() {
        return Err(shape_err(format!("{} channels", p.channels()), format!("{}", t_in.cols())));
    }
    if t_in.rows() != ctx.n() {
        return Err(Error::Size(format!("{} tokens for a context over {} key points", t_in.rows(), ctx.n())));
    }
    Ok(())
}

pub fn pcsa_forward<T: Scalar>(t_in: &Matrix<T>, params: &AdapterParams<T>, ctx: &AdapterContext<T>) -> Result<Matrix<T>> {
    pcsa_forward_cached(t_in, params, ctx).map(|(out, _)| out)
}

/// Forward pass over the `n` point tokens (class token excluded).
pub fn pcsa_forward_cached<T: Scalar>(
    t_in: &Matrix<T>,
    params: &AdapterParams<T>,
    ctx: &AdapterContext<T>,
) -> Result<(Matrix<T>, AdapterCache<T>)> {
    check_inputs(t_in, params, ctx)?;
    let ord = &ctx.ordering;
    let compressed = t_in.matmul_t(&params.w_down)?;

    let (global_branch, global) = branch_forward(&compressed, &ctx.global, params)?;

    let sorted = ord.sort_rows(&compressed)?;
    let mut local_sorted = Matrix::zeros(ord.n(), params.rank());
    let mut local = Vec::with_capacity(ord.k);
    for (i, basis) in ctx.local.iter().enumerate() {
        let block = sorted.row_block(i * ord.m, ord.m);
        let (out, cache) = branch_forward(&block, basis, params)?;
        local_sorted.set_row_block(i * ord.m, &out);
        local.push(cache);
    }
    let local_branch = ord.unsort_rows(&local_sorted)?;

    let mut mix = compressed.map(swish);
    mix.add_assign(&global_branch)?;
    mix.add_assign(&local_branch)?;
    let out = mix.matmul_t(&params.w_up)?.scale(params.scale);
    Ok((
        out,
        AdapterCache {
            t_in: t_in.clone(),
            compressed,
            global,
            local,
            mix,
            global_branch,
            local_branch,
        },
    ))
}

pub fn pcsa_backward<T: Scalar>(
    t_in: &Matrix<T>,
    params: &AdapterParams<T>,
    ctx: &AdapterContext<T>,
    upstream: &Matrix<T>,
) -> Result<AdapterGrads<T>> {
    let (_, cache) = pcsa_forward_cached(t_in, params, ctx)?;
    pcsa_backward_cached(params, ctx, &cache, upstream)
}

/// Reverse-mode gradients of the forward composition; GFT/iGFT act as fixed linear maps.
pub fn pcsa_backward_cached<T: Scalar>(
    params: &AdapterParams<T>,
    ctx: &AdapterContext<T>,
    cache: &AdapterCache<T>,
    upstream: &Matrix<T>,
) -> Result<AdapterGrads<T>> {
    if upstream.shape() != cache.t_in.shape() {
        return Err(shape_err(format!("{:?}", cache.t_in.shape()), format!("{:?}", upstream.shape())));
    }
    let (r, c) = (params.rank(), params.channels());
    let ord = &ctx.ordering;
    let mut grads = AdapterGrads {
        w_down: Matrix::zeros(r, c),
        lin_w: Matrix::zeros(r, r),
        lin_b: Matrix::zeros(1, r),
        w_up: upstream.t_matmul(&cache.mix)?.scale(params.scale),
        input: Matrix::zeros(cache.t_in.rows(), c),
    };
    let d_mix = upstream.matmul(&params.w_up)?.scale(params.scale);

    let mut d_comp = d_mix.zip_map(&cache.compressed, |g, x| g * swish_grad(x))?;
    d_comp.add_assign(&branch_backward(&d_mix, &ctx.global, &cache.global, params, &mut grads)?)?;

    let d_local_sorted = ord.sort_rows(&d_mix)?;
    let mut d_sorted = Matrix::zeros(ord.n(), r);
    for (i, (basis, bc)) in ctx.local.iter().zip(&cache.local).enumerate() {
        let blk = d_local_sorted.row_block(i * ord.m, ord.m);
        let d_in = branch_backward(&blk, basis, bc, params, &mut grads)?;
        d_sorted.set_row_block(i * ord.m, &d_in);
    }
    d_comp.add_assign(&ord.unsort_rows(&d_sorted)?)?;

    grads.w_down = d_comp.t_matmul(&cache.t_in)?;
    grads.input = d_comp.matmul(&params.w_down)?;
    Ok(grads)
}

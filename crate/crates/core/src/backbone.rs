//! Pre-norm transformer encoder with a class token, a linear classification
//! head, and optional spectral adapters running parallel to each FFN.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::adapter::{pcsa_backward_cached, pcsa_forward_cached, AdapterCache, AdapterContext, AdapterParams};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::pointcloud::{embed_backward, embed_patches_traced, EmbedParams, PatchSet};
use crate::scalar::{gelu, gelu_grad, Scalar};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_hidden: usize,
    pub ffn_ratio: usize,
    pub classes: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.embed_hidden == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Which tensors receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Full,
    LinearProbe,
    Pcsa,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::LinearProbe => "linear_probe",
            TrainMode::Pcsa => "pcsa",
        }
    }

    /// Whether the tensor called `name` is trainable under this mode.
    pub fn trains(self, name: &str) -> bool {
        match self {
            TrainMode::Full => true,
            TrainMode::LinearProbe => name.starts_with("head."),
            TrainMode::Pcsa => name.starts_with("head.") || name.starts_with("adapters."),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "linear_probe" => Ok(TrainMode::LinearProbe),
            "pcsa" => Ok(TrainMode::Pcsa),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Matrix<T>,
    pub ln1_b: Matrix<T>,
    pub wq: Matrix<T>,
    pub bq: Matrix<T>,
    pub wk: Matrix<T>,
    pub bk: Matrix<T>,
    pub wv: Matrix<T>,
    pub bv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub ln2_g: Matrix<T>,
    pub ln2_b: Matrix<T>,
    pub fc1_w: Matrix<T>,
    pub fc1_b: Matrix<T>,
    pub fc2_w: Matrix<T>,
    pub fc2_b: Matrix<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            ln1_g: Matrix::zeros(1, d),
            ln1_b: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            bq: Matrix::zeros(1, d),
            wk: Matrix::zeros(d, d),
            bk: Matrix::zeros(1, d),
            wv: Matrix::zeros(d, d),
            bv: Matrix::zeros(1, d),
            wo: Matrix::zeros(d, d),
            bo: Matrix::zeros(1, d),
            ln2_g: Matrix::zeros(1, d),
            ln2_b: Matrix::zeros(1, d),
            fc1_w: Matrix::zeros(hidden, d),
            fc1_b: Matrix::zeros(1, hidden),
            fc2_w: Matrix::zeros(d, hidden),
            fc2_b: Matrix::zeros(1, d),
        }
    }

    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, hidden);
        p.ln1_g = Matrix::from_fn(1, d, |_, _| T::one());
        p.ln2_g = Matrix::from_fn(1, d, |_, _| T::one());
        for w in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo, &mut p.fc1_w, &mut p.fc2_w] {
            fill_uniform(w, rng);
        }
        p
    }

    fn tensors(&self) -> [(&'static str, &Matrix<T>); 16] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("ffn.fc1_w", &self.fc1_w),
            ("ffn.fc1_b", &self.fc1_b),
            ("ffn.fc2_w", &self.fc2_w),
            ("ffn.fc2_b", &self.fc2_b),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 16] {
        let Self {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        } = self;
        [
            ("ln1.g", ln1_g),
            ("ln1.b", ln1_b),
            ("attn.wq", wq),
            ("attn.bq", bq),
            ("attn.wk", wk),
            ("attn.bk", bk),
            ("attn.wv", wv),
            ("attn.bv", bv),
            ("attn.wo", wo),
            ("attn.bo", bo),
            ("ln2.g", ln2_g),
            ("ln2.b", ln2_b),
            ("ffn.fc1_w", fc1_w),
            ("ffn.fc1_b", fc1_b),
            ("ffn.fc2_w", fc2_w),
            ("ffn.fc2_b", fc2_b),
        ]
    }
}

/// Uniform in `±1/√fan_in`.
fn fill_uniform<T: Scalar, R: Rng + ?Sized>(w: &mut Matrix<T>, rng: &mut R) {
    let bound = 1.0 / (w.cols() as f64).sqrt();
    for v in w.as_mut_slice() {
        *v = T::lit(rng.random_range(-bound..=bound));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    /// classes × 2d
    pub w: Matrix<T>,
    /// 1 × classes
    pub b: Matrix<T>,
}

impl<T: Scalar> Head<T> {
    pub fn init<R: Rng + ?Sized>(classes: usize, features: usize, rng: &mut R) -> Self {
        let mut w = Matrix::zeros(classes, features);
        fill_uniform(&mut w, rng);
        Self {
            w,
            b: Matrix::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub embed: EmbedParams<T>,
    /// 1 × d
    pub cls: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head: Head<T>,
    pub heads: usize,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut embed = EmbedParams::zeros(cfg.embed_hidden, d);
        fill_uniform(&mut embed.w1, rng);
        fill_uniform(&mut embed.w2, rng);
        let mut cls = Matrix::zeros(1, d);
        for v in cls.as_mut_slice() {
            *v = T::lit(rng.random_range(-0.02..=0.02));
        }
        let layers = (0..cfg.layers).map(|_| LayerParams::init(d, d * cfg.ffn_ratio, rng)).collect();
        Ok(Self {
            embed,
            cls,
            layers,
            head: Head::init(cfg.classes, 2 * d, rng),
            heads: cfg.heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.cls.cols()
    }
}

/// Backbone plus one adapter per layer (or none).
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub backbone: BackboneParams<T>,
    pub adapters: Vec<AdapterParams<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(backbone: BackboneParams<T>, adapters: Vec<AdapterParams<T>>) -> Result<Self> {
        if !adapters.is_empty() && adapters.len() != backbone.layers.len() {
            return Err(Error::Config(format!(
                "{} adapters for {} layers",
                adapters.len(),
                backbone.layers.len()
            )));
        }
        if let Some(a) = adapters.iter().find(|a| a.channels() != backbone.dim()) {
            return Err(shape_err(format!("{} adapter channels", backbone.dim()), format!("{}", a.channels())));
        }
        Ok(Self { backbone, adapters })
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Same shapes, all zeros (adapter scales copied).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, m| m.as_mut_slice().iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    /// Visits every tensor with its stable dotted name.
    pub fn visit(&self, mut f: impl FnMut(&str, &Matrix<T>)) {
        let b = &self.backbone;
        f("embed.w1", &b.embed.w1);
        f("embed.b1", &b.embed.b1);
        f("embed.w2", &b.embed.w2);
        f("embed.b2", &b.embed.b2);
        f("cls", &b.cls);
        for (i, layer) in b.layers.iter().enumerate() {
            for (name, m) in layer.tensors() {
                f(&format!("layers.{i}.{name}"), m);
            }
        }
        f("head.w", &b.head.w);
        f("head.b", &b.head.b);
        for (i, a) in self.adapters.iter().enumerate() {
            f(&format!("adapters.{i}.w_down"), &a.w_down);
            f(&format!("adapters.{i}.lin_w"), &a.lin_w);
            f(&format!("adapters.{i}.lin_b"), &a.lin_b);
            f(&format!("adapters.{i}.w_up"), &a.w_up);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Matrix<T>)) {
        let b = &mut self.backbone;
        f("embed.w1", &mut b.embed.w1);
        f("embed.b1", &mut b.embed.b1);
        f("embed.w2", &mut b.embed.w2);
        f("embed.b2", &mut b.embed.b2);
        f("cls", &mut b.cls);
        for (i, layer) in b.layers.iter_mut().enumerate() {
            for (name, m) in layer.tensors_mut() {
                f(&format!("layers.{i}.{name}"), m);
            }
        }
        f("head.w", &mut b.head.w);
        f("head.b", &mut b.head.b);
        for (i, a) in self.adapters.iter_mut().enumerate() {
            f(&format!("adapters.{i}.w_down"), &mut a.w_down);
            f(&format!("adapters.{i}.lin_w"), &mut a.lin_w);
            f(&format!("adapters.{i}.lin_b"), &mut a.lin_b);
            f(&format!("adapters.{i}.w_up"), &mut a.w_up);
        }
    }

    /// Scalar count of tensors selected by `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        self.visit(|name, m| {
            if pred(name) {
                n += m.len();
            }
        });
        n
    }

    pub fn count_trainable(&self, mode: TrainMode) -> usize {
        self.count_where(|n| mode.trains(n))
    }

    pub fn count_total(&self) -> usize {
        self.count_where(|_| true)
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Matrix<T>> {
        let mut out = BTreeMap::new();
        self.visit(|n, m| {
            out.insert(n.to_string(), m.clone());
        });
        out
    }

    /// Tensors of `grads` that are trainable under `mode`.
    pub fn select_trainable(grads: &Self, mode: TrainMode) -> Gradients<T> {
        let mut out = BTreeMap::new();
        grads.visit(|n, m| {
            if mode.trains(n) {
                out.insert(n.to_string(), m.clone());
            }
        });
        out
    }
}

/// Gradients keyed by tensor name; only trainable tensors appear.
pub type Gradients<T> = BTreeMap<String, Matrix<T>>;

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Matrix<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &Matrix<T>, g: &Matrix<T>, b: &Matrix<T>) -> (Matrix<T>, LnCache<T>) {
    let (rows, d) = x.shape();
    let df = T::from_usize_lossy(d);
    let eps = T::lit(LN_EPS);
    let mut xhat = Matrix::zeros(rows, d);
    let mut out = Matrix::zeros(rows, d);
    let mut rstd = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[(i, j)] = h;
            out[(i, j)] = g[(0, j)] * h + b[(0, j)];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    g: &Matrix<T>,
    cache: &LnCache<T>,
    param_grads: Option<(&mut Matrix<T>, &mut Matrix<T>)>,
) -> Matrix<T> {
    let (rows, d) = dy.shape();
    let df = T::from_usize_lossy(d);
    if let Some((dg, db)) = param_grads {
        for i in 0..rows {
            for j in 0..d {
                dg[(0, j)] += dy[(i, j)] * cache.xhat[(i, j)];
                db[(0, j)] += dy[(i, j)];
            }
        }
    }
    let mut dx = Matrix::zeros(rows, d);
    for i in 0..rows {
        let dxhat: Vec<T> = (0..d).map(|j| dy[(i, j)] * g[(0, j)]).collect();
        let mean_d = dxhat.iter().copied().sum::<T>() / df;
        let mean_dx = (0..d).map(|j| dxhat[j] * cache.xhat[(i, j)]).sum::<T>() / df;
        for j in 0..d {
            dx[(i, j)] = cache.rstd[i] * (dxhat[j] - mean_d - cache.xhat[(i, j)] * mean_dx);
        }
    }
    dx
}

fn affine<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut y = x.matmul_t(w)?;
    y.add_row_broadcast(b.as_slice());
    Ok(y)
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(s: &Matrix<T>) -> Matrix<T> {
    let mut p = s.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    p
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    ctx: Matrix<T>,
}

fn attention<T: Scalar>(x: &Matrix<T>, p: &LayerParams<T>, heads: usize) -> Result<(Matrix<T>, AttnCache<T>)> {
    let d = x.cols();
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let q = affine(x, &p.wq, &p.bq)?;
    let k = affine(x, &p.wk, &p.bk)?;
    let v = affine(x, &p.wv, &p.bv)?;
    let mut ctx = Matrix::zeros(x.rows(), d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (q.col_block(h * dh, dh), k.col_block(h * dh, dh), v.col_block(h * dh, dh));
        let pr = softmax_rows(&qh.matmul_t(&kh)?.scale(scale));
        ctx.set_col_block(h * dh, &pr.matmul(&vh)?);
        probs.push(pr);
    }
    let out = affine(&ctx, &p.wo, &p.bo)?;
    Ok((out, AttnCache { q, k, v, probs, ctx }))
}

/// Per-layer activations kept for the backward pass and for inspection.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub input: Matrix<T>,
    pub after_attention: Matrix<T>,
    pub output: Matrix<T>,
    ln1: LnCache<T>,
    ln1_out: Matrix<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    ln2_out: Matrix<T>,
    fc1_pre: Matrix<T>,
    fc1_act: Matrix<T>,
    adapter: Option<AdapterCache<T>>,
}

impl<T: Scalar> LayerTrace<T> {
    /// Attention probabilities of head `h`.
    pub fn attention_probs(&self, h: usize) -> &Matrix<T> {
        &self.attn.probs[h]
    }

    pub fn adapter(&self) -> Option<&AdapterCache<T>> {
        self.adapter.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    pub tokens: Matrix<T>,
    /// `[class token ‖ mean of point tokens]`, length 2d.
    pub pooled: Vec<T>,
}

/// Adapters and the per-sample context they share.
#[derive(Debug, Clone, Copy)]
pub struct AdapterSet<'a, T> {
    pub params: &'a [AdapterParams<T>],
    pub ctx: &'a AdapterContext<T>,
}

/// Stacks the class token above the point tokens.
pub fn assemble_tokens<T: Scalar>(cls: &Matrix<T>, points: &Matrix<T>) -> Result<Matrix<T>> {
    if cls.shape() != (1, points.cols()) {
        return Err(shape_err(format!("1x{}", points.cols()), format!("{:?}", cls.shape())));
    }
    let mut t = Matrix::zeros(points.rows() + 1, points.cols());
    t.set_row_block(0, cls);
    t.set_row_block(1, points);
    Ok(t)
}

fn pool<T: Scalar>(tokens: &Matrix<T>) -> Vec<T> {
    let d = tokens.cols();
    let n = tokens.rows() - 1;
    let mut pooled = tokens.row(0).to_vec();
    let mut mean = vec![T::zero(); d];
    for i in 1..=n {
        for (m, &v) in mean.iter_mut().zip(tokens.row(i)) {
            *m += v;
        }
    }
    let nf = T::from_usize_lossy(n.max(1));
    pooled.extend(mean.into_iter().map(|m| m / nf));
    pooled
}

pub fn encoder_forward<T: Scalar>(
    t0: &Matrix<T>,
    params: &BackboneParams<T>,
    adapters: Option<AdapterSet<'_, T>>,
) -> Result<EncoderOutput<T>> {
    encoder_forward_traced(t0, params, adapters).map(|(o, _)| o)
}

/// Per layer: `T' = Attn(LN(T)) + T`, `T_next = FFN(LN(T')) + T' + pad(PCSA(LN(T')[1..]))`.
pub fn encoder_forward_traced<T: Scalar>(
    t0: &Matrix<T>,
    params: &BackboneParams<T>,
    adapters: Option<AdapterSet<'_, T>>,
) -> Result<(EncoderOutput<T>, Vec<LayerTrace<T>>)> {
    let d = params.dim();
    if t0.cols() != d || t0.rows() < 2 {
        return Err(shape_err(format!("(n+1)x{d} with n >= 1"), format!("{:?}", t0.shape())));
    }
    if let Some(a) = adapters {
        if a.params.len() != params.layers.len() {
            return Err(Error::Size(format!("{} adapters for {} layers", a.params.len(), params.layers.len())));
        }
    }
    let mut x = t0.clone();
    let mut traces = Vec::with_capacity(params.layers.len());
    for (li, lp) in params.layers.iter().enumerate() {
        let (ln1_out, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let (attn_out, attn) = attention(&ln1_out, lp, params.heads)?;
        let after_attention = attn_out.add(&x)?;
        let (ln2_out, ln2) = layer_norm(&after_attention, &lp.ln2_g, &lp.ln2_b);
        let fc1_pre = affine(&ln2_out, &lp.fc1_w, &lp.fc1_b)?;
        let fc1_act = fc1_pre.map(gelu);
        let mut output = affine(&fc1_act, &lp.fc2_w, &lp.fc2_b)?;
        output.add_assign(&after_attention)?;
        let adapter = match adapters {
            Some(a) => {
                let points = ln2_out.row_block(1, ln2_out.rows() - 1);
                let (delta, cache) = pcsa_forward_cached(&points, &a.params[li], a.ctx)?;
                for i in 0..delta.rows() {
                    for (o, &v) in output.row_mut(i + 1).iter_mut().zip(delta.row(i)) {
                        *o += v;
                    }
                }
                Some(cache)
            }
            None => None,
        };
        traces.push(LayerTrace {
            input: x,
            after_attention,
            output: output.clone(),
            ln1,
            ln1_out,
            attn,
            ln2,
            ln2_out,
            fc1_pre,
            fc1_act,
            adapter,
        });
        x = output;
    }
    let pooled = pool(&x);
    Ok((EncoderOutput { tokens: x, pooled }, traces))
}

/// Backpropagates `d_out` (gradient of the final tokens) through the encoder.
///
/// Adapter gradients are always accumulated into `grads.adapters`; backbone
/// weight gradients only when `weight_grads` is set. Returns the gradient of `t0`.
pub fn encoder_backward<T: Scalar>(
    params: &BackboneParams<T>,
    adapters: Option<AdapterSet<'_, T>>,
    traces: &[LayerTrace<T>],
    d_out: &Matrix<T>,
    weight_grads: bool,
    grads: &mut Model<T>,
) -> Result<Matrix<T>> {
    let heads = params.heads;
    let mut dy = d_out.clone();
    for li in (0..params.layers.len()).rev() {
        let lp = &params.layers[li];
        let tr = &traces[li];
        let gl = &mut grads.backbone.layers[li];

        // FFN branch
        let mut d_tp = dy.clone();
        let d_act = dy.matmul(&lp.fc2_w)?;
        if weight_grads {
            gl.fc2_w.add_assign(&dy.t_matmul(&tr.fc1_act)?)?;
            add_col_sums(&mut gl.fc2_b, &dy);
        }
        let d_pre = d_act.zip_map(&tr.fc1_pre, |g, z| g * gelu_grad(z))?;
        let mut d_ln2 = d_pre.matmul(&lp.fc1_w)?;
        if weight_grads {
            gl.fc1_w.add_assign(&d_pre.t_matmul(&tr.ln2_out)?)?;
            add_col_sums(&mut gl.fc1_b, &d_pre);
        }
        if let (Some(a), Some(cache)) = (adapters, tr.adapter.as_ref()) {
            let upstream = dy.row_block(1, dy.rows() - 1);
            let ag = pcsa_backward_cached(&a.params[li], a.ctx, cache, &upstream)?;
            let ga = &mut grads.adapters[li];
            ga.w_down.add_assign(&ag.w_down)?;
            ga.lin_w.add_assign(&ag.lin_w)?;
            ga.lin_b.add_assign(&ag.lin_b)?;
            ga.w_up.add_assign(&ag.w_up)?;
            for i in 0..ag.input.rows() {
                for (o, &v) in d_ln2.row_mut(i + 1).iter_mut().zip(ag.input.row(i)) {
                    *o += v;
                }
            }
        }
        let pg = if weight_grads { Some((&mut gl.ln2_g, &mut gl.ln2_b)) } else { None };
        d_tp.add_assign(&layer_norm_backward(&d_ln2, &lp.ln2_g, &tr.ln2, pg))?;

        // attention branch
        let mut dx = d_tp.clone();
        let at = &tr.attn;
        let d_ctx = d_tp.matmul(&lp.wo)?;
        if weight_grads {
            gl.wo.add_assign(&d_tp.t_matmul(&at.ctx)?)?;
            add_col_sums(&mut gl.bo, &d_tp);
        }
        let d = params.dim();
        let dh = d / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let rows = d_ctx.rows();
        let (mut dq, mut dk, mut dv) = (Matrix::zeros(rows, d), Matrix::zeros(rows, d), Matrix::zeros(rows, d));
        for h in 0..heads {
            let pr = &at.probs[h];
            let dch = d_ctx.col_block(h * dh, dh);
            let (qh, kh, vh) = (at.q.col_block(h * dh, dh), at.k.col_block(h * dh, dh), at.v.col_block(h * dh, dh));
            let d_p = dch.matmul_t(&vh)?;
            dv.set_col_block(h * dh, &pr.t_matmul(&dch)?);
            let mut d_s = Matrix::zeros(rows, rows);
            for i in 0..rows {
                let dot: T = (0..rows).map(|j| d_p[(i, j)] * pr[(i, j)]).sum();
                for j in 0..rows {
                    d_s[(i, j)] = pr[(i, j)] * (d_p[(i, j)] - dot) * scale;
                }
            }
            dq.set_col_block(h * dh, &d_s.matmul(&kh)?);
            dk.set_col_block(h * dh, &d_s.t_matmul(&qh)?);
        }
        let mut d_ln1 = dq.matmul(&lp.wq)?;
        d_ln1.add_assign(&dk.matmul(&lp.wk)?)?;
        d_ln1.add_assign(&dv.matmul(&lp.wv)?)?;
        if weight_grads {
            gl.wq.add_assign(&dq.t_matmul(&tr.ln1_out)?)?;
            gl.wk.add_assign(&dk.t_matmul(&tr.ln1_out)?)?;
            gl.wv.add_assign(&dv.t_matmul(&tr.ln1_out)?)?;
            add_col_sums(&mut gl.bq, &dq);
            add_col_sums(&mut gl.bk, &dk);
            add_col_sums(&mut gl.bv, &dv);
        }
        let pg = if weight_grads { Some((&mut gl.ln1_g, &mut gl.ln1_b)) } else { None };
        dx.add_assign(&layer_norm_backward(&d_ln1, &lp.ln1_g, &tr.ln1, pg))?;
        dy = dx;
    }
    Ok(dy)
}

fn add_col_sums<T: Scalar>(target: &mut Matrix<T>, m: &Matrix<T>) {
    for (t, s) in target.as_mut_slice().iter_mut().zip(m.column_sums()) {
        *t += s;
    }
}

/// Affine classification head: `W·pooled + b`.
pub fn classify<T: Scalar>(pooled: &[T], head: &Head<T>) -> Result<Vec<T>> {
    if pooled.len() != head.w.cols() {
        return Err(shape_err(format!("{} features", head.w.cols()), format!("{}", pooled.len())));
    }
    Ok((0..head.classes())
        .map(|c| head.w.row(c).iter().zip(pooled).map(|(&w, &x)| w * x).sum::<T>() + head.b[(0, c)])
        .collect())
}

/// Softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Data(format!("label {label} out of range for {} classes", logits.len())));
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = logits.iter().map(|&l| (l - m).exp()).sum();
    let lse = m + z.ln();
    let mut grad: Vec<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
    grad[label] -= T::one();
    Ok((lse - logits[label], grad))
}

/// One labelled cloud after sampling/grouping, with its cached adapter context.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub patches: PatchSet<T>,
    pub ctx: Option<AdapterContext<T>>,
    pub label: usize,
}

fn adapter_set<'a, T: Scalar>(model: &'a Model<T>, sample: &'a Sample<T>) -> Result<Option<AdapterSet<'a, T>>> {
    if !model.has_adapters() {
        return Ok(None);
    }
    match &sample.ctx {
        Some(ctx) => Ok(Some(AdapterSet {
            params: &model.adapters,
            ctx,
        })),
        None => Err(Error::Config("model has adapters but the sample carries no spectral context".into())),
    }
}

/// Pooled feature for one sample.
pub fn sample_features<T: Scalar>(sample: &Sample<T>, model: &Model<T>) -> Result<Vec<T>> {
    let b = &model.backbone;
    let (tokens, _) = embed_patches_traced(&sample.patches, &b.embed)?;
    let t0 = assemble_tokens(&b.cls, &tokens.values)?;
    Ok(encoder_forward(&t0, b, adapter_set(model, sample)?)?.pooled)
}

pub fn sample_logits<T: Scalar>(sample: &Sample<T>, model: &Model<T>) -> Result<Vec<T>> {
    classify(&sample_features(sample, model)?, &model.backbone.head)
}

/// Loss of one sample and gradients for every tensor `mode` trains (others stay zero).
pub fn sample_loss_and_grads<T: Scalar>(sample: &Sample<T>, model: &Model<T>, mode: TrainMode) -> Result<(T, Model<T>)> {
    if mode == TrainMode::Pcsa && !model.has_adapters() {
        return Err(Error::Config("pcsa mode needs adapters".into()));
    }
    let b = &model.backbone;
    let adapters = adapter_set(model, sample)?;
    let (tokens, etrace) = embed_patches_traced(&sample.patches, &b.embed)?;
    let t0 = assemble_tokens(&b.cls, &tokens.values)?;
    let (out, traces) = encoder_forward_traced(&t0, b, adapters)?;
    let logits = classify(&out.pooled, &b.head)?;
    let (loss, d_logits) = cross_entropy(&logits, sample.label)?;

    let mut grads = model.zeros_like();
    let features = out.pooled.len();
    for (c, &g) in d_logits.iter().enumerate() {
        for (w, &x) in grads.backbone.head.w.row_mut(c).iter_mut().zip(&out.pooled) {
            *w += g * x;
        }
        grads.backbone.head.b[(0, c)] += g;
    }
    if mode == TrainMode::LinearProbe {
        return Ok((loss, grads));
    }
    let d = b.dim();
    let mut d_pooled = vec![T::zero(); features];
    for (c, &g) in d_logits.iter().enumerate() {
        for (dp, &w) in d_pooled.iter_mut().zip(b.head.w.row(c)) {
            *dp += g * w;
        }
    }
    let n = out.tokens.rows() - 1;
    let nf = T::from_usize_lossy(n);
    let mut d_tokens = Matrix::zeros(n + 1, d);
    d_tokens.row_mut(0).copy_from_slice(&d_pooled[..d]);
    for i in 1..=n {
        for (o, &g) in d_tokens.row_mut(i).iter_mut().zip(&d_pooled[d..]) {
            *o = g / nf;
        }
    }
    let full = mode == TrainMode::Full;
    let d_t0 = encoder_backward(b, adapters, &traces, &d_tokens, full, &mut grads)?;
    if full {
        grads.backbone.cls.row_mut(0).copy_from_slice(d_t0.row(0));
        let d_points = d_t0.row_block(1, n);
        grads.backbone.embed = embed_backward(&sample.patches, &b.embed, &etrace, &d_points)?;
    }
    Ok((loss, grads))
}

/// Mean cross-entropy over `batch` and gradients of exactly the trainable set.
///
/// Per-sample work may run in parallel; reduction is in batch order.
pub fn loss_and_grads<T, S>(batch: &[S], model: &Model<T>, mode: TrainMode) -> Result<(T, Gradients<T>)>
where
    T: Scalar,
    S: Borrow<Sample<T>> + Sync,
{
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let per_sample: Vec<(T, Model<T>)> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(s.borrow(), model, mode))
        .collect::<Result<_>>()?;
    let inv = T::one() / T::from_usize_lossy(batch.len());
    let mut total = model.zeros_like();
    let mut loss = T::zero();
    for (l, g) in &per_sample {
        loss += *l;
        let mut flat = Vec::new();
        g.visit(|_, m| flat.push(m.as_slice().to_vec()));
        let mut it = flat.into_iter();
        total.visit_mut(|_, m| {
            let src = it.next().expect("same layout");
            for (a, b) in m.as_mut_slice().iter_mut().zip(src) {
                *a += b;
            }
        });
    }
    total.visit_mut(|_, m| m.as_mut_slice().iter_mut().for_each(|v| *v *= inv));
    Ok((loss * inv, Model::select_trainable(&total, mode)))
}

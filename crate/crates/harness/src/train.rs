//! Pretraining, tuning and evaluation workflows.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use spectral_peft::adapter::{AdapterContext, AdapterParams, BasisKind};
use spectral_peft::backbone::{
    classify, cross_entropy, encoder_forward_traced, loss_and_grads, sample_features, sample_logits, assemble_tokens,
    AdapterSet, BackboneParams, Gradients, Head, Model, Sample, TrainMode,
};
use spectral_peft::graph::{build_multiscale_bases, MultiScaleBases};
use spectral_peft::ordering::sort_keypoints_with_bits;
use spectral_peft::pointcloud::{embed_patches, farthest_point_sampling, group_patches};
use spectral_peft::spectral::dct_basis;
use spectral_peft::{Matrix, PointCloud};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Optimizer};
use crate::dataset::{load_split, DatasetManifest, Split, Task};
use crate::error::{HarnessError, Result};
use crate::metrics::{Accuracy, MetricsRecord, MetricsSink};

/// RNG streams derived from `optim.seed`.
const STREAM_BACKBONE: u64 = 0;
const STREAM_HEAD: u64 = 1;
const STREAM_ADAPTER: u64 = 2;
const STREAM_SHUFFLE: u64 = 1 << 32;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// FNV-1a of the sample id mixed with `seed`; used to seed per-sample random orderings.
fn sample_seed(id: &str, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One task's clouds and class names.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub classes: Vec<String>,
    pub train: Vec<PointCloud<f64>>,
    pub test: Vec<PointCloud<f64>>,
}

impl TaskData {
    pub fn load(dir: &Path, task: Task) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        Ok(Self {
            classes: manifest.task(task).classes.clone(),
            train: load_split(dir, &manifest, task, Split::Train)?,
            test: load_split(dir, &manifest, task, Split::Test)?,
        })
    }

    /// Generates the task in memory instead of reading files.
    pub fn generate(cfg: &ExperimentConfig, task: Task) -> Result<Self> {
        let d = &cfg.dataset;
        Ok(Self {
            classes: match task {
                Task::Source => d.source.clone(),
                Task::Target => d.target.clone(),
            },
            train: crate::dataset::generate_split(d, task, Split::Train)?,
            test: crate::dataset::generate_split(d, task, Split::Test)?,
        })
    }
}

pub fn build_context(keypoints: &[[f64; 3]], cfg: &ExperimentConfig, seed: u64) -> Result<AdapterContext<f64>> {
    let a = &cfg.adapter;
    let ordering = sort_keypoints_with_bits(keypoints, a.ordering, a.k, seed, a.bits)?;
    let bases = match a.basis {
        BasisKind::Gft => build_multiscale_bases(keypoints, &ordering)?,
        BasisKind::Dct => MultiScaleBases {
            global: dct_basis(ordering.n()),
            local: (0..ordering.k).map(|_| dct_basis(ordering.m)).collect(),
        },
    };
    Ok(AdapterContext::new(bases, ordering)?)
}

/// Samples key points, groups patches and (optionally) builds the spectral context.
pub fn prepare_samples(clouds: &[PointCloud<f64>], cfg: &ExperimentConfig, with_ctx: bool) -> Result<Vec<Sample<f64>>> {
    clouds
        .par_iter()
        .map(|c| {
            let label = c
                .label
                .ok_or_else(|| HarnessError::Core(spectral_peft::Error::Data(format!("{}: unlabelled cloud", c.id))))?;
            let kp = farthest_point_sampling(c, cfg.model.n, 0)?;
            let patches = group_patches(c, &kp, cfg.model.g)?;
            let ctx = if with_ctx {
                Some(build_context(&patches.keypoints, cfg, sample_seed(&c.id, cfg.optim.seed))?)
            } else {
                None
            };
            Ok(Sample { patches, ctx, label })
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A training or evaluation set seen through the model.
trait Objective: Sync {
    fn len(&self) -> usize;
    fn batch_grads(&self, model: &Model<f64>, idx: &[usize], mode: TrainMode) -> Result<(f64, Gradients<f64>)>;
    fn logits(&self, model: &Model<f64>, i: usize) -> Result<Vec<f64>>;
    fn label(&self, i: usize) -> usize;
}

struct SampleSet<'a>(&'a [Sample<f64>]);

impl Objective for SampleSet<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn batch_grads(&self, model: &Model<f64>, idx: &[usize], mode: TrainMode) -> Result<(f64, Gradients<f64>)> {
        let batch: Vec<&Sample<f64>> = idx.iter().map(|&i| &self.0[i]).collect();
        Ok(loss_and_grads(&batch, model, mode)?)
    }

    fn logits(&self, model: &Model<f64>, i: usize) -> Result<Vec<f64>> {
        Ok(sample_logits(&self.0[i], model)?)
    }

    fn label(&self, i: usize) -> usize {
        self.0[i].label
    }
}

/// Pooled features of a frozen backbone; only the head is trained on top.
struct FeatureSet {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl FeatureSet {
    fn new(samples: &[Sample<f64>], model: &Model<f64>) -> Result<Self> {
        let features = samples
            .par_iter()
            .map(|s| sample_features(s, model))
            .collect::<spectral_peft::Result<Vec<_>>>()?;
        Ok(Self {
            features,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}

impl Objective for FeatureSet {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch_grads(&self, model: &Model<f64>, idx: &[usize], mode: TrainMode) -> Result<(f64, Gradients<f64>)> {
        if mode != TrainMode::LinearProbe {
            return Err(HarnessError::Config("cached features only support linear probing".into()));
        }
        let head = &model.backbone.head;
        let mut gw = Matrix::zeros(head.w.rows(), head.w.cols());
        let mut gb = Matrix::zeros(1, head.classes());
        let mut loss = 0.0;
        for &i in idx {
            let f = &self.features[i];
            let (l, dl) = cross_entropy(&classify(f, head)?, self.labels[i])?;
            loss += l;
            for (c, &g) in dl.iter().enumerate() {
                for (w, &x) in gw.row_mut(c).iter_mut().zip(f) {
                    *w += g * x;
                }
                gb[(0, c)] += g;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        let mut grads = BTreeMap::new();
        grads.insert("head.w".to_string(), gw.scale(inv));
        grads.insert("head.b".to_string(), gb.scale(inv));
        Ok((loss * inv, grads))
    }

    fn logits(&self, model: &Model<f64>, i: usize) -> Result<Vec<f64>> {
        Ok(classify(&self.features[i], &model.backbone.head)?)
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Accuracy and mean cross-entropy over a whole set.
fn evaluate(set: &dyn Objective, model: &Model<f64>) -> Result<(Accuracy, f64)> {
    let per: Vec<(bool, f64)> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let logits = set.logits(model, i)?;
            let (loss, _) = cross_entropy(&logits, set.label(i))?;
            Ok((argmax(&logits) == set.label(i), loss))
        })
        .collect::<Result<_>>()?;
    let correct = per.iter().filter(|(ok, _)| *ok).count() as u64;
    let loss = per.iter().map(|(_, l)| l).sum::<f64>() / per.len() as f64;
    Ok((Accuracy::new(correct, per.len() as u64), loss))
}

struct OptimState {
    kind: Optimizer,
    weight_decay: f64,
    m: BTreeMap<String, Matrix<f64>>,
    v: BTreeMap<String, Matrix<f64>>,
    t: i32,
}

impl OptimState {
    fn new(kind: Optimizer, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model<f64>, grads: &Gradients<f64>, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let t = self.t;
        let (kind, wd) = (self.kind, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(|name, p| {
            let Some(g) = grads.get(name) else { return };
            match kind {
                Optimizer::Sgd => {
                    for (w, &gi) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *w -= lr * (gi + wd * *w);
                    }
                }
                Optimizer::AdamW => {
                    let m = ms.entry(name.to_string()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let v = vs.entry(name.to_string()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for (((w, &gi), mi), vi) in p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *w -= lr * ((*mi / c1) / ((*vi / c2).sqrt() + eps) + wd * *w);
                    }
                }
            }
        });
    }
}

/// Optimizer settings of one training phase.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub phase: &'static str,
    pub mode: TrainMode,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Schedule {
    /// Cosine decay from `lr` to zero over all steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
    }
}

/// Rescales all gradients together so their joint L2 norm is at most `clip`.
fn clip_gradients(mut grads: Gradients<f64>, clip: f64) -> Gradients<f64> {
    if clip <= 0.0 {
        return grads;
    }
    let norm = grads.values().flat_map(|g| g.as_slice()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        }
    }
    grads
}

fn train_loop(
    model: &mut Model<f64>,
    train: &dyn Objective,
    test: &dyn Objective,
    sched: &Schedule,
    sink: &mut MetricsSink,
) -> Result<()> {
    let trainable = model.count_trainable(sched.mode);
    let total = model.count_total();
    let record = |epoch, lr, loss, tr, te| MetricsRecord::new(sched.phase, sched.mode.name(), epoch, lr, loss, tr, te, trainable, total);

    let (train_acc, train_loss) = evaluate(train, model)?;
    let (test_acc, _) = evaluate(test, model)?;
    sink.emit(record(0, sched.lr, train_loss, train_acc, test_acc))?;

    let n = train.len();
    let steps_per_epoch = n.div_ceil(sched.batch);
    let total_steps = steps_per_epoch * sched.epochs;
    let mut opt = OptimState::new(sched.optimizer, sched.weight_decay);
    let mut step = 0;
    for epoch in 1..=sched.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(sched.seed, STREAM_SHUFFLE + epoch as u64));
        let mut loss_sum = 0.0;
        let mut lr = sched.lr;
        for batch in order.chunks(sched.batch) {
            lr = sched.lr_at(step, total_steps);
            let (loss, grads) = train.batch_grads(model, batch, sched.mode)?;
            if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(HarnessError::Diverged(format!(
                    "{} epoch {epoch} step {step}: loss {loss}, lr {lr}",
                    sched.phase
                )));
            }
            let grads = clip_gradients(grads, sched.clip);
            opt.step(model, &grads, lr);
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let (train_acc, _) = evaluate(train, model)?;
        let (test_acc, _) = evaluate(test, model)?;
        sink.emit(record(epoch, lr, loss_sum / n as f64, train_acc, test_acc))?;
    }
    Ok(())
}

const MODEL_KEYS: [&str; 6] = ["model.n", "model.g", "model.d", "model.layers", "model.heads", "model.embed_hidden"];
const ADAPTER_KEYS: [&str; 6] = ["adapter.r", "adapter.s", "adapter.k", "adapter.ordering", "adapter.basis", "adapter.bits"];

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Copies named tensors from `ck` into `model`; every model tensor must be present unless `partial`.
fn fill_model(model: &mut Model<f64>, ck: &Checkpoint, partial: bool) -> Result<()> {
    let mut err = None;
    model.visit_mut(|name, m| {
        if err.is_some() {
            return;
        }
        match ck.tensors.get(name) {
            Some(t) if t.value.shape() == m.shape() => *m = t.value.clone(),
            Some(t) => {
                err = Some(HarnessError::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.value.shape(),
                    m.shape()
                )))
            }
            None if partial => {}
            None => err = Some(HarnessError::Format(format!("checkpoint lacks tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Rebuilds the frozen backbone stored by [`pretrain`].
pub fn load_backbone(base: &Checkpoint, cfg: &ExperimentConfig) -> Result<Model<f64>> {
    let kind = base.meta("kind")?;
    if kind != "base" {
        return Err(HarnessError::Config(format!("expected a base checkpoint, got kind {kind:?}")));
    }
    for key in MODEL_KEYS {
        let want = cfg.get(key)?;
        let got = base.meta(key)?;
        if got != want {
            return Err(HarnessError::Config(format!("{key}: checkpoint has {got}, config has {want}")));
        }
    }
    if base.tensors.values().any(|t| t.trainable) {
        return Err(HarnessError::Config("base checkpoint must be fully frozen".into()));
    }
    let classes = base.meta("classes")?.split(',').count();
    let bcfg = cfg.backbone_config(classes);
    let mut model = Model::new(BackboneParams::init(&bcfg, &mut seeded(0, 0))?, Vec::new())?;
    fill_model(&mut model, base, false)?;
    Ok(model)
}

/// Trains every parameter on the source task and returns a frozen checkpoint.
pub fn pretrain(cfg: &ExperimentConfig, data: &TaskData, sink: &mut MetricsSink) -> Result<(Checkpoint, Model<f64>)> {
    cfg.validate()?;
    let bcfg = cfg.backbone_config(data.classes.len());
    let mut model = Model::new(BackboneParams::init(&bcfg, &mut seeded(cfg.optim.seed, STREAM_BACKBONE))?, Vec::new())?;
    let train = prepare_samples(&data.train, cfg, false)?;
    let test = prepare_samples(&data.test, cfg, false)?;
    let sched = Schedule {
        phase: "pretrain",
        mode: TrainMode::Full,
        optimizer: cfg.optim.optimizer,
        lr: cfg.pretrain.lr,
        weight_decay: cfg.optim.weight_decay,
        clip: cfg.optim.clip,
        epochs: cfg.pretrain.epochs,
        batch: cfg.optim.batch,
        seed: cfg.optim.seed,
    };
    train_loop(&mut model, &SampleSet(&train), &SampleSet(&test), &sched, sink)?;

    let mut ck = Checkpoint::default();
    ck.meta.insert("kind".into(), "base".into());
    ck.meta.insert("classes".into(), data.classes.join(","));
    for key in MODEL_KEYS {
        ck.meta.insert(key.into(), cfg.get(key)?);
    }
    model.visit(|name, m| ck.insert(name, m, false));
    Ok((ck, model))
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub delta: Checkpoint,
    pub model: Model<f64>,
}

/// Fresh target head and, in pcsa mode, zero-initialized adapters on the frozen backbone.
pub fn tuning_model(cfg: &ExperimentConfig, base: &Checkpoint, classes: usize) -> Result<Model<f64>> {
    let mut model = load_backbone(base, cfg)?;
    let d = cfg.model.d;
    model.backbone.head = Head::init(classes, 2 * d, &mut seeded(cfg.optim.seed, STREAM_HEAD));
    if cfg.mode == TrainMode::Pcsa {
        let mut rng = seeded(cfg.optim.seed, STREAM_ADAPTER);
        model.adapters = (0..cfg.model.layers)
            .map(|_| AdapterParams::init(cfg.adapter.r, d, cfg.adapter.s, &mut rng))
            .collect::<spectral_peft::Result<_>>()?;
    }
    Ok(model)
}

/// Optimizes the mode's trainable set on the target task.
pub fn tune(cfg: &ExperimentConfig, base: &Checkpoint, data: &TaskData, sink: &mut MetricsSink) -> Result<TuneOutcome> {
    cfg.validate()?;
    let mut model = tuning_model(cfg, base, data.classes.len())?;
    let with_ctx = cfg.mode == TrainMode::Pcsa;
    let train = prepare_samples(&data.train, cfg, with_ctx)?;
    let test = prepare_samples(&data.test, cfg, with_ctx)?;
    let sched = Schedule {
        phase: "tune",
        mode: cfg.mode,
        optimizer: cfg.optim.optimizer,
        lr: cfg.optim.lr,
        weight_decay: cfg.optim.weight_decay,
        clip: cfg.optim.clip,
        epochs: cfg.optim.epochs,
        batch: cfg.optim.batch,
        seed: cfg.optim.seed,
    };
    if cfg.mode == TrainMode::LinearProbe {
        let train_f = FeatureSet::new(&train, &model)?;
        let test_f = FeatureSet::new(&test, &model)?;
        train_loop(&mut model, &train_f, &test_f, &sched, sink)?;
    } else {
        train_loop(&mut model, &SampleSet(&train), &SampleSet(&test), &sched, sink)?;
    }

    let mut delta = Checkpoint::default();
    delta.meta.insert("kind".into(), "delta".into());
    delta.meta.insert("mode".into(), cfg.mode.name().into());
    delta.meta.insert("classes".into(), data.classes.join(","));
    delta.meta.insert("base_sha256".into(), sha256_hex(&base.to_bytes()));
    for key in ADAPTER_KEYS {
        delta.meta.insert(key.into(), cfg.get(key)?);
    }
    model.visit(|name, m| {
        if cfg.mode.trains(name) {
            delta.insert(name, m, true);
        }
    });
    Ok(TuneOutcome { delta, model })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: Accuracy,
    pub loss: f64,
}

/// Rebuilds the tuned model from a base checkpoint and an optional delta.
///
/// The delta's adapter settings override `cfg`, so the spectral context matches training.
pub fn load_model(cfg: &ExperimentConfig, base: &Checkpoint, delta: Option<&Checkpoint>) -> Result<(ExperimentConfig, Model<f64>)> {
    let mut cfg = cfg.clone();
    let Some(delta) = delta else {
        let model = load_backbone(base, &cfg)?;
        return Ok((cfg, model));
    };
    if delta.meta("kind")? != "delta" {
        return Err(HarnessError::Config("expected a delta checkpoint".into()));
    }
    if delta.meta("base_sha256")? != sha256_hex(&base.to_bytes()) {
        return Err(HarnessError::Config("delta was tuned from a different base checkpoint".into()));
    }
    for key in ADAPTER_KEYS {
        cfg.set(key, delta.meta(key)?)?;
    }
    cfg.set("mode", delta.meta("mode")?)?;
    let classes = delta.meta("classes")?.split(',').count();
    let mut model = tuning_model(&cfg, base, classes)?;
    fill_model(&mut model, delta, true)?;
    Ok((cfg, model))
}

pub fn evaluate_clouds(cfg: &ExperimentConfig, model: &Model<f64>, clouds: &[PointCloud<f64>]) -> Result<EvalReport> {
    let samples = prepare_samples(clouds, cfg, model.has_adapters())?;
    let (accuracy, loss) = evaluate(&SampleSet(&samples), model)?;
    Ok(EvalReport { accuracy, loss })
}

/// Layer-0 global spectral coefficients of the adapter on one sample.
pub fn layer0_coefficients(model: &Model<f64>, sample: &Sample<f64>) -> Result<Matrix<f64>> {
    let ctx = sample
        .ctx
        .as_ref()
        .ok_or_else(|| HarnessError::Config("sample has no spectral context".into()))?;
    if !model.has_adapters() {
        return Err(HarnessError::Config("model has no adapters".into()));
    }
    let b = &model.backbone;
    let tokens = embed_patches(&sample.patches, &b.embed)?;
    let t0 = assemble_tokens(&b.cls, &tokens.values)?;
    let set = AdapterSet {
        params: &model.adapters,
        ctx,
    };
    let (_, traces) = encoder_forward_traced(&t0, b, Some(set))?;
    Ok(traces[0].adapter().expect("adapters present").global_coefficients().clone())
}

pub fn digest_matrix(m: &Matrix<f64>) -> String {
    let mut h = Sha256::new();
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

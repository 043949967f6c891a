//! Spectral and adapter invariant suite run on freshly sampled instances.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spectral_peft::adapter::{AdapterContext, AdapterParams, BasisKind};
use spectral_peft::backbone::{loss_and_grads, sample_logits, BackboneConfig, BackboneParams, Model, Sample, TrainMode};
use spectral_peft::graph::{graph_spectrum, GraphScope, SpectralBasis};
use spectral_peft::ordering::OrderingMethod;
use spectral_peft::pointcloud::{farthest_point_sampling, group_patches, PointCloud};
use spectral_peft::spectral::{gft, igft, total_variation, SpectralTokens};
use spectral_peft::Matrix;

use crate::error::{HarnessError, Result};
use crate::train::seeded;

pub const ORTHONORMALITY_TOL: f64 = 1e-8;
pub const ROUND_TRIP_TOL: f64 = 1e-10;
pub const PARSEVAL_TOL: f64 = 1e-10;
pub const TV_REL_TOL: f64 = 1e-8;
pub const NULL_SPACE_TOL: f64 = 1e-8;
pub const RESIDUAL_REL_TOL: f64 = 1e-8;
pub const ANALYTIC_TOL: f64 = 1e-12;
pub const ZERO_INIT_TOL: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the finite-difference relative error.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SelfcheckOptions {
    pub seed: u64,
    pub clouds: usize,
    pub sizes: Vec<usize>,
    pub zero_init_models: usize,
    pub grad_seeds: usize,
    pub inject_fault: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            clouds: 100,
            sizes: vec![8, 16, 32, 64],
            zero_init_models: 20,
            grad_seeds: 10,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} worst={:.3e} tol={:.0e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, value: f64, tolerance: f64, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            name,
            passed: value < tolerance,
            value,
            tolerance,
            detail: detail.into(),
        });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn column_norms(m: &Matrix<f64>) -> Vec<f64> {
    (0..m.cols())
        .map(|j| m.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[derive(Default)]
struct SpectralWorst {
    orthonormality: f64,
    round_trip: f64,
    parseval: f64,
    tv: f64,
    null_space: f64,
    residual: f64,
}

fn check_basis(points: &[[f64; 3]], rng: &mut ChaCha8Rng, w: &mut SpectralWorst) -> Result<()> {
    let n = points.len();
    let s = graph_spectrum(points, GraphScope::Global)?;
    let b = &s.basis;
    w.orthonormality = w.orthonormality.max(b.orthonormality_error());
    w.residual = w.residual.max(b.residual(&s.laplacian)? / s.laplacian.inf_norm());
    let x = random_matrix(n, 4, 2.0, rng);
    let coeffs = gft(&x, b)?;
    w.round_trip = w.round_trip.max(igft(&coeffs, b)?.max_abs_diff(&x));
    for (a, c) in column_norms(&x).iter().zip(column_norms(&coeffs.coefficients)) {
        w.parseval = w.parseval.max((a - c).abs());
    }
    let signal = x.column(0);
    let (spatial, spectral) = total_variation(&signal, &s.laplacian, b)?;
    w.tv = w.tv.max((spatial - spectral).abs() / spatial.abs().max(f64::MIN_POSITIVE));
    let c = 1.0 / (n as f64).sqrt();
    let kernel = (0..n).map(|i| (b.eigenvectors[(i, 0)] - c).abs()).fold(0.0, f64::max);
    w.null_space = w.null_space.max(b.eigenvalues[0].abs()).max(kernel);
    Ok(())
}

/// The two-node graph has L = [[1,-1],[-1,1]], spectrum {0, 2} and basis (r, r), (r, -r).
fn analytic_two_node() -> Result<f64> {
    let s = graph_spectrum(&[[0.0, 0.0, 0.0], [0.3, -1.2, 2.0]], GraphScope::Global)?;
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let want = Matrix::from_rows(&[[r, r], [r, -r]]);
    let lap = Matrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]);
    let mut err = s.basis.eigenvectors.max_abs_diff(&want).max(s.laplacian.max_abs_diff(&lap));
    err = err.max(s.basis.eigenvalues[0].abs()).max((s.basis.eigenvalues[1] - 2.0).abs());
    let x = Matrix::from_rows(&[[1.5], [-0.5]]);
    err = err.max(igft(&gft(&x, &s.basis)?, &s.basis)?.max_abs_diff(&x));
    Ok(err)
}

/// Flips the sign of one column in a copy of the basis; returns (orthonormality error, round-trip error)
/// when the forward transform uses the clean basis and the inverse the corrupted one.
pub fn fault_injection(points: &[[f64; 3]], column: usize) -> Result<(f64, f64)> {
    let clean = graph_spectrum(points, GraphScope::Global)?.basis;
    let mut bad: SpectralBasis<f64> = clean.clone();
    let col: Vec<f64> = bad.eigenvectors.column(column).iter().map(|v| -v).collect();
    bad.eigenvectors.set_column(column, &col);
    let x = Matrix::from_fn(points.len(), 2, |i, j| (i as f64 + 1.0) * if j == 0 { 1.0 } else { -0.5 });
    let coeffs: SpectralTokens<f64> = gft(&x, &clean)?;
    Ok((bad.orthonormality_error(), igft(&coeffs, &bad)?.max_abs_diff(&x)))
}

fn toy_sample(rng: &mut ChaCha8Rng, label: usize) -> Result<Sample<f64>> {
    let cloud = PointCloud::new(random_points(32, rng), Some(label), "toy")?;
    let kp = farthest_point_sampling(&cloud, 8, 0)?;
    let patches = group_patches(&cloud, &kp, 4)?;
    let ctx = AdapterContext::from_keypoints(&patches.keypoints, OrderingMethod::TransZOrder, 2, 0, BasisKind::Gft)?;
    Ok(Sample {
        patches,
        ctx: Some(ctx),
        label,
    })
}

fn toy_config() -> BackboneConfig {
    BackboneConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        embed_hidden: 6,
        ffn_ratio: 4,
        classes: 3,
    }
}

/// Backbone with every tensor randomized, adapters of rank 4 with nonzero weights.
pub fn random_toy_model(rng: &mut ChaCha8Rng) -> Result<Model<f64>> {
    let cfg = toy_config();
    let mut b = BackboneParams::init(&cfg, rng)?;
    b.embed.b1 = random_matrix(1, cfg.embed_hidden, 0.3, rng);
    b.embed.b2 = random_matrix(1, cfg.dim, 0.3, rng);
    b.head.b = random_matrix(1, cfg.classes, 0.3, rng);
    for l in &mut b.layers {
        l.ln1_g = Matrix::from_fn(1, cfg.dim, |_, _| 1.0 + rng.random_range(-0.3..0.3));
        l.ln2_g = Matrix::from_fn(1, cfg.dim, |_, _| 1.0 + rng.random_range(-0.3..0.3));
        for bias in [&mut l.ln1_b, &mut l.ln2_b, &mut l.bq, &mut l.bk, &mut l.bv, &mut l.bo, &mut l.fc1_b, &mut l.fc2_b] {
            *bias = random_matrix(1, bias.cols(), 0.2, rng);
        }
    }
    let adapters = (0..cfg.layers)
        .map(|_| AdapterParams {
            w_down: random_matrix(4, cfg.dim, 0.8, rng),
            lin_w: random_matrix(4, 4, 0.8, rng),
            lin_b: random_matrix(1, 4, 0.5, rng),
            w_up: random_matrix(cfg.dim, 4, 0.8, rng),
            scale: 0.7,
        })
        .collect();
    Ok(Model::new(b, adapters)?)
}

fn zero_init_gap(models: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..models {
        let mut rng = seeded(seed, 100 + i as u64);
        let mut model = random_toy_model(&mut rng)?;
        model.adapters = (0..model.backbone.layers.len())
            .map(|_| AdapterParams::init(4, 8, 1.0, &mut rng))
            .collect::<spectral_peft::Result<_>>()?;
        let s = toy_sample(&mut rng, i % 3)?;
        let frozen = Model::new(model.backbone.clone(), Vec::new())?;
        let a = sample_logits(&s, &model)?;
        let b = sample_logits(&s, &frozen)?;
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

fn fd_loss(batch: &[Sample<f64>], model: &Model<f64>, name: &str, idx: usize, h: f64) -> Result<f64> {
    let mut m = model.clone();
    m.visit_mut(|n, t| {
        if n == name {
            t.as_mut_slice()[idx] += h;
        }
    });
    Ok(loss_and_grads(batch, &m, TrainMode::LinearProbe)?.0)
}

/// Worst relative error between reverse-mode and central-difference gradients, and scalars checked.
pub fn gradient_check(seeds: usize, base_seed: u64, mode: TrainMode) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..seeds {
        let mut rng = seeded(base_seed, 1000 + i as u64);
        let model = random_toy_model(&mut rng)?;
        let batch = vec![toy_sample(&mut rng, i % 3)?];
        let (_, grads) = loss_and_grads(&batch, &model, mode)?;
        let expected = model.named_tensors().keys().filter(|n| mode.trains(n)).count();
        if grads.len() != expected || grads.keys().any(|n| !mode.trains(n)) {
            return Err(HarnessError::Check(format!("{mode}: gradient set does not match the trainable set")));
        }
        for (name, g) in &grads {
            for idx in 0..g.len() {
                let fd = (fd_loss(&batch, &model, name, idx, FD_STEP)? - fd_loss(&batch, &model, name, idx, -FD_STEP)?)
                    / (2.0 * FD_STEP);
                let a = g.as_slice()[idx];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR));
                checked += 1;
            }
        }
    }
    Ok((worst, checked))
}

/// Writes points, Laplacian and basis of one instance for inspection.
pub fn dump_spectral(dir: &Path, points: &[[f64; 3]]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let s = graph_spectrum(points, GraphScope::Global)?;
    let pts = Matrix::from_fn(points.len(), 3, |i, j| points[i][j]);
    let lam = Matrix::from_vec(1, s.basis.eigenvalues.len(), s.basis.eigenvalues.clone())?;
    for (name, m) in [
        ("points.txt", &pts),
        ("adjacency.txt", &s.graph.adjacency),
        ("laplacian.txt", &s.laplacian),
        ("eigenvalues.txt", &lam),
        ("eigenvectors.txt", &s.basis.eigenvectors),
    ] {
        let path = dir.join(name);
        let mut buf = Vec::new();
        m.write_text(&mut buf).expect("writing to memory");
        std::fs::write(&path, buf).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}

pub fn run_selfcheck(opts: &SelfcheckOptions, dump: Option<&Path>) -> Result<Report> {
    let mut report = Report::default();
    let mut w = SpectralWorst::default();
    let mut rng = seeded(opts.seed, 7);
    for i in 0..opts.clouds {
        let n = opts.sizes[i % opts.sizes.len()];
        let pts = random_points(n, &mut rng);
        if i == 0 {
            if let Some(dir) = dump {
                dump_spectral(dir, &pts)?;
            }
        }
        check_basis(&pts, &mut rng, &mut w)?;
    }
    let detail = format!("{} clouds, n in {:?}", opts.clouds, opts.sizes);
    report.push("orthonormality", w.orthonormality, ORTHONORMALITY_TOL, detail.clone());
    report.push("round_trip", w.round_trip, ROUND_TRIP_TOL, detail.clone());
    report.push("parseval", w.parseval, PARSEVAL_TOL, detail.clone());
    report.push("total_variation", w.tv, TV_REL_TOL, "relative".to_string());
    report.push("null_space", w.null_space, NULL_SPACE_TOL, "lambda_0 and constant kernel vector".to_string());
    report.push("eigen_residual", w.residual, RESIDUAL_REL_TOL, "relative to |L|_inf".to_string());
    report.push("two_node_analytic", analytic_two_node()?, ANALYTIC_TOL, "n=2");
    report.push(
        "zero_init",
        zero_init_gap(opts.zero_init_models, opts.seed)?,
        ZERO_INIT_TOL,
        format!("{} toy backbones", opts.zero_init_models),
    );
    for (name, mode) in [("gradients_pcsa", TrainMode::Pcsa), ("gradients_full", TrainMode::Full)] {
        let (worst, n) = gradient_check(opts.grad_seeds, opts.seed, mode)?;
        report.push(name, worst, FD_REL_TOL, format!("{n} scalars, {} seeds", opts.grad_seeds));
    }
    if opts.inject_fault {
        let pts = random_points(12, &mut rng);
        let (orth, trip) = fault_injection(&pts, 3)?;
        report.push("fault_orthonormality", orth, ORTHONORMALITY_TOL, "column 3 sign-flipped in the inverse basis");
        report.push("fault_round_trip", trip, ROUND_TRIP_TOL, "column 3 sign-flipped in the inverse basis");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_basis_keeps_orthogonality_but_breaks_round_trip() {
        let mut rng = seeded(5, 0);
        let pts = random_points(10, &mut rng);
        let (orth, trip) = fault_injection(&pts, 2).unwrap();
        assert!(orth < ORTHONORMALITY_TOL);
        assert!(trip > 1e-3);
    }

    #[test]
    fn two_node_instance_matches_closed_form() {
        assert!(analytic_two_node().unwrap() < ANALYTIC_TOL);
    }

    #[test]
    fn small_suite_passes() {
        let opts = SelfcheckOptions {
            clouds: 8,
            zero_init_models: 2,
            grad_seeds: 1,
            ..Default::default()
        };
        let r = run_selfcheck(&opts, None).unwrap();
        assert!(r.passed(), "{r}");
        let faulty = run_selfcheck(&SelfcheckOptions { inject_fault: true, ..opts }, None).unwrap();
        assert!(!faulty.passed());
        assert!(faulty.get("fault_orthonormality").unwrap().passed);
        assert!(!faulty.get("fault_round_trip").unwrap().passed);
    }
}

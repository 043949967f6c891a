//! Synthetic shape clouds: seeded surface sampling, rotation and noise.

use std::f64::consts::PI;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spectral_peft::PointCloud;

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    TwoSphere,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Sphere,
        Shape::Cube,
        Shape::Torus,
        Shape::Cylinder,
        Shape::Cone,
        Shape::TwoSphere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Torus => "torus",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
            Shape::TwoSphere => "two_sphere",
        }
    }

    /// One point on the noiseless, unrotated surface.
    pub fn sample_surface<R: Rng + ?Sized>(self, rng: &mut R) -> [f64; 3] {
        match self {
            Shape::Sphere => unit_vector(rng),
            Shape::Cube => {
                let face = rng.random_range(0..6usize);
                let (a, b) = (rng.random_range(-0.57..=0.57), rng.random_range(-0.57..=0.57));
                let side = if face % 2 == 0 { 0.57 } else { -0.57 };
                match face / 2 {
                    0 => [side, a, b],
                    1 => [a, side, b],
                    _ => [a, b, side],
                }
            }
            Shape::Torus => {
                let (big, small) = (0.7, 0.3);
                // rejection on the tube angle keeps the density uniform in area
                let phi = loop {
                    let phi = rng.random_range(0.0..2.0 * PI);
                    if rng.random_range(0.0..1.0) <= (big + small * phi.cos()) / (big + small) {
                        break phi;
                    }
                };
                let theta = rng.random_range(0.0..2.0 * PI);
                let rr = big + small * phi.cos();
                [rr * theta.cos(), rr * theta.sin(), small * phi.sin()]
            }
            Shape::Cylinder => {
                let (radius, half) = (0.6, 0.8);
                let side = 2.0 * PI * radius * 2.0 * half;
                let cap = PI * radius * radius;
                let u = rng.random_range(0.0..side + 2.0 * cap);
                if u < side {
                    let t = rng.random_range(0.0..2.0 * PI);
                    [radius * t.cos(), radius * t.sin(), rng.random_range(-half..=half)]
                } else {
                    let z = if u < side + cap { half } else { -half };
                    let [x, y] = disk(radius, rng);
                    [x, y, z]
                }
            }
            Shape::Cone => {
                let (radius, height) = (0.7, 1.4);
                let slant = f64::hypot(radius, height);
                let side = PI * radius * slant;
                let base = PI * radius * radius;
                if rng.random_range(0.0..side + base) < side {
                    // distance from the apex grows with the square root of a uniform draw
                    let f = rng.random_range(0.0f64..1.0).sqrt();
                    let t = rng.random_range(0.0..2.0 * PI);
                    [f * radius * t.cos(), f * radius * t.sin(), height / 2.0 - f * height]
                } else {
                    let [x, y] = disk(radius, rng);
                    [x, y, -height / 2.0]
                }
            }
            Shape::TwoSphere => {
                let c = if rng.random_bool(0.5) { 0.55 } else { -0.55 };
                let [x, y, z] = unit_vector(rng);
                [0.45 * x + c, 0.45 * y, 0.45 * z]
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown shape {s:?}")))
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn disk<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> [f64; 2] {
    let rr = radius * rng.random_range(0.0f64..1.0).sqrt();
    let t = rng.random_range(0.0..2.0 * PI);
    [rr * t.cos(), rr * t.sin()]
}

/// Uniformly random rotation from a normalized quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// A rotated, noisy sample of `shape` drawn from `rng`.
pub fn sample_shape<R: Rng + ?Sized>(shape: Shape, points: usize, noise: f64, rng: &mut R) -> Vec<[f64; 3]> {
    let rot = random_rotation(rng);
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("finite sigma"));
    (0..points)
        .map(|_| {
            let p = shape.sample_surface(rng);
            let mut out = [0.0; 3];
            for (i, o) in out.iter_mut().enumerate() {
                *o = rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2];
                if let Some(nd) = &normal {
                    *o += nd.sample(rng);
                }
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Source,
    Target,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Source => "source",
            Task::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub classes: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub points: usize,
    pub noise: f64,
    pub source: TaskManifest,
    pub target: TaskManifest,
    /// Resolved experiment config that produced the files.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn task(&self, task: Task) -> &TaskManifest {
        match task {
            Task::Source => &self.source,
            Task::Target => &self.target,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn sample_id(shape: &str, split: Split, index: usize) -> String {
    format!("{shape}_{}_{index:04}", split.name())
}

pub fn sample_path(dir: &Path, task: Task, split: Split, id: &str) -> PathBuf {
    dir.join(task.name()).join(split.name()).join(format!("{id}.xyz"))
}

/// Generates one task split in memory; each sample uses its own ChaCha stream.
pub fn generate_split(cfg: &DatasetConfig, task: Task, split: Split) -> Result<Vec<PointCloud<f64>>> {
    let classes = match task {
        Task::Source => &cfg.source,
        Task::Target => &cfg.target,
    };
    let per_class = match split {
        Split::Train => cfg.train_per_class,
        Split::Test => cfg.test_per_class,
    };
    let shapes = classes.iter().map(|c| c.parse()).collect::<Result<Vec<Shape>>>()?;
    let jobs: Vec<(usize, usize)> = (0..shapes.len()).flat_map(|c| (0..per_class).map(move |i| (c, i))).collect();
    jobs.par_iter()
        .map(|&(c, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let task_bit = matches!(task, Task::Target) as u64;
            let split_bit = matches!(split, Split::Test) as u64;
            rng.set_stream((task_bit << 62) | (split_bit << 61) | ((c as u64) << 32) | i as u64);
            let pts = sample_shape(shapes[c], cfg.points, cfg.noise, &mut rng);
            Ok(PointCloud::new(pts, Some(c), sample_id(shapes[c].name(), split, i))?)
        })
        .collect()
}

/// Writes every split plus `manifest.json` under `dir`.
pub fn gen_synthetic(full: &ExperimentConfig, dir: &Path) -> Result<DatasetManifest> {
    let cfg = &full.dataset;
    for task in [Task::Source, Task::Target] {
        for split in [Split::Train, Split::Test] {
            let clouds = generate_split(cfg, task, split)?;
            let sub = dir.join(task.name()).join(split.name());
            std::fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
            for c in &clouds {
                let path = sample_path(dir, task, split, &c.id);
                std::fs::write(&path, c.to_text()).map_err(|e| HarnessError::io(&path, e))?;
            }
        }
    }
    let task = |classes: &[String]| TaskManifest {
        classes: classes.to_vec(),
        train_per_class: cfg.train_per_class,
        test_per_class: cfg.test_per_class,
    };
    let manifest = DatasetManifest {
        format: "xyz-v1".into(),
        seed: cfg.seed,
        points: cfg.points,
        noise: cfg.noise,
        source: task(&cfg.source),
        target: task(&cfg.target),
        config: full.pairs().into_iter().collect(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(manifest)
}

/// Loads one split in class-major order.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, task: Task, split: Split) -> Result<Vec<PointCloud<f64>>> {
    let tm = manifest.task(task);
    let per_class = match split {
        Split::Train => tm.train_per_class,
        Split::Test => tm.test_per_class,
    };
    let mut out = Vec::with_capacity(tm.classes.len() * per_class);
    for (c, name) in tm.classes.iter().enumerate() {
        for i in 0..per_class {
            let id = sample_id(name, split, i);
            let path = sample_path(dir, task, split, &id);
            let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            let cloud = PointCloud::parse(&text, id)?;
            if cloud.label != Some(c) {
                return Err(HarnessError::Core(spectral_peft::Error::Data(format!(
                    "{}: label {:?}, expected {c}",
                    path.display(),
                    cloud.label
                ))));
            }
            out.push(cloud);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_sphere_lies_on_the_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in sample_shape(Shape::Sphere, 500, 0.0, &mut rng) {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotations_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shapes_stay_near_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in Shape::ALL {
            for _ in 0..200 {
                let p = s.sample_surface(&mut rng);
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!(r <= 1.01, "{s}: {r}");
            }
        }
    }

    #[test]
    fn unknown_shape_is_config_error() {
        assert!(matches!("pyramid".parse::<Shape>(), Err(HarnessError::Config(_))));
    }
}

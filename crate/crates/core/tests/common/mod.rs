#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectral_peft::adapter::{AdapterContext, AdapterParams, BasisKind};
use spectral_peft::backbone::{BackboneConfig, BackboneParams, Model, Sample};
use spectral_peft::linalg::Matrix;
use spectral_peft::ordering::OrderingMethod;
use spectral_peft::pointcloud::{farthest_point_sampling, group_patches, PointCloud};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

/// Adapter with every tensor nonzero, so all gradient paths are exercised.
pub fn random_adapter(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> AdapterParams<f64> {
    AdapterParams {
        w_down: random_matrix(r, c, 0.8, rng),
        lin_w: random_matrix(r, r, 0.8, rng),
        lin_b: random_matrix(1, r, 0.5, rng),
        w_up: random_matrix(c, r, 0.8, rng),
        scale,
    }
}

pub fn sample(cloud_size: usize, n: usize, g: usize, k: usize, label: usize, rng: &mut ChaCha8Rng) -> Sample<f64> {
    let cloud = PointCloud::new(random_points(cloud_size, rng), Some(label), "s").unwrap();
    let kp = farthest_point_sampling(&cloud, n, 0).unwrap();
    let patches = group_patches(&cloud, &kp, g).unwrap();
    let ctx = AdapterContext::from_keypoints(&patches.keypoints, OrderingMethod::TransZOrder, k, 0, BasisKind::Gft).unwrap();
    Sample {
        patches,
        ctx: Some(ctx),
        label,
    }
}

pub fn toy_config(d: usize, layers: usize, heads: usize, classes: usize) -> BackboneConfig {
    BackboneConfig {
        dim: d,
        layers,
        heads,
        embed_hidden: 6,
        ffn_ratio: 4,
        classes,
    }
}

/// Backbone with randomized LayerNorm affine terms and biases as well as weights.
pub fn random_model(cfg: &BackboneConfig, r: usize, rng: &mut ChaCha8Rng) -> Model<f64> {
    let mut b = BackboneParams::init(cfg, rng).unwrap();
    b.embed.b1 = random_matrix(1, cfg.embed_hidden, 0.3, rng);
    b.embed.b2 = random_matrix(1, cfg.dim, 0.3, rng);
    b.head.b = random_matrix(1, cfg.classes, 0.3, rng);
    for l in &mut b.layers {
        let d = cfg.dim;
        l.ln1_g = Matrix::from_fn(1, d, |_, _| 1.0 + rng.random_range(-0.3..0.3));
        l.ln2_g = Matrix::from_fn(1, d, |_, _| 1.0 + rng.random_range(-0.3..0.3));
        for bias in [&mut l.ln1_b, &mut l.ln2_b, &mut l.bq, &mut l.bk, &mut l.bv, &mut l.bo, &mut l.fc1_b, &mut l.fc2_b] {
            *bias = random_matrix(1, bias.cols(), 0.2, rng);
        }
    }
    let adapters = (0..cfg.layers).map(|_| random_adapter(r, cfg.dim, 0.7, rng)).collect();
    Model::new(b, adapters).unwrap()
}

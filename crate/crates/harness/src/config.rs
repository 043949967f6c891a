//! Experiment configuration and its plain-text `key = value` format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Lists are comma-separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use spectral_peft::{BasisKind, OrderingMethod, TrainMode};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    AdamW,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::AdamW => "adamw",
        }
    }
}

impl FromStr for Optimizer {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adamw" => Ok(Optimizer::AdamW),
            _ => Err(HarnessError::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// key points (tokens) per cloud
    pub n: usize,
    /// points per patch
    pub g: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub r: usize,
    pub s: f64,
    pub k: usize,
    pub ordering: OrderingMethod,
    pub basis: BasisKind,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub clip: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub optim: OptimConfig,
    pub pretrain: PretrainConfig,
    pub mode: TrainMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                source: vec!["sphere".into(), "cube".into(), "torus".into()],
                target: vec!["cylinder".into(), "cone".into(), "two_sphere".into()],
                train_per_class: 200,
                test_per_class: 100,
                points: 256,
                noise: 0.02,
                seed: 0,
            },
            model: ModelConfig {
                n: 32,
                g: 16,
                d: 32,
                layers: 2,
                heads: 1,
                embed_hidden: 32,
            },
            adapter: AdapterConfig {
                r: 8,
                s: 1.0,
                k: 4,
                ordering: OrderingMethod::TransZOrder,
                basis: BasisKind::Gft,
                bits: spectral_peft::ordering::DEFAULT_BITS,
            },
            optim: OptimConfig {
                optimizer: Optimizer::Sgd,
                lr: 0.05,
                weight_decay: 0.0,
                clip: 1.0,
                epochs: 50,
                batch: 32,
                seed: 0,
            },
            pretrain: PretrainConfig { lr: 0.05, epochs: 30 },
            mode: TrainMode::Pcsa,
        }
    }
}

/// Every accepted key, in canonical output order.
pub const KEYS: &[&str] = &[
    "dataset.source",
    "dataset.target",
    "dataset.train_per_class",
    "dataset.test_per_class",
    "dataset.points",
    "dataset.noise",
    "dataset.seed",
    "model.n",
    "model.g",
    "model.d",
    "model.layers",
    "model.heads",
    "model.embed_hidden",
    "adapter.r",
    "adapter.s",
    "adapter.k",
    "adapter.ordering",
    "adapter.basis",
    "adapter.bits",
    "optim.optimizer",
    "optim.lr",
    "optim.weight_decay",
    "optim.clip",
    "optim.epochs",
    "optim.batch",
    "optim.seed",
    "pretrain.lr",
    "pretrain.epochs",
    "mode",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl ExperimentConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset.source" => self.dataset.source = parse_list(v),
            "dataset.target" => self.dataset.target = parse_list(v),
            "dataset.train_per_class" => self.dataset.train_per_class = parse_num(key, v)?,
            "dataset.test_per_class" => self.dataset.test_per_class = parse_num(key, v)?,
            "dataset.points" => self.dataset.points = parse_num(key, v)?,
            "dataset.noise" => self.dataset.noise = parse_num(key, v)?,
            "dataset.seed" => self.dataset.seed = parse_num(key, v)?,
            "model.n" => self.model.n = parse_num(key, v)?,
            "model.g" => self.model.g = parse_num(key, v)?,
            "model.d" => self.model.d = parse_num(key, v)?,
            "model.layers" => self.model.layers = parse_num(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.embed_hidden" => self.model.embed_hidden = parse_num(key, v)?,
            "adapter.r" => self.adapter.r = parse_num(key, v)?,
            "adapter.s" => self.adapter.s = parse_num(key, v)?,
            "adapter.k" => self.adapter.k = parse_num(key, v)?,
            "adapter.ordering" => self.adapter.ordering = v.parse()?,
            "adapter.basis" => self.adapter.basis = v.parse()?,
            "adapter.bits" => self.adapter.bits = parse_num(key, v)?,
            "optim.optimizer" => self.optim.optimizer = v.parse()?,
            "optim.lr" => self.optim.lr = parse_num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "optim.clip" => self.optim.clip = parse_num(key, v)?,
            "optim.epochs" => self.optim.epochs = parse_num(key, v)?,
            "optim.batch" => self.optim.batch = parse_num(key, v)?,
            "optim.seed" => self.optim.seed = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_num(key, v)?,
            "mode" => self.mode = v.parse()?,
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "dataset.source" => self.dataset.source.join(","),
            "dataset.target" => self.dataset.target.join(","),
            "dataset.train_per_class" => self.dataset.train_per_class.to_string(),
            "dataset.test_per_class" => self.dataset.test_per_class.to_string(),
            "dataset.points" => self.dataset.points.to_string(),
            "dataset.noise" => self.dataset.noise.to_string(),
            "dataset.seed" => self.dataset.seed.to_string(),
            "model.n" => self.model.n.to_string(),
            "model.g" => self.model.g.to_string(),
            "model.d" => self.model.d.to_string(),
            "model.layers" => self.model.layers.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.embed_hidden" => self.model.embed_hidden.to_string(),
            "adapter.r" => self.adapter.r.to_string(),
            "adapter.s" => self.adapter.s.to_string(),
            "adapter.k" => self.adapter.k.to_string(),
            "adapter.ordering" => self.adapter.ordering.to_string(),
            "adapter.basis" => self.adapter.basis.to_string(),
            "adapter.bits" => self.adapter.bits.to_string(),
            "optim.optimizer" => self.optim.optimizer.name().to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.clip" => self.optim.clip.to_string(),
            "optim.epochs" => self.optim.epochs.to_string(),
            "optim.batch" => self.optim.batch.to_string(),
            "optim.seed" => self.optim.seed.to_string(),
            "pretrain.lr" => self.pretrain.lr.to_string(),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "mode" => self.mode.to_string(),
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Applies a `key = value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or the `config` object of a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::default();
        if path.extension().is_some_and(|e| e == "json") {
            let doc: serde_json::Value = serde_json::from_str(&text)?;
            let map = doc
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| HarnessError::Config(format!("{}: no config object", path.display())))?;
            for (k, v) in map {
                let v = v
                    .as_str()
                    .ok_or_else(|| HarnessError::Config(format!("{k}: manifest values must be strings")))?;
                cfg.set(k, v)?;
            }
        } else {
            cfg.apply_text(&text)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let d = &self.dataset;
        let m = &self.model;
        let a = &self.adapter;
        let o = &self.optim;
        let positive = [
            ("dataset.train_per_class", d.train_per_class),
            ("dataset.test_per_class", d.test_per_class),
            ("dataset.points", d.points),
            ("model.n", m.n),
            ("model.g", m.g),
            ("model.d", m.d),
            ("model.layers", m.layers),
            ("model.heads", m.heads),
            ("model.embed_hidden", m.embed_hidden),
            ("adapter.r", a.r),
            ("adapter.k", a.k),
            ("optim.batch", o.batch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be positive"));
        }
        if d.source.len() < 2 || d.target.len() < 2 {
            return bad("need at least two source and two target shapes".into());
        }
        for s in d.source.iter().chain(&d.target) {
            crate::dataset::Shape::from_str(s)?;
        }
        if d.source.iter().any(|s| d.target.contains(s)) {
            return bad("source and target shapes must be disjoint".into());
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return bad(format!("dataset.noise must be finite and non-negative, got {}", d.noise));
        }
        if m.n > d.points || m.g > d.points {
            return bad(format!("model.n={} and model.g={} must not exceed dataset.points={}", m.n, m.g, d.points));
        }
        if m.n < 2 {
            return bad("model.n must be at least 2".into());
        }
        if !m.n.is_multiple_of(a.k) {
            return bad(format!("adapter.k={} must divide model.n={}", a.k, m.n));
        }
        if m.n / a.k < 2 {
            return bad(format!("groups of n/k={} key points are too small for a graph", m.n / a.k));
        }
        if a.r >= m.d {
            return bad(format!("adapter.r={} must be smaller than model.d={}", a.r, m.d));
        }
        if !m.d.is_multiple_of(m.heads) {
            return bad(format!("model.heads={} must divide model.d={}", m.heads, m.d));
        }
        if !(a.s.is_finite()) {
            return bad("adapter.s must be finite".into());
        }
        if a.bits == 0 || a.bits > spectral_peft::ordering::MAX_BITS {
            return bad(format!("adapter.bits must be in 1..={}", spectral_peft::ordering::MAX_BITS));
        }
        for (k, lr) in [("optim.lr", o.lr), ("pretrain.lr", self.pretrain.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{k} must be positive"));
            }
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad("optim.weight_decay must be non-negative".into());
        }
        if !(o.clip >= 0.0 && o.clip.is_finite()) {
            return bad("optim.clip must be non-negative".into());
        }
        Ok(())
    }

    pub fn backbone_config(&self, classes: usize) -> spectral_peft::BackboneConfig {
        spectral_peft::BackboneConfig {
            dim: self.model.d,
            layers: self.model.layers,
            heads: self.model.heads,
            embed_hidden: self.model.embed_hidden,
            ffn_ratio: 4,
            classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn text_overrides_defaults() {
        let cfg = ExperimentConfig::from_text("# toy\nadapter.s = 0.1\nadapter.ordering=hilbert\n\nmode = linear_probe # probe").unwrap();
        assert_eq!(cfg.adapter.s, 0.1);
        assert_eq!(cfg.adapter.ordering, OrderingMethod::Hilbert);
        assert_eq!(cfg.mode, TrainMode::LinearProbe);
    }

    #[test]
    fn invariants_are_enforced() {
        for text in ["adapter.k = 5", "adapter.r = 32", "model.n = 0", "adapter.k = 32", "dataset.target = sphere,cone"] {
            assert!(matches!(ExperimentConfig::from_text(text), Err(HarnessError::Config(_))), "{text}");
        }
    }

    #[test]
    fn unknown_keys_and_values_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_text("adapter.q = 1"), Err(HarnessError::Config(_))));
        assert!(matches!(ExperimentConfig::from_text("adapter.basis = fft"), Err(HarnessError::Config(_))));
        assert!(matches!(ExperimentConfig::from_text("dataset.source = sphere,blob"), Err(HarnessError::Config(_))));
        assert!(matches!(ExperimentConfig::from_text("model.d"), Err(HarnessError::Config(_))));
    }
}

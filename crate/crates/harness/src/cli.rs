//! Command-line front end. Flags override the config file, which overrides defaults.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::ablate::{run_ablation, table, Sweep};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{gen_synthetic, load_split, DatasetManifest, Split, Task};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsSink;
use crate::selfcheck::{run_selfcheck, SelfcheckOptions};
use crate::train::{digest_matrix, evaluate_clouds, layer0_coefficients, load_model, prepare_samples, pretrain, tune, TaskData};

#[derive(Debug, Parser)]
#[command(name = "spectral-peft", version, about = "Graph spectral adapters on synthetic point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct Overrides {
    /// Key/value config file, or a run manifest (.json) to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub adapter_r: Option<usize>,
    #[arg(long, global = true)]
    pub adapter_s: Option<f64>,
    #[arg(long, global = true)]
    pub groups_k: Option<usize>,
    /// random | knn | z_order | trans_z_order | hilbert
    #[arg(long, global = true)]
    pub ordering: Option<String>,
    /// gft | dct
    #[arg(long, global = true)]
    pub basis: Option<String>,
    /// full | linear_probe | pcsa
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Dataset seed for gen-data, optimizer seed otherwise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Pretraining epochs for pretrain, tuning epochs otherwise.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Source,
    Target,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic source and target datasets.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train the backbone on the source task and save it frozen.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Tune the mode's trainable set on the target task.
    Tune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write layer-0 spectral coefficients of the first test sample here.
        #[arg(long)]
        dump_spectral: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Evaluate a base checkpoint, optionally with a tuned delta.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        delta: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Defaults to target with a delta, source without.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Tune once per cell of a parameter grid and tabulate the results.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// KEY=V1,V2,...; repeat for a product grid.
        #[arg(long = "sweep")]
        sweeps: Vec<String>,
        /// Named grid: s, k, r, ordering, basis.
        #[arg(long)]
        preset: Vec<String>,
        #[arg(long)]
        dump_spectral: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Run the spectral and gradient invariant suite.
    Selfcheck {
        #[arg(long, default_value_t = 100)]
        clouds: usize,
        #[arg(long, default_value_t = 10)]
        grad_seeds: usize,
        /// Corrupt one basis column to show the suite catching it.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        dump_spectral: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SeedTarget {
    Dataset,
    Optim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EpochTarget {
    Pretrain,
    Tune,
}

impl Overrides {
    fn resolve(&self, seed: SeedTarget, epochs: EpochTarget) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(v) = self.adapter_r {
            set("adapter.r", v.to_string())?;
        }
        if let Some(v) = self.adapter_s {
            set("adapter.s", v.to_string())?;
        }
        if let Some(v) = self.groups_k {
            set("adapter.k", v.to_string())?;
        }
        if let Some(v) = &self.ordering {
            set("adapter.ordering", v.clone())?;
        }
        if let Some(v) = &self.basis {
            set("adapter.basis", v.clone())?;
        }
        if let Some(v) = &self.mode {
            set("mode", v.clone())?;
        }
        if let Some(v) = self.seed {
            let key = match seed {
                SeedTarget::Dataset => "dataset.seed",
                SeedTarget::Optim => "optim.seed",
            };
            set(key, v.to_string())?;
        }
        if let Some(v) = self.epochs {
            let key = match epochs {
                EpochTarget::Pretrain => "pretrain.epochs",
                EpochTarget::Tune => "optim.epochs",
            };
            set(key, v.to_string())?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
            set(k.trim(), v.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Wall-clock goes to its own file so that `metrics.jsonl` stays reproducible byte for byte.
fn write_timing(dir: &Path, phase: &str, started: Instant) -> Result<()> {
    let path = dir.join("timing.jsonl");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| HarnessError::io(&path, e))?;
    let line = json!({"phase": phase, "wall_clock_s": started.elapsed().as_secs_f64()}).to_string();
    writeln!(f, "{line}").map_err(|e| HarnessError::io(&path, e))
}

fn config_object(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    cfg.pairs().into_iter().collect()
}

fn run_manifest(command: &str, cfg: &ExperimentConfig, inputs: serde_json::Value, sink: &MetricsSink) -> serde_json::Value {
    let last = sink.last();
    json!({
        "command": command,
        "config": config_object(cfg),
        "seeds": {"dataset": cfg.dataset.seed, "optim": cfg.optim.seed},
        "inputs": inputs,
        "outputs": {"metrics": "metrics.jsonl", "timing": "timing.jsonl"},
        "trainable_params": last.map(|r| r.trainable_params),
        "total_params": last.map(|r| r.total_params),
        "trainable_ratio": last.map(|r| r.trainable_ratio),
        "final": last,
    })
}

fn dump_coefficients(dir: &Path, cfg: &ExperimentConfig, model: &spectral_peft::Model<f64>, data: &TaskData) -> Result<String> {
    create_dir(dir)?;
    let sample = prepare_samples(&data.test[..1], cfg, true)?;
    let coeffs = layer0_coefficients(model, &sample[0])?;
    let mut buf = Vec::new();
    coeffs.write_text(&mut buf).expect("writing to memory");
    let path = dir.join("layer0_global_coefficients.txt");
    std::fs::write(&path, buf).map_err(|e| HarnessError::io(&path, e))?;
    Ok(digest_matrix(&coeffs))
}

/// Sweeps recorded in an ablation manifest, so that replaying it needs no extra flags.
fn manifest_sweeps(path: &Path) -> Result<Vec<Sweep>> {
    if path.extension().and_then(|e| e.to_str()) != Some("json") {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let Some(list) = value.get("sweeps").and_then(|s| s.as_array()) else {
        return Ok(Vec::new());
    };
    list.iter()
        .map(|s| {
            let key = s["key"].as_str().unwrap_or_default();
            let values: Vec<&str> = s["values"].as_array().into_iter().flatten().filter_map(|v| v.as_str()).collect();
            Sweep::parse(&format!("{key}={}", values.join(",")))
        })
        .collect()
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { out, o } => {
            let cfg = o.resolve(SeedTarget::Dataset, EpochTarget::Tune)?;
            create_dir(&out)?;
            let m = gen_synthetic(&cfg, &out)?;
            println!(
                "wrote {} source and {} target classes to {}",
                m.source.classes.len(),
                m.target.classes.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Pretrain { data, out, o } => {
            let cfg = o.resolve(SeedTarget::Optim, EpochTarget::Pretrain)?;
            create_dir(&out)?;
            let started = Instant::now();
            let task = TaskData::load(&data, Task::Source)?;
            let mut sink = MetricsSink::create(&out.join("metrics.jsonl"))?;
            let (ck, _) = pretrain(&cfg, &task, &mut sink)?;
            ck.save(&out.join("backbone.ckpt"))?;
            let inputs = json!({"data": data.display().to_string()});
            write_json(&out.join("manifest.json"), &run_manifest("pretrain", &cfg, inputs, &sink))?;
            write_timing(&out, "pretrain", started)?;
            if let Some(r) = sink.last() {
                println!("pretrain: train_acc={} test_acc={}", r.train_acc_exact, r.test_acc_exact);
            }
            Ok(0)
        }
        Command::Tune {
            data,
            checkpoint,
            out,
            dump_spectral,
            o,
        } => {
            let cfg = o.resolve(SeedTarget::Optim, EpochTarget::Tune)?;
            create_dir(&out)?;
            let started = Instant::now();
            let base = Checkpoint::load(&checkpoint)?;
            let task = TaskData::load(&data, Task::Target)?;
            let mut sink = MetricsSink::create(&out.join("metrics.jsonl"))?;
            let outcome = tune(&cfg, &base, &task, &mut sink)?;
            outcome.delta.save(&out.join("delta.ckpt"))?;
            let inputs = json!({"data": data.display().to_string(), "checkpoint": checkpoint.display().to_string()});
            write_json(&out.join("manifest.json"), &run_manifest("tune", &cfg, inputs, &sink))?;
            if let Some(dir) = dump_spectral {
                dump_coefficients(&dir, &cfg, &outcome.model, &task)?;
            }
            write_timing(&out, "tune", started)?;
            if let Some(r) = sink.last() {
                println!(
                    "tune[{}]: test_acc={} trainable={}/{} ({:.4})",
                    r.mode, r.test_acc_exact, r.trainable_params, r.total_params, r.trainable_ratio
                );
            }
            Ok(0)
        }
        Command::Eval {
            data,
            checkpoint,
            delta,
            split,
            task,
            o,
        } => {
            let cfg = o.resolve(SeedTarget::Optim, EpochTarget::Tune)?;
            let base = Checkpoint::load(&checkpoint)?;
            let delta = delta.map(|p| Checkpoint::load(&p)).transpose()?;
            let (cfg, model) = load_model(&cfg, &base, delta.as_ref())?;
            let task = match task {
                Some(TaskArg::Source) => Task::Source,
                Some(TaskArg::Target) => Task::Target,
                None if delta.is_some() => Task::Target,
                None => Task::Source,
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let manifest = DatasetManifest::load(&data)?;
            let classes = manifest.task(task).classes.len();
            if classes != model.backbone.head.classes() {
                return Err(HarnessError::Config(format!(
                    "{} task has {classes} classes, checkpoint head has {}",
                    task.name(),
                    model.backbone.head.classes()
                )));
            }
            let clouds = load_split(&data, &manifest, task, split)?;
            let r = evaluate_clouds(&cfg, &model, &clouds)?;
            let line = json!({
                "task": task.name(),
                "split": split.name(),
                "mode": cfg.mode.name(),
                "accuracy": r.accuracy.value(),
                "accuracy_exact": r.accuracy.ratio().to_string(),
                "loss": r.loss,
            });
            println!("{line}");
            Ok(0)
        }
        Command::Ablate {
            data,
            checkpoint,
            out,
            sweeps,
            preset,
            dump_spectral,
            o,
        } => {
            let cfg = o.resolve(SeedTarget::Optim, EpochTarget::Tune)?;
            let mut grid = sweeps.iter().map(|s| Sweep::parse(s)).collect::<Result<Vec<_>>>()?;
            for p in &preset {
                grid.push(Sweep::preset(p, &cfg)?);
            }
            if grid.is_empty() {
                if let Some(path) = &o.config {
                    grid = manifest_sweeps(path)?;
                }
            }
            if grid.is_empty() {
                return Err(HarnessError::Config("ablate needs at least one --sweep or --preset".into()));
            }
            create_dir(&out)?;
            let started = Instant::now();
            let base = Checkpoint::load(&checkpoint)?;
            let task = TaskData::load(&data, Task::Target)?;
            let rows = run_ablation(&cfg, &base, &task, &grid, Some(&out))?;
            let path = out.join("ablation.tsv");
            std::fs::write(&path, table(&rows)).map_err(|e| HarnessError::io(&path, e))?;
            let manifest = json!({
                "command": "ablate",
                "config": config_object(&cfg),
                "seeds": {"dataset": cfg.dataset.seed, "optim": cfg.optim.seed},
                "inputs": {"data": data.display().to_string(), "checkpoint": checkpoint.display().to_string()},
                "sweeps": grid.iter().map(|s| json!({"key": s.key, "values": s.values})).collect::<Vec<_>>(),
                "cells": rows.len(),
                "outputs": {"table": "ablation.tsv", "cells": "cells/"},
            });
            write_json(&out.join("manifest.json"), &manifest)?;
            if let Some(dir) = dump_spectral {
                for r in &rows {
                    if r.config.mode == spectral_peft::TrainMode::Pcsa {
                        let model = crate::train::tuning_model(&r.config, &base, task.classes.len())?;
                        dump_coefficients(&dir.join(format!("{:03}", r.cell)), &r.config, &model, &task)?;
                    }
                }
            }
            write_timing(&out, "ablate", started)?;
            print!("{}", table(&rows));
            Ok(0)
        }
        Command::Selfcheck {
            clouds,
            grad_seeds,
            inject_fault,
            dump_spectral,
            o,
        } => {
            let cfg = o.resolve(SeedTarget::Optim, EpochTarget::Tune)?;
            let opts = SelfcheckOptions {
                seed: cfg.optim.seed,
                clouds,
                grad_seeds,
                inject_fault,
                ..Default::default()
            };
            let report = run_selfcheck(&opts, dump_spectral.as_deref())?;
            print!("{report}");
            Ok(if report.passed() { 0 } else { 1 })
        }
    }
}

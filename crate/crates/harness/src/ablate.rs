//! Grid sweeps over experiment keys, one tuning run and one table row per cell.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricsRecord, MetricsSink};
use crate::train::{digest_matrix, layer0_coefficients, prepare_samples, tune, tuning_model, TaskData};

/// Scale grid of the reference ablation.
pub const S_GRID: [f64; 6] = [0.01, 0.1, 1.0, 2.0, 5.0, 10.0];
/// Group counts before filtering by the token count.
pub const K_GRID: [usize; 4] = [1, 2, 4, 8];
/// Adapter ranks of the reference ablation at 384 channels.
pub const R_GRID_384: [usize; 6] = [12, 24, 36, 48, 72, 96];

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

impl Sweep {
    /// Parses `key=v1,v2,...`; the key must be a known config key.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("sweep {spec:?}: expected key=v1,v2,...")))?;
        let key = key.trim().to_string();
        ExperimentConfig::default().get(&key)?;
        let values: Vec<String> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect();
        if values.is_empty() {
            return Err(HarnessError::Config(format!("sweep over {key} has no values")));
        }
        Ok(Self { key, values })
    }

    /// Named grids scaled to `cfg`: `s`, `k`, `r`, `ordering`, `basis`.
    pub fn preset(name: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let (key, values): (&str, Vec<String>) = match name {
            "s" => ("adapter.s", S_GRID.iter().map(|v| v.to_string()).collect()),
            "k" => (
                "adapter.k",
                K_GRID
                    .iter()
                    .filter(|&&k| cfg.model.n.is_multiple_of(k) && cfg.model.n / k >= 2)
                    .map(|k| k.to_string())
                    .collect(),
            ),
            "r" => {
                let mut rs: Vec<usize> = R_GRID_384
                    .iter()
                    .map(|&r| ((r * cfg.model.d) as f64 / 384.0).round().max(1.0) as usize)
                    .filter(|&r| r < cfg.model.d)
                    .collect();
                rs.dedup();
                ("adapter.r", rs.iter().map(|r| r.to_string()).collect())
            }
            "ordering" => (
                "adapter.ordering",
                spectral_peft::OrderingMethod::ALL.iter().map(|m| m.to_string()).collect(),
            ),
            "basis" => ("adapter.basis", vec!["gft".into(), "dct".into()]),
            _ => return Err(HarnessError::Config(format!("unknown sweep preset {name:?}"))),
        };
        Ok(Self {
            key: key.into(),
            values,
        })
    }
}

/// Cartesian product; the first sweep varies slowest.
pub fn grid(sweeps: &[Sweep]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for s in sweeps {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                s.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((s.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: usize,
    pub assignments: Vec<(String, String)>,
    pub config: ExperimentConfig,
    pub last: MetricsRecord,
    /// SHA-256 of the layer-0 global coefficients on the first test sample at initialization.
    pub coeff_digest: Option<String>,
}

/// Runs `tune` for each grid cell. Per-cell metrics go to `out/cells/<i>/metrics.jsonl`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    base: &Checkpoint,
    data: &TaskData,
    sweeps: &[Sweep],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let cells = grid(sweeps);
    let mut configs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut c = cfg.clone();
        for (k, v) in cell {
            c.set(k, v)?;
        }
        c.validate()?;
        configs.push(c);
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (i, (cell, c)) in cells.into_iter().zip(configs).enumerate() {
        let mut sink = match out {
            Some(dir) => {
                let sub = dir.join("cells").join(format!("{i:03}"));
                std::fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
                std::fs::write(sub.join("config.txt"), c.to_text()).map_err(|e| HarnessError::io(&sub, e))?;
                MetricsSink::create(&sub.join("metrics.jsonl"))?
            }
            None => MetricsSink::memory(),
        };
        let coeff_digest = if c.mode == spectral_peft::TrainMode::Pcsa {
            let model = tuning_model(&c, base, data.classes.len())?;
            let first = prepare_samples(&data.test[..1], &c, true)?;
            Some(digest_matrix(&layer0_coefficients(&model, &first[0])?))
        } else {
            None
        };
        tune(&c, base, data, &mut sink)?;
        let last = sink.last().expect("epoch 0 is always recorded").clone();
        rows.push(AblationRow {
            cell: i,
            assignments: cell,
            config: c,
            last,
            coeff_digest,
        });
    }
    Ok(rows)
}

/// Tab-separated table with one row per cell.
pub fn table(rows: &[AblationRow]) -> String {
    let mut out = String::from("cell");
    if let Some(r) = rows.first() {
        for (k, _) in &r.assignments {
            let _ = write!(out, "\t{k}");
        }
    }
    out.push_str("\tmode\tepochs\tfinal_loss\ttrain_acc\ttest_acc\ttrainable_params\ttrainable_ratio\tcoeff_sha256\n");
    for r in rows {
        let _ = write!(out, "{}", r.cell);
        for (_, v) in &r.assignments {
            let _ = write!(out, "\t{v}");
        }
        let l = &r.last;
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            l.mode,
            l.epoch,
            l.loss,
            l.train_acc_exact,
            l.test_acc_exact,
            l.trainable_params,
            l.trainable_ratio,
            r.coeff_digest.as_deref().unwrap_or("-")
        );
    }
    out
}

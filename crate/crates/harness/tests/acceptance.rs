//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and fails if any criterion fails.
//!
//! Runs as a single test so the timing bounds are not skewed by sibling tests sharing the CPU.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use num_rational::Ratio;
use peft_harness::ablate::S_GRID;
use peft_harness::cli::{run, Cli};
use peft_harness::config::ExperimentConfig;
use peft_harness::dataset::Task;
use peft_harness::selfcheck::{gradient_check, random_toy_model, run_selfcheck, SelfcheckOptions};
use peft_harness::train::{layer0_coefficients, prepare_samples, seeded, tuning_model, TaskData};
use peft_harness::checkpoint::Checkpoint;
use serde_json::Value;
use spectral_peft::adapter::{count_trainable, AdapterContext, AdapterParams, BasisKind};
use spectral_peft::backbone::{assemble_tokens, encoder_forward, sample_logits, AdapterSet, Model, Sample, TrainMode};
use spectral_peft::graph::{build_adjacency, pairwise_distances, GraphScope};
use spectral_peft::ordering::OrderingMethod;
use spectral_peft::pointcloud::{embed_patches, farthest_point_sampling, group_patches, PointCloud};
use spectral_peft::Matrix;

// Tolerances and budgets, one per stated bound.
const ORTHONORMALITY: f64 = 1e-8;
const ROUND_TRIP: f64 = 1e-10;
const PARSEVAL: f64 = 1e-10;
const TV_RELATIVE: f64 = 1e-8;
const NULL_SPACE: f64 = 1e-8;
const SPECTRAL_BUDGET: Duration = Duration::from_secs(30);
const ADJACENCY: f64 = 1e-12;
const ZERO_INIT: f64 = 1e-12;
const ZERO_INIT_MODELS: usize = 20;
const FD_RELATIVE: f64 = 1e-4;
const FD_SEEDS: usize = 10;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const PARAMS_R36_C384_L12: usize = 347_760;
const MAX_TRAINABLE_RATIO: f64 = 0.10;
const EXPERIMENT_SEEDS: u64 = 5;
const MIN_STRICT_WINS: usize = 3;
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    passed: bool,
    detail: String,
}

/// Writes straight to stderr so the lines survive libtest's output capture.
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn report(id: usize, title: &str, o: &Outcome) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    emit(&format!("criterion {id} {tag}: {title}: {}", o.detail));
}

fn cli(args: &[&str]) -> i32 {
    let argv = std::iter::once("spectral-peft").chain(args.iter().copied());
    let parsed = Cli::try_parse_from(argv).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    run(parsed).unwrap_or_else(|e| panic!("{args:?}: {e}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn final_test_acc(dir: &Path) -> Ratio<u64> {
    manifest(dir)["final"]["test_acc_exact"].as_str().unwrap().parse().unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let opts = SelfcheckOptions {
        clouds: 100,
        sizes: vec![8, 16, 32, 64],
        ..Default::default()
    };
    let report = run_selfcheck(&opts, None).unwrap();
    let elapsed = start.elapsed();
    let bounds = [
        ("orthonormality", ORTHONORMALITY),
        ("round_trip", ROUND_TRIP),
        ("parseval", PARSEVAL),
        ("total_variation", TV_RELATIVE),
        ("null_space", NULL_SPACE),
    ];
    let mut passed = elapsed < SPECTRAL_BUDGET;
    let mut parts = Vec::new();
    for (name, tol) in bounds {
        let c = report.get(name).unwrap();
        passed &= c.passed && c.value < tol;
        parts.push(format!("{name}={:.1e}<{tol:e}", c.value));
    }
    parts.push(format!("{:.1}s<{}s", elapsed.as_secs_f64(), SPECTRAL_BUDGET.as_secs()));
    Outcome {
        passed,
        detail: parts.join(" "),
    }
}

fn adjacency_of(xs: &[f64], scale: f64) -> Matrix<f64> {
    let pts: Vec<[f64; 3]> = xs.iter().map(|&x| [x * scale, 0.0, 0.0]).collect();
    build_adjacency(&pairwise_distances(&pts), GraphScope::Global).unwrap().adjacency
}

fn criterion_2() -> Outcome {
    let expected = Matrix::from_vec(3, 3, vec![1.0, 1.0, 1.0 / 3.0, 1.0, 1.0, 0.5, 1.0 / 3.0, 0.5, 1.0]).unwrap();
    let w = adjacency_of(&[0.0, 1.0, 3.0], 1.0);
    let err = w.max_abs_diff(&expected);
    let scale_err = [1e-3, 0.37, 7.5, 1e4]
        .iter()
        .map(|&s| adjacency_of(&[0.0, 1.0, 3.0], s).max_abs_diff(&w))
        .fold(0.0, f64::max);
    Outcome {
        passed: err < ADJACENCY && scale_err < ADJACENCY,
        detail: format!("|W-W*|={err:.1e} scaling drift={scale_err:.1e} tol={ADJACENCY:e}"),
    }
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..ZERO_INIT_MODELS {
        let mut rng = seeded(31, i as u64);
        let mut model = random_toy_model(&mut rng).unwrap();
        let (r, c) = (4, model.backbone.dim());
        model.adapters = (0..model.backbone.layers.len())
            .map(|_| AdapterParams::init(r, c, 1.0, &mut rng).unwrap())
            .collect();
        let pts: Vec<[f64; 3]> = (0..48)
            .map(|_| {
                use rand::Rng;
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
            })
            .collect();
        let cloud = PointCloud::new(pts, Some(0), "zero-init").unwrap();
        let kp = farthest_point_sampling(&cloud, 8, 0).unwrap();
        let patches = group_patches(&cloud, &kp, 6).unwrap();
        let ctx = AdapterContext::from_keypoints(&patches.keypoints, OrderingMethod::TransZOrder, 2, 0, BasisKind::Gft).unwrap();
        let b = &model.backbone;
        let t0 = assemble_tokens(&b.cls, &embed_patches(&patches, &b.embed).unwrap().values).unwrap();
        let adapted = encoder_forward(
            &t0,
            b,
            Some(AdapterSet {
                params: &model.adapters,
                ctx: &ctx,
            }),
        )
        .unwrap();
        let frozen = encoder_forward(&t0, b, None).unwrap();
        worst = worst.max(adapted.tokens.max_abs_diff(&frozen.tokens));
        let sample = Sample {
            patches,
            ctx: Some(ctx),
            label: 0,
        };
        let bare = Model::new(model.backbone.clone(), Vec::new()).unwrap();
        let la = sample_logits(&sample, &model).unwrap();
        let lb = sample_logits(&sample, &bare).unwrap();
        worst = la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    Outcome {
        passed: worst < ZERO_INIT,
        detail: format!("{ZERO_INIT_MODELS} models, max |adapted-frozen|={worst:.1e} tol={ZERO_INIT:e}"),
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    for mode in [TrainMode::Pcsa, TrainMode::LinearProbe, TrainMode::Full] {
        let (worst, scalars) = gradient_check(FD_SEEDS, 4, mode).unwrap();
        passed &= worst < FD_RELATIVE;
        parts.push(format!("{mode}: {scalars} scalars rel={worst:.1e}"));
    }
    let elapsed = start.elapsed();
    passed &= elapsed < GRADIENT_BUDGET;
    parts.push(format!("tol={FD_RELATIVE:e} {:.1}s<{}s", elapsed.as_secs_f64(), GRADIENT_BUDGET.as_secs()));
    Outcome {
        passed,
        detail: parts.join("; "),
    }
}

fn criterion_5(pcsa_run: &Path) -> Outcome {
    let counted = count_trainable(36, 384, 12, 0);
    let closed = 12 * (2 * 36 * 384 + 36 * 36 + 36);
    let m = manifest(pcsa_run);
    let ratio = m["trainable_ratio"].as_f64();
    let (trainable, total) = (m["trainable_params"].as_u64(), m["total_params"].as_u64());
    let consistent = match (ratio, trainable, total) {
        (Some(r), Some(t), Some(n)) => (r - t as f64 / n as f64).abs() < 1e-15,
        _ => false,
    };
    let passed = counted == PARAMS_R36_C384_L12 && closed == counted && consistent && ratio.is_some_and(|r| r < MAX_TRAINABLE_RATIO);
    Outcome {
        passed,
        detail: format!(
            "count_trainable={counted} closed form={closed} manifest ratio={:?} ({:?}/{:?}) < {MAX_TRAINABLE_RATIO}",
            ratio, trainable, total
        ),
    }
}

fn median(mut v: Vec<Ratio<u64>>) -> Ratio<u64> {
    v.sort();
    v[v.len() / 2]
}

const PRETRAIN_MIN_TRAIN_ACC: f64 = 0.9;

/// Returns the outcome, whether the pretraining baseline held, and the seed-0 pcsa run directory.
fn criterion_6(root: &Path) -> (Outcome, bool, PathBuf) {
    let start = Instant::now();
    let data = root.join("data");
    let pre = root.join("pretrain");
    assert_eq!(cli(&["gen-data", "--out", p(&data)]), 0);
    assert_eq!(cli(&["pretrain", "--data", p(&data), "--out", p(&pre)]), 0);
    let ckpt = pre.join("backbone.ckpt");
    let mut accs: BTreeMap<&str, Vec<Ratio<u64>>> = BTreeMap::new();
    for seed in 0..EXPERIMENT_SEEDS {
        for mode in ["linear_probe", "pcsa"] {
            let out = root.join(format!("{mode}_{seed}"));
            let s = seed.to_string();
            let args = ["tune", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&out), "--mode", mode, "--seed", &s];
            assert_eq!(cli(&args), 0);
            accs.entry(mode).or_default().push(final_test_acc(&out));
        }
    }
    let elapsed = start.elapsed();

    let pre_records: Vec<Value> = fs::read_to_string(pre.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let losses: Vec<f64> = pre_records.iter().take(6).map(|r| r["loss"].as_f64().unwrap()).collect();
    let pre_train_acc = pre_records.last().unwrap()["train_acc"].as_f64().unwrap();
    let baseline = pre_train_acc > PRETRAIN_MIN_TRAIN_ACC && losses.windows(2).all(|w| w[1] < w[0]);
    emit(&format!(
        "pretrain baseline {}: final train_acc={pre_train_acc:.4} > {PRETRAIN_MIN_TRAIN_ACC}, losses epochs 0..5={:?}",
        if baseline { "PASS" } else { "FAIL" },
        losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>()
    ));

    let (lp, pcsa) = (&accs["linear_probe"], &accs["pcsa"]);
    let wins = lp.iter().zip(pcsa).filter(|(l, p)| p > l).count();
    let (m_lp, m_pcsa) = (median(lp.clone()), median(pcsa.clone()));
    let show = |v: &[Ratio<u64>]| v.iter().map(|r| format!("{:.4}", *r.numer() as f64 / *r.denom() as f64)).collect::<Vec<_>>().join(",");
    let passed = m_pcsa >= m_lp && wins >= MIN_STRICT_WINS && elapsed < EXPERIMENT_BUDGET;
    let detail = format!(
        "linear_probe=[{}] pcsa=[{}] median {m_lp} vs {m_pcsa}, strict wins {wins}/{EXPERIMENT_SEEDS} (need {MIN_STRICT_WINS}), {:.0}s<{}s",
        show(lp),
        show(pcsa),
        elapsed.as_secs_f64(),
        EXPERIMENT_BUDGET.as_secs()
    );
    (Outcome { passed, detail }, baseline, root.join("pcsa_0"))
}

const SMALL: &str = "\
dataset.train_per_class = 8
dataset.test_per_class = 4
dataset.points = 96
model.n = 16
model.g = 8
model.d = 16
model.embed_hidden = 16
adapter.r = 4
optim.epochs = 2
optim.batch = 8
pretrain.epochs = 2
";

struct SmallRun {
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn small_pipeline(root: &Path) -> SmallRun {
    fs::create_dir_all(root).unwrap();
    let config = root.join("small.txt");
    fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    let pre = root.join("pretrain");
    assert_eq!(cli(&["gen-data", "--config", p(&config), "--out", p(&data)]), 0);
    assert_eq!(cli(&["pretrain", "--config", p(&config), "--data", p(&data), "--out", p(&pre)]), 0);
    SmallRun {
        config,
        data,
        ckpt: pre.join("backbone.ckpt"),
    }
}

fn ablate(run: &SmallRun, out: &Path, preset: &str) -> Vec<Vec<String>> {
    let args = ["ablate", "--config", p(&run.config), "--data", p(&run.data), "--checkpoint", p(&run.ckpt), "--out", p(out), "--preset", preset];
    assert_eq!(cli(&args), 0);
    fs::read_to_string(out.join("ablation.tsv"))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

fn cell_config(out: &Path, cell: usize) -> ExperimentConfig {
    ExperimentConfig::load(&out.join("cells").join(format!("{cell:03}")).join("config.txt")).unwrap()
}

fn criterion_7(run: &SmallRun, root: &Path) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();

    let s_out = root.join("ablate_s");
    let rows = ablate(run, &s_out, "s");
    let s_values: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    let s_configs: Vec<f64> = (0..rows.len() - 1).map(|i| cell_config(&s_out, i).adapter.s).collect();
    passed &= rows[0][1] == "adapter.s" && s_values == S_GRID && s_configs == S_GRID;
    parts.push(format!("s rows={} values={s_values:?}", rows.len() - 1));

    let k_out = root.join("ablate_k");
    let rows = ablate(run, &k_out, "k");
    let k_values: Vec<usize> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    let k_configs: Vec<usize> = (0..rows.len() - 1).map(|i| cell_config(&k_out, i).adapter.k).collect();
    passed &= k_values == [1, 2, 4, 8] && k_configs == k_values;
    parts.push(format!("k rows={k_values:?}"));

    let b_out = root.join("ablate_basis");
    let rows = ablate(run, &b_out, "basis");
    let digest = |name: &str| rows.iter().find(|r| r[1] == name).map(|r| r.last().unwrap().clone());
    let (gft, dct) = (digest("gft"), digest("dct"));
    passed &= gft.is_some() && dct.is_some() && gft != dct;

    // Same comparison on raw numbers, outside the ablation plumbing.
    let base = Checkpoint::load(&run.ckpt).unwrap();
    let data = TaskData::load(&run.data, Task::Target).unwrap();
    let coeffs = |basis: &str| {
        let mut cfg = ExperimentConfig::load(&run.config).unwrap();
        cfg.set("adapter.basis", basis).unwrap();
        let model = tuning_model(&cfg, &base, data.classes.len()).unwrap();
        let sample = prepare_samples(&data.test[..1], &cfg, true).unwrap();
        layer0_coefficients(&model, &sample[0]).unwrap()
    };
    let gap = coeffs("gft").max_abs_diff(&coeffs("dct"));
    passed &= gap > 1e-6;
    parts.push(format!("gft/dct digests differ={} max coefficient gap={gap:.3}", gft != dct));
    Outcome {
        passed,
        detail: parts.join("; "),
    }
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.jsonl" {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_8(run: &SmallRun, root: &Path) -> Outcome {
    let data = &run.data;
    let ck = p(&run.ckpt);
    let tune_dir = root.join("tune");
    let s_dir = root.join("ablate_s");
    assert_eq!(
        cli(&["tune", "--config", p(&run.config), "--data", p(data), "--checkpoint", ck, "--out", p(&tune_dir), "--adapter-s", "2"]),
        0
    );

    let replays: Vec<(&str, PathBuf, Vec<String>)> = vec![
        ("gen-data", data.clone(), vec!["gen-data".into()]),
        ("pretrain", root.join("pretrain"), vec!["pretrain".into(), "--data".into(), p(data).into()]),
        ("tune", tune_dir, vec!["tune".into(), "--data".into(), p(data).into(), "--checkpoint".into(), ck.into()]),
        ("ablate", s_dir, vec!["ablate".into(), "--data".into(), p(data).into(), "--checkpoint".into(), ck.into()]),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, dir, mut args) in replays {
        let replay = root.join(format!("replay_{name}"));
        args.extend(["--config".into(), p(&dir.join("manifest.json")).into(), "--out".into(), p(&replay).into()]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(cli(&args), 0);
        let (a, b) = (files_under(&dir), files_under(&replay));
        let metrics = a.keys().filter(|k| k.to_string_lossy().ends_with(".jsonl")).count();
        let same = a == b;
        passed &= same && (name == "gen-data" || metrics > 0);
        parts.push(format!("{name}: {} files ({metrics} metric streams) identical={same}", a.len()));
    }
    Outcome {
        passed,
        detail: parts.join("; "),
    }
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut results = Vec::new();

    let mut record = |id: usize, title: &str, o: Outcome| {
        report(id, title, &o);
        results.push((id, o.passed));
    };
    record(1, "spectral correctness suite", criterion_1());
    record(2, "adjacency closed form and scale invariance", criterion_2());
    record(3, "zero-init equivalence", criterion_3());
    record(4, "finite-difference gradient oracle", criterion_4());
    let (c6, baseline, pcsa_run) = criterion_6(&root.join("experiment"));
    record(5, "parameter accounting", criterion_5(&pcsa_run));
    record(6, "pcsa vs linear probe over seeds", c6);
    let small = small_pipeline(&root.join("small"));
    record(7, "ablation machinery", criterion_7(&small, &root.join("small")));
    record(8, "manifest replay determinism", criterion_8(&small, &root.join("small")));

    let failed: Vec<usize> = results.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(baseline, "pretraining baseline not met");
}

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spectral-peft"))
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    for args in [
        vec!["gen-data", "--groups-k", "5"],
        vec!["gen-data", "--ordering", "spiral"],
        vec!["gen-data", "--set", "dataset.source=sphere,blob"],
        vec!["gen-data", "--set", "nonsense.key=1"],
        vec!["gen-data", "--adapter-r", "32"],
    ] {
        let status = bin().args(&args).arg("--out").arg(&out).status().unwrap();
        assert_eq!(status.code(), Some(2), "{args:?}");
    }
    let status = bin().args(["ablate", "--data", "x", "--checkpoint", "y", "--out"]).arg(&out).args(["--sweep", "adapter.q=1,2"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["tune", "--data"])
        .arg(dir.path().join("none"))
        .arg("--checkpoint")
        .arg(dir.path().join("none.ckpt"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.txt");
    fs::write(&cfg, "# toy\nadapter.r = 4\nadapter.s = 0.5\ndataset.train_per_class = 2\ndataset.test_per_class = 1\n").unwrap();
    let out = dir.path().join("data");
    let status = bin().arg("gen-data").arg("--config").arg(&cfg).args(["--adapter-r", "6", "--seed", "9", "--out"]).arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["adapter.r"], "6");
    assert_eq!(m["config"]["adapter.s"], "0.5");
    assert_eq!(m["config"]["dataset.seed"], "9");
    assert_eq!(m["config"]["dataset.train_per_class"], "2");
}

#[test]
fn selfcheck_reports_an_injected_fault() {
    let ok = bin().args(["selfcheck", "--clouds", "8", "--grad-seeds", "1"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = bin().args(["selfcheck", "--clouds", "8", "--grad-seeds", "1", "--inject-fault"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8(bad.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("PASS fault_orthonormality")));
    assert!(text.lines().any(|l| l.starts_with("FAIL fault_round_trip")));
}

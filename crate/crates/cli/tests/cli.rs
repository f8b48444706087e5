use std::path::Path;
use std::process::{Command, Output};

use sepasd::config::{ExperimentConfig, TrainConfig};
use sepasd::synth::MachineType;

fn sepasd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepasd"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write_tiny_config(dir: &Path) {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 4;
    cfg.dataset.machine_types = vec![MachineType::Valve];
    cfg.dataset.scale = 3.0 / 990.0;
    cfg.dataset.eval_scale = 0.06;
    cfg.dataset.duration_s = 0.5;
    cfg.separator.crop_s = 0.25;
    cfg.detector.train = TrainConfig {
        batch: 16,
        lr: 1e-3,
        epochs: 2,
    };
    std::fs::write(dir.join("tiny.toml"), cfg.to_toml()).unwrap();
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sepasd(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(sepasd(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(sepasd(&["eval", "--pipelines", "nope"], dir.path()).status.code(), Some(1));
    write_tiny_config(dir.path());
    let out = sepasd(&["train", "gadget", "valve", "--config", "tiny.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out.stderr));
}

#[test]
fn bad_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[dataset]\nsnr_db = \"loud\"\n").unwrap();
    let out = sepasd(&["synth", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = sepasd(&["synth", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    let out = sepasd(&["synth", "--config", "tiny.toml", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("train_sep_id: 27"), "{stdout}");
    assert!(stdout.contains("eval: 18"), "{stdout}");
    assert!(stdout.contains("eval valve 02: 6"), "{stdout}");

    let out = sepasd(&["eval", "--config", "tiny.toml", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    for m in ["det_valve", "sep_id_valve_00", "sep_id_valve_01", "sep_id_valve_02", "sep_type_valve"] {
        assert!(err.contains(m), "{m} not in {err}");
    }

    let out = sepasd(&["train", "detector", "valve", "--config", "tiny.toml", "--out", "run", "--epochs", "1"], d);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(d.join("run/models/det_valve/loss.csv").is_file());

    let out = sepasd(
        &["eval", "--config", "tiny.toml", "--out", "run", "--pipelines", "baseline", "--threshold", "0.5"],
        d,
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert!(table.contains("| Baseline |"), "{table}");
    assert!(!table.contains("After-ID-Sep"), "{table}");
    let decisions = std::fs::read_to_string(d.join("run/eval/decisions.csv")).unwrap();
    assert_eq!(decisions.lines().count(), 19);
    assert!(decisions.lines().skip(1).all(|l| l.ends_with(",anomaly") || l.ends_with(",normal")));

    let out = sepasd(&["report", "--config", "tiny.toml", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout), std::fs::read_to_string(d.join("run/eval/table.md")).unwrap());

    let wav = std::fs::read_dir(d.join("run/data/audio")).unwrap().next().unwrap().unwrap().path();
    let out = sepasd(&["dump-spectrogram", wav.to_str().unwrap(), "mel.csv"], d);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(d.join("mel.csv")).unwrap();
    let first = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(first.split(',').count(), 128);
}

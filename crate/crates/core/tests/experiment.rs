use std::path::Path;

use sepasd::config::{ExperimentConfig, PipelineName, SeparatorConfig, TrainConfig};
use sepasd::dataset::Split;
use sepasd::experiment::*;
use sepasd::synth::MachineType;
use sepasd::Error;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 17;
    cfg.dataset.machine_types = vec![MachineType::Valve];
    cfg.dataset.scale = 3.0 / 990.0;
    cfg.dataset.eval_scale = 0.06;
    cfg.dataset.duration_s = 0.5;
    cfg.separator.model = SeparatorConfig {
        enc_filters: 8,
        enc_kernel: 16,
        enc_stride: 8,
        mask_blocks: 2,
        mask_channels: 8,
        dilation_growth: 2,
        n_sources: 1,
    };
    let t = TrainConfig {
        batch: 2,
        lr: 1e-3,
        epochs: 2,
    };
    cfg.separator.id_sep = t.clone();
    cfg.separator.type_sep = t;
    cfg.separator.crop_s = 0.25;
    cfg.detector.train = TrainConfig {
        batch: 16,
        lr: 1e-3,
        epochs: 2,
    };
    cfg
}

fn run_all(cfg: &ExperimentConfig, root: &Path) -> EvalOutcome {
    let layout = Layout::new(root);
    let manifest = synth(cfg, &layout).unwrap();
    for t in all_targets(cfg) {
        let out = train(cfg, &layout, &manifest, &t, None, &mut |_, _| {}).unwrap();
        assert_eq!(out.losses.len(), 2);
        assert!(out.dir.join(LOSS_FILE).is_file());
    }
    evaluate(cfg, &layout, &PipelineName::ALL).unwrap()
}

#[test]
fn end_to_end_run_is_complete_and_reproducible() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = run_all(&cfg, a.path());
    assert!(out.report.is_complete());
    assert_eq!(out.report.scores.len(), 3 * 6 * 4);
    let table = std::fs::read_to_string(a.path().join("eval/table.md")).unwrap();
    for p in PipelineName::ALL {
        assert!(table.contains(&format!("| {} |", p.label())), "{table}");
    }
    let sisdri = std::fs::read_to_string(a.path().join("eval/sisdri.csv")).unwrap();
    assert!(sisdri.contains("id_sep,valve,00,all,"));
    assert!(sisdri.contains("type_sep,valve,02,all,"));

    run_all(&cfg, b.path());
    let mut files = vec!["data/manifest.jsonl".to_string(), "eval/auc.csv".into(), "eval/scores.csv".into()];
    for t in all_targets(&cfg) {
        for f in ["meta.json", "weights.bin", "loss.csv"] {
            files.push(format!("models/{}/{f}", t.dir_name()));
        }
    }
    for f in files {
        let x = std::fs::read(a.path().join(&f)).unwrap();
        let y = std::fs::read(b.path().join(&f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let meta = std::fs::read_to_string(a.path().join("models/det_valve/meta.json")).unwrap();
    assert!(meta.contains(&cfg.hash()));
}

#[test]
fn epochs_override_is_recorded() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let manifest = synth(&cfg, &layout).unwrap();
    let t = TrainTarget::parse("type", "valve", None).unwrap();
    let out = train(&cfg, &layout, &manifest, &t, Some(3), &mut |_, _| {}).unwrap();
    assert_eq!(out.losses.len(), 3);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.dir.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["epochs"], 3);
    assert_eq!(meta["extra"]["scope"]["scope"], "type_sep");
    let items = manifest.select(Split::TrainSepType, MachineType::Valve, None);
    assert!(items.iter().all(|i| i.pattern == 1));
    assert_eq!(items.iter().map(|i| i.section.as_str()).collect::<std::collections::BTreeSet<_>>().len(), 3);
}

#[test]
fn eval_lists_every_missing_checkpoint() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    synth(&cfg, &layout).unwrap();
    match evaluate(&cfg, &layout, &PipelineName::ALL) {
        Err(Error::MissingCheckpoints(list)) => assert_eq!(list.len(), 5),
        other => panic!("{other:?}"),
    }
    match evaluate(&cfg, &layout, &[PipelineName::Baseline]) {
        Err(Error::MissingCheckpoints(list)) => assert_eq!(list, vec![dir.path().join("models/det_valve")]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn training_without_a_manifest_split_fails() {
    let mut cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let manifest = synth(&cfg, &layout).unwrap();
    cfg.dataset.machine_types = vec![MachineType::Slider];
    let t = TrainTarget::parse("detector", "slider", None).unwrap();
    assert!(matches!(train(&cfg, &layout, &manifest, &t, None, &mut |_, _| {}), Err(Error::Config(_))));
}

use proptest::prelude::*;
use sepasd::config::TrainConfig;
use sepasd::dataset::{Label, ManifestItem, Split};
use sepasd::detector::*;
use sepasd::features::FeatureConfig;
use sepasd::synth::MachineType;
use sepasd::{AudioClip, Error};

fn small_features() -> FeatureConfig {
    FeatureConfig {
        frame_size: 256,
        hop_size: 128,
        n_mels: 16,
        context: 3,
        floor_eps: 1e-10,
    }
}

fn tone(len: usize, hz: f32, seed: u32) -> AudioClip {
    let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
    AudioClip::new(
        (0..len)
            .map(|i| {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                let n = (state >> 8) as f32 / (1u32 << 24) as f32 - 0.5;
                0.3 * (2.0 * std::f32::consts::PI * hz * i as f32 / 16000.0).sin() + 0.02 * n
            })
            .collect(),
        16000,
    )
    .unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch: 32,
        lr: 1e-3,
        epochs,
    }
}

#[test]
fn default_dims_follow_the_table() {
    let m = DetectorModel::new(FeatureConfig::default(), 16000, 1).unwrap();
    let specs = m.network().unwrap().specs();
    assert_eq!(specs, autoencoder_specs(640));
    assert_eq!(FeatureConfig::default().dim(), 640);
}

#[test]
fn identity_stub_scores_zero() {
    let m = DetectorModel::identity_stub(small_features(), 16000).unwrap();
    assert_eq!(m.anomaly_score(&tone(4000, 440.0, 1)).unwrap(), 0.0);
}

#[test]
fn short_clip_is_an_error() {
    let m = DetectorModel::new(small_features(), 16000, 1).unwrap();
    assert!(matches!(m.anomaly_score(&tone(300, 440.0, 1)), Err(Error::TooShort { .. })));
}

#[test]
fn padding_that_adds_no_frame_leaves_the_score() {
    let f = small_features();
    let m = DetectorModel::new(f.clone(), 16000, 2).unwrap();
    let len = f.frame_size + 20 * f.hop_size;
    let c = tone(len, 300.0, 3);
    let mut padded = c.samples().to_vec();
    padded.extend(std::iter::repeat_n(0.0, f.hop_size - 1));
    let p = AudioClip::new(padded, 16000).unwrap();
    assert_eq!(m.anomaly_score(&c).unwrap(), m.anomaly_score(&p).unwrap());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let clips: Vec<AudioClip> = (0..4).map(|i| tone(6000, 200.0 + 10.0 * i as f32, i)).collect();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut m = DetectorModel::new(small_features(), 16000, 5).unwrap();
        train_detector(&mut m, &clips, &train_cfg(3), 9, &mut |_, _| {}).unwrap();
        m.save(d.path(), 5, Some(&train_cfg(3)), 3, serde_json::json!({ "note": 1 })).unwrap();
    }
    for f in ["meta.json", "weights.bin"] {
        assert_eq!(std::fs::read(dirs[0].path().join(f)).unwrap(), std::fs::read(dirs[1].path().join(f)).unwrap());
    }
    let a = DetectorModel::load(dirs[0].path()).unwrap();
    let probe = tone(5000, 250.0, 8);
    let score = a.anomaly_score(&probe).unwrap();
    assert_eq!(score, a.anomaly_score(&probe).unwrap());
    assert!(score >= 0.0);
}

#[test]
fn trained_detector_prefers_its_training_sound() {
    let clips: Vec<AudioClip> = (0..6).map(|i| tone(8000, 500.0, i)).collect();
    let mut m = DetectorModel::new(small_features(), 16000, 7).unwrap();
    let losses = train_detector(&mut m, &clips, &train_cfg(60), 2, &mut |_, _| {}).unwrap();
    assert!(losses[59] < losses[0], "{} -> {}", losses[0], losses[59]);
    let normal = m.anomaly_score(&tone(8000, 500.0, 40)).unwrap();
    let odd = m.anomaly_score(&tone(8000, 2300.0, 40)).unwrap();
    assert!(odd > normal, "{odd} vs {normal}");
}

#[test]
fn training_needs_normal_items() {
    let mk = |label| ManifestItem {
        id: "x".into(),
        split: Split::TrainDetector,
        machine_type: MachineType::Valve,
        section: "00".into(),
        pattern: 1,
        snr_db: 0.0,
        label,
        anomaly_kind: None,
        mixture_path: String::new(),
        ground_truth_path: String::new(),
        seed: 0,
    };
    let n = mk(Label::Normal);
    let a = mk(Label::Anomalous);
    assert!(check_training_items(&[&n]).is_ok());
    assert!(matches!(check_training_items(&[&n, &a]), Err(Error::Contract(_))));
    assert!(check_training_items(&[]).is_err());
    let mut m = DetectorModel::new(small_features(), 16000, 1).unwrap();
    assert!(train_detector(&mut m, &[], &train_cfg(1), 0, &mut |_, _| {}).is_err());
}

#[test]
fn stub_cannot_be_saved() {
    let d = tempfile::tempdir().unwrap();
    let m = DetectorModel::identity_stub(small_features(), 16000).unwrap();
    assert!(m.save(d.path(), 0, None, 0, serde_json::json!({})).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scores_are_nonnegative_and_repeatable(hz in 50.0f32..6000.0, seed in 0u32..1000, len in 1200usize..5000) {
        let m = DetectorModel::new(small_features(), 16000, 3).unwrap();
        let c = tone(len, hz, seed);
        let s = m.anomaly_score(&c).unwrap();
        prop_assert!(s >= 0.0 && s.is_finite());
        prop_assert_eq!(s, m.anomaly_score(&c).unwrap());
    }
}

use proptest::prelude::*;
use sepasd::features::{
    concat_context, frame_count, hann, log_mel, mel_filterbank, stft_power, FeatureConfig, FeatureExtractor,
    FeatureMatrix,
};
use sepasd::AudioClip;

fn naive_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn bin_centred_sinusoid_concentrates_in_three_bins() {
    let (n, hop, sr) = (1024, 512, 16000u32);
    for k in [3usize, 40, 200, 511] {
        let f = k as f64 * sr as f64 / n as f64;
        let samples: Vec<f32> = (0..4096)
            .map(|t| (0.5 * (2.0 * std::f64::consts::PI * f * t as f64 / sr as f64 + 0.3).sin()) as f32)
            .collect();
        let clip = AudioClip::new(samples, sr).unwrap();
        let spec = stft_power(&clip, n, hop).unwrap();
        let w = hann(n);
        for t in 0..spec.frames {
            let frame: Vec<f64> = (0..n).map(|i| clip.samples()[t * hop + i] as f64 * w[i]).collect();
            let oracle = naive_power(&frame);
            let row = spec.frame(t);
            for (a, b) in row.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-6 * oracle.iter().cloned().fold(0.0, f64::max));
            }
            let total: f64 = oracle.iter().sum();
            let near: f64 = oracle[k - 1..=(k + 1).min(n / 2)].iter().sum();
            assert!(near / total >= 0.85, "bin {k} frame {t}: {}", near / total);
        }
    }
}

#[test]
fn filter_centres_follow_the_mel_formula() {
    let fb = mel_filterbank(128, 513, 16000, 0.0, 8000.0).unwrap();
    let mel_max = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
    for (m, &c) in fb.centers_hz.iter().enumerate() {
        let mel = mel_max * (m + 1) as f64 / 129.0;
        let hz = 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
        assert!((c - hz).abs() < 1e-6);
        if m > 0 {
            assert!(c > fb.centers_hz[m - 1]);
        }
    }
}

fn test_clip(gain: f32) -> AudioClip {
    let samples = (0..16000)
        .map(|t| {
            let t = t as f32 / 16000.0;
            gain * (0.3 * (2.0 * 3.14159 * 220.0 * t).sin() + 0.1 * (2.0 * 3.14159 * 1733.0 * t).sin()
                + 0.05 * (2.0 * 3.14159 * 5100.0 * t).sin())
        })
        .collect();
    AudioClip::new(samples, 16000).unwrap()
}

#[test]
fn doubling_waveform_adds_six_db() {
    let fb = mel_filterbank(128, 513, 16000, 0.0, 8000.0).unwrap();
    let a = log_mel(&stft_power(&test_clip(1.0), 1024, 512).unwrap(), &fb, 1e-10).unwrap();
    let b = log_mel(&stft_power(&test_clip(2.0), 1024, 512).unwrap(), &fb, 1e-10).unwrap();
    let want = 10.0 * 4f64.log10();
    let mut checked = 0;
    for (x, y) in a.data.iter().zip(&b.data) {
        if *x as f64 >= -70.0 {
            assert!(((y - x) as f64 - want).abs() < 0.01, "{x} -> {y}");
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn extractor_gives_640_dim_vectors_for_a_four_second_clip() {
    let ex = FeatureExtractor::new(FeatureConfig::default(), 16000).unwrap();
    let clip = AudioClip::new((0..64000).map(|i| ((i as f32) * 0.01).sin() * 0.1).collect(), 16000).unwrap();
    let v = ex.vectors(&clip).unwrap();
    assert_eq!(v.dim, 640);
    assert_eq!(v.rows, 124 - 4);
    assert!(v.data.iter().all(|x| x.is_finite()));
}

#[test]
fn extractor_rejects_other_sample_rates() {
    let ex = FeatureExtractor::new(FeatureConfig::default(), 16000).unwrap();
    let clip = AudioClip::new(vec![0.0; 8000], 8000).unwrap();
    assert!(ex.vectors(&clip).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frame_count_matches_stft(len in 64usize..3000, pow in 6u32..10, hop_frac in 1usize..=8) {
        let n = 1usize << pow;
        let hop = (n * hop_frac / 8).max(1);
        let clip = AudioClip::new(vec![0.1; len], 16000).unwrap();
        match stft_power(&clip, n, hop) {
            Ok(spec) => {
                prop_assert_eq!(Some(spec.frames), frame_count(len, n, hop));
                prop_assert_eq!(spec.frames, 1 + (len - n) / hop);
                prop_assert_eq!(spec.freq_bins, n / 2 + 1);
            }
            Err(_) => prop_assert!(len < n),
        }
    }

    #[test]
    fn concat_context_preserves_values(rows in 1usize..20, dim in 1usize..10, context in 1usize..6) {
        prop_assume!(context <= rows);
        let mel = FeatureMatrix { rows, dim, data: (0..rows * dim).map(|i| i as f32 * 0.5).collect() };
        let out = concat_context(&mel, context).unwrap();
        prop_assert_eq!(out.rows, rows - context + 1);
        prop_assert_eq!(out.dim, dim * context);
        for t in 0..out.rows {
            for j in 0..context {
                for m in 0..dim {
                    prop_assert_eq!(out.row(t)[j * dim + m], mel.row(t + j)[m]);
                }
            }
        }
    }

    #[test]
    fn log_mel_is_finite_and_monotone(samples in prop::collection::vec(-1.0f32..1.0, 256..600), bump in 0usize..129, extra in 0.0f64..10.0) {
        let clip = AudioClip::new(samples, 16000).unwrap();
        let mut spec = stft_power(&clip, 256, 128).unwrap();
        let fb = mel_filterbank(16, 129, 16000, 0.0, 8000.0).unwrap();
        let base = log_mel(&spec, &fb, 1e-10).unwrap();
        prop_assert!(base.data.iter().all(|v| v.is_finite()));
        spec.bins[bump] += extra;
        let bumped = log_mel(&spec, &fb, 1e-10).unwrap();
        for (a, b) in base.data.iter().zip(&bumped.data) {
            prop_assert!(b >= a);
        }
    }
}

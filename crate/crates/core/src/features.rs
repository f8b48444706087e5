//! STFT power spectrogram, HTK mel filterbank, log-mel frames and
//! context stacking into detector input vectors.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{io_at, Error, Result};

/// Power spectrogram, `frames × freq_bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub freq_bins: usize,
    pub frame_size: usize,
    pub hop_size: usize,
    pub sample_rate: u32,
    pub bins: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.bins[t * self.freq_bins..(t + 1) * self.freq_bins]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, self.freq_bins, self.bins.iter().copied())
    }
}

/// Row-major matrix of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, self.dim, self.data.iter().map(|&v| v as f64))
    }
}

fn write_matrix_csv(path: &Path, cols: usize, values: impl Iterator<Item = f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_at(path))?;
    let mut w = std::io::BufWriter::new(file);
    let mut line = String::new();
    for (i, v) in values.enumerate() {
        if i % cols != 0 {
            line.push(',');
        }
        line.push_str(&format!("{v:e}"));
        if i % cols == cols - 1 {
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(io_at(path))?;
            line.clear();
        }
    }
    w.flush().map_err(io_at(path))
}

/// Periodic Hann window.
pub fn hann(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / size as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, frame_size: usize, hop_size: usize) -> Option<usize> {
    (len >= frame_size).then(|| 1 + (len - frame_size) / hop_size)
}

/// Reusable STFT plan for one frame size.
#[derive(Clone)]
pub struct Stft {
    frame_size: usize,
    hop_size: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("frame_size", &self.frame_size)
            .field("hop_size", &self.hop_size)
            .finish()
    }
}

impl Stft {
    pub fn new(frame_size: usize, hop_size: usize) -> Result<Self> {
        if !frame_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("frame size {frame_size} is not a power of two")));
        }
        if hop_size == 0 || hop_size > frame_size {
            return Err(Error::InvalidArgument(format!(
                "hop size {hop_size} must be in 1..={frame_size}"
            )));
        }
        Ok(Self {
            frame_size,
            hop_size,
            window: hann(frame_size),
            fft: FftPlanner::new().plan_fft_forward(frame_size),
        })
    }

    pub fn power(&self, clip: &AudioClip) -> Result<Spectrogram> {
        let x = clip.samples();
        let frames = frame_count(x.len(), self.frame_size, self.hop_size).ok_or(Error::TooShort {
            len: x.len(),
            min: self.frame_size,
        })?;
        let freq_bins = self.frame_size / 2 + 1;
        let mut bins = Vec::with_capacity(frames * freq_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.frame_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.hop_size;
            for ((b, &s), &w) in buf.iter_mut().zip(&x[start..start + self.frame_size]).zip(&self.window) {
                *b = Complex::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            bins.extend(buf[..freq_bins].iter().map(|c| c.norm_sqr()));
        }
        Ok(Spectrogram {
            frames,
            freq_bins,
            frame_size: self.frame_size,
            hop_size: self.hop_size,
            sample_rate: clip.sample_rate(),
            bins,
        })
    }
}

pub fn stft_power(clip: &AudioClip, frame_size: usize, hop_size: usize) -> Result<Spectrogram> {
    Stft::new(frame_size, hop_size)?.power(clip)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, not area-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub freq_bins: usize,
    /// Filter center frequencies in Hz.
    pub centers_hz: Vec<f64>,
    /// `n_mels × freq_bins`, row-major.
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.freq_bins..(m + 1) * self.freq_bins]
    }
}

pub fn mel_filterbank(n_mels: usize, freq_bins: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 || freq_bins < 2 {
        return Err(Error::InvalidArgument("need n_mels ≥ 1 and freq_bins ≥ 2".into()));
    }
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "need 0 ≤ f_min < f_max ≤ {nyquist} Hz, got {f_min}..{f_max}"
        )));
    }
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let mut edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    // Pin the outer edges so the mel round trip cannot leak weight past them.
    edges[0] = f_min;
    edges[n_mels + 1] = f_max;
    let bin_hz = nyquist / (freq_bins - 1) as f64;
    let mut weights = vec![0.0; n_mels * freq_bins];
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * freq_bins..(m + 1) * freq_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f <= l || f >= r {
                0.0
            } else {
                ((f - l) / (c - l)).min((r - f) / (r - c))
            };
        }
        if row.iter().all(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{n_mels} mel filters are too many for {freq_bins} frequency bins (filter {m} is empty)"
            )));
        }
    }
    Ok(MelFilterbank {
        n_mels,
        freq_bins,
        centers_hz: edges[1..=n_mels].to_vec(),
        weights,
    })
}

/// `10·log10(fb · power + floor_eps)` per frame.
pub fn log_mel(spec: &Spectrogram, fb: &MelFilterbank, floor_eps: f64) -> Result<FeatureMatrix> {
    if fb.freq_bins != spec.freq_bins {
        return Err(Error::InvalidArgument(format!(
            "filterbank has {} bins, spectrogram {}",
            fb.freq_bins, spec.freq_bins
        )));
    }
    if floor_eps <= 0.0 {
        return Err(Error::InvalidArgument("floor_eps must be positive".into()));
    }
    let mut data = Vec::with_capacity(spec.frames * fb.n_mels);
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        for m in 0..fb.n_mels {
            let p: f64 = fb.row(m).iter().zip(frame).map(|(w, p)| w * p).sum();
            data.push((10.0 * (p + floor_eps).log10()) as f32);
        }
    }
    Ok(FeatureMatrix {
        rows: spec.frames,
        dim: fb.n_mels,
        data,
    })
}

/// Stacks `context` consecutive frames (stride 1) into each output row.
pub fn concat_context(mel: &FeatureMatrix, context: usize) -> Result<FeatureMatrix> {
    if context == 0 || mel.rows < context {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ context ≤ frames, got context {context} with {} frames",
            mel.rows
        )));
    }
    let rows = mel.rows - context + 1;
    let dim = mel.dim * context;
    // Rows t..t+context are contiguous in the source, so each output row is a slice copy.
    let mut data = Vec::with_capacity(rows * dim);
    for t in 0..rows {
        data.extend_from_slice(&mel.data[t * mel.dim..t * mel.dim + dim]);
    }
    Ok(FeatureMatrix { rows, dim, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub frame_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub context: usize,
    pub floor_eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_size: 1024,
            hop_size: 512,
            n_mels: 128,
            context: 5,
            floor_eps: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        self.n_mels * self.context
    }

    /// Shortest clip yielding one context vector.
    pub fn min_samples(&self) -> usize {
        self.frame_size + (self.context - 1) * self.hop_size
    }
}

/// Clip → context vectors, with the STFT plan and filterbank prepared once.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    sample_rate: u32,
    stft: Stft,
    filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig, sample_rate: u32) -> Result<Self> {
        let stft = Stft::new(config.frame_size, config.hop_size)?;
        let filterbank = mel_filterbank(
            config.n_mels,
            config.frame_size / 2 + 1,
            sample_rate,
            0.0,
            sample_rate as f64 / 2.0,
        )?;
        if config.context == 0 {
            return Err(Error::InvalidArgument("context must be ≥ 1".into()));
        }
        Ok(Self {
            config,
            sample_rate,
            stft,
            filterbank,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.sample_rate,
                actual: clip.sample_rate(),
            });
        }
        log_mel(&self.stft.power(clip)?, &self.filterbank, self.config.floor_eps)
    }

    pub fn vectors(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.len() < self.config.min_samples() {
            return Err(Error::TooShort {
                len: clip.len(),
                min: self.config.min_samples(),
            });
        }
        concat_context(&self.log_mel(clip)?, self.config.context)
    }
}

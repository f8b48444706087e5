//! Mono audio container, WAV I/O and seeded noise.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// RMS level produced by [`seeded_noise`].
pub const NOISE_RMS: f64 = 0.1;

/// Mono waveform. Samples are finite; length is at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySignal);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidSampleRate);
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Same sample rate, new samples.
    pub fn with_samples(&self, samples: Vec<f32>) -> Result<Self> {
        Self::new(samples, self.sample_rate)
    }

    pub fn scaled(&self, gain: f64) -> Result<Self> {
        self.with_samples(self.samples.iter().map(|&v| (v as f64 * gain) as f32).collect())
    }
}

pub(crate) fn power(samples: &[f32]) -> f64 {
    samples.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / samples.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        hound::Error::Unsupported => Error::UnsupportedEncoding("format tag not PCM or IEEE float".into()),
        other => Error::MalformedWav(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    let malformed = |e: hound::Error| Error::MalformedWav(e.to_string());
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(malformed)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(malformed)?,
        (format, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{format:?} with {bits} bits per sample")));
        }
    };
    AudioClip::new(samples, spec.sample_rate)
}

pub fn write_wav(clip: &AudioClip, path: &Path, encoding: WavEncoding) -> Result<()> {
    if clip.is_empty() {
        return Err(Error::EmptySignal);
    }
    let (bits_per_sample, sample_format) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample,
        sample_format,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::MalformedWav(other.to_string()),
    };
    let file = std::fs::File::create(path).map_err(io_at(path))?;
    let mut writer = hound::WavWriter::new(std::io::BufWriter::new(file), spec).map_err(wav_err)?;
    for &v in clip.samples() {
        match encoding {
            WavEncoding::Pcm16 => writer.write_sample(pcm16_code(v)).map_err(wav_err)?,
            WavEncoding::Float32 => writer.write_sample(v).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

/// Clamps to [−1, 1 − 2⁻¹⁵] and rounds to the nearest 16-bit code.
pub fn pcm16_code(v: f32) -> i16 {
    (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
}

/// Gaussian noise, white or 1/f-shaped, scaled to [`NOISE_RMS`].
///
/// Pure function of `(length, seed, kind)`. Pink noise is shaped in the
/// frequency domain (amplitude ∝ f^−½, DC removed) and transformed back.
pub fn seeded_noise(length: usize, seed: u64, kind: NoiseKind, sample_rate: u32) -> Result<AudioClip> {
    if length == 0 {
        return Err(Error::EmptySignal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..length).map(|_| StandardNormal.sample(&mut rng)).collect();
    let shaped = match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => pink_shape(white),
    };
    let rms = (shaped.iter().map(|v| v * v).sum::<f64>() / length as f64).sqrt();
    let gain = if rms > 0.0 { NOISE_RMS / rms } else { 0.0 };
    AudioClip::new(shaped.iter().map(|v| (v * gain) as f32).collect(), sample_rate)
}

fn pink_shape(white: Vec<f64>) -> Vec<f64> {
    let n = white.len();
    let mut buf: Vec<Complex<f64>> = white.into_iter().map(|v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, c) in buf.iter_mut().enumerate().skip(1) {
        // Bin k and n-k share the same |frequency|.
        let f = k.min(n - k) as f64;
        *c /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

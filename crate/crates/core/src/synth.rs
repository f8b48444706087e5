//! Parametric machine sounds, anomaly injection and SNR-controlled mixing.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{power, AudioClip};
use crate::error::{Error, Result};
use crate::rng;

/// RMS of every normal render.
pub const RENDER_RMS: f64 = 0.1;
/// Relative fundamental shift per unit severity for detune anomalies.
pub const DETUNE_PER_SEVERITY: f64 = 0.05;
/// Fraction of the clip silenced per unit severity for dropout anomalies.
pub const DROPOUT_PER_SEVERITY: f64 = 0.5;
/// Peak amplitude of rattle clicks per unit severity.
pub const RATTLE_PEAK: f64 = 0.6;
pub const RATTLE_RATE_HZ: f64 = 15.0;
pub const SECTIONS: [u8; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MachineType {
    Slider,
    Valve,
}

impl MachineType {
    pub const ALL: [MachineType; 2] = [MachineType::Slider, MachineType::Valve];

    pub fn name(self) -> &'static str {
        match self {
            MachineType::Slider => "slider",
            MachineType::Valve => "valve",
        }
    }
}

impl fmt::Display for MachineType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MachineType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slider" => Ok(MachineType::Slider),
            "valve" => Ok(MachineType::Valve),
            other => Err(Error::InvalidArgument(format!("unknown machine type '{other}'"))),
        }
    }
}

pub fn section_name(section: u8) -> String {
    format!("{section:02}")
}

pub fn parse_section(s: &str) -> Result<u8> {
    s.parse::<u8>()
        .ok()
        .filter(|v| SECTIONS.contains(v))
        .ok_or_else(|| Error::InvalidArgument(format!("section must be 00, 01 or 02, got '{s}'")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransientShape {
    /// Noise burst ring-modulated onto the resonance, ~15 ms decay.
    Burst,
    /// Damped sinusoid at the resonance, ~4 ms decay.
    Click,
}

impl TransientShape {
    fn decay_s(self) -> f64 {
        match self {
            TransientShape::Burst => 0.015,
            TransientShape::Click => 0.004,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineProfile {
    pub machine_type: MachineType,
    pub section: u8,
    pub fundamental: f64,
    /// Amplitude of harmonic `h + 1`.
    pub harmonic_gains: Vec<f64>,
    pub transient_rate: f64,
    pub transient_shape: TransientShape,
    pub transient_gain: f64,
    pub resonance_hz: f64,
    pub am_rate: f64,
    pub am_depth: f64,
    /// Per-clip variation (phases, event timing, jitter).
    pub seed: u64,
}

fn envelope_gains(count: usize, f0: f64, peak_hz: f64, width_oct: f64, level: f64) -> Vec<f64> {
    (1..=count)
        .map(|h| {
            let oct = (h as f64 * f0 / peak_hz).log2();
            level * (-0.5 * (oct / width_oct).powi(2)).exp() / (h as f64).sqrt()
        })
        .collect()
}

impl MachineProfile {
    /// Built-in profile for one machine type and section.
    pub fn preset(machine_type: MachineType, section: u8) -> Result<Self> {
        let s = SECTIONS
            .iter()
            .position(|&v| v == section)
            .ok_or_else(|| Error::InvalidArgument(format!("no section {section}")))?;
        let p = match machine_type {
            MachineType::Slider => {
                let f0 = [120.0, 155.0, 95.0][s];
                let peak = [800.0, 1500.0, 500.0][s];
                Self {
                    machine_type,
                    section,
                    fundamental: f0,
                    harmonic_gains: envelope_gains(40, f0, peak, 1.2, 1.0),
                    transient_rate: [2.0, 2.6, 1.6][s],
                    transient_shape: TransientShape::Burst,
                    transient_gain: 0.5,
                    resonance_hz: [2000.0, 2600.0, 1400.0][s],
                    am_rate: [1.0, 1.3, 0.8][s],
                    am_depth: 0.5,
                    seed: 0,
                }
            }
            MachineType::Valve => {
                let f0 = [50.0, 60.0, 45.0][s];
                Self {
                    machine_type,
                    section,
                    fundamental: f0,
                    harmonic_gains: envelope_gains(8, f0, 150.0, 1.0, 0.3),
                    transient_rate: [4.0, 6.0, 3.0][s],
                    transient_shape: TransientShape::Click,
                    transient_gain: 1.0,
                    resonance_hz: [1800.0, 2600.0, 1200.0][s],
                    am_rate: [0.5, 0.7, 0.4][s],
                    am_depth: 0.3,
                    seed: 0,
                }
            }
        };
        Ok(p)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.fundamental, self.resonance_hz];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("fundamental and resonance must be positive".into()));
        }
        let nonneg = [self.transient_rate, self.transient_gain, self.am_rate];
        if nonneg.iter().chain(&self.harmonic_gains).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("profile rates and gains must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.am_depth) {
            return Err(Error::InvalidArgument("am_depth must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Detune,
    Rattle,
    Dropout,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::Detune, AnomalyKind::Rattle, AnomalyKind::Dropout];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Detune => "detune",
            AnomalyKind::Rattle => "rattle",
            AnomalyKind::Dropout => "dropout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub severity: f64,
}

impl AnomalySpec {
    pub fn new(kind: AnomalyKind, severity: f64) -> Result<Self> {
        if !(severity > 0.0 && severity <= 1.0) {
            return Err(Error::InvalidArgument(format!("severity must be in (0, 1], got {severity}")));
        }
        Ok(Self { kind, severity })
    }
}

/// Renders the machine sound. Normal renders have RMS [`RENDER_RMS`];
/// anomalies are applied with the same gain, so they may change the level.
pub fn render_machine(
    profile: &MachineProfile,
    duration_s: f64,
    sample_rate: u32,
    anomaly: Option<&AnomalySpec>,
) -> Result<AudioClip> {
    profile.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) || sample_rate == 0 {
        return Err(Error::InvalidArgument("duration and sample rate must be positive".into()));
    }
    let n = (duration_s * sample_rate as f64).round().max(1.0) as usize;
    let clean = render_raw(profile, n, sample_rate, 1.0);
    let rms = (clean.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let gain = if rms > 0.0 { RENDER_RMS / rms } else { 0.0 };
    let mut out = match anomaly {
        None => clean,
        Some(a) => match a.kind {
            AnomalyKind::Detune => render_raw(profile, n, sample_rate, 1.0 + DETUNE_PER_SEVERITY * a.severity),
            AnomalyKind::Rattle | AnomalyKind::Dropout => clean,
        },
    };
    out.iter_mut().for_each(|v| *v *= gain);
    if let Some(a) = anomaly {
        let mut r = rng::rng(rng::substream(profile.seed, a.kind.name()));
        match a.kind {
            AnomalyKind::Detune => {}
            AnomalyKind::Rattle => add_rattle(&mut out, sample_rate, profile, a.severity, &mut r),
            AnomalyKind::Dropout => apply_dropout(&mut out, sample_rate, a.severity, &mut r),
        }
    }
    AudioClip::new(out.into_iter().map(|v| v as f32).collect(), sample_rate)
}

/// Unscaled render; `freq_scale` multiplies every frequency (detune).
fn render_raw(p: &MachineProfile, n: usize, sr: u32, freq_scale: f64) -> Vec<f64> {
    let mut r = rng::rng(p.seed);
    let sr_f = sr as f64;
    let f0 = p.fundamental * (1.0 + r.random_range(-0.003..0.003)) * freq_scale;
    let am_phase = r.random_range(0.0..2.0 * PI);
    let phases: Vec<f64> = p.harmonic_gains.iter().map(|_| r.random_range(0.0..2.0 * PI)).collect();

    let mut out = vec![0.0; n];
    for (h, (&g, &ph)) in p.harmonic_gains.iter().zip(&phases).enumerate() {
        let f = f0 * (h + 1) as f64;
        if g == 0.0 || f >= 0.45 * sr_f {
            continue;
        }
        for (v, s) in out.iter_mut().zip(Oscillator::new(f / sr_f, ph)) {
            *v += g * s;
        }
    }
    if p.am_depth > 0.0 {
        for (v, s) in out.iter_mut().zip(Oscillator::new(p.am_rate / sr_f, am_phase)) {
            *v *= 1.0 - 0.5 * p.am_depth + 0.5 * p.am_depth * s;
        }
    }

    if p.transient_rate > 0.0 && p.transient_gain > 0.0 {
        let period = 1.0 / p.transient_rate;
        let mut t = r.random_range(0.0..period);
        let duration = n as f64 / sr_f;
        while t < duration {
            let amp = p.transient_gain * (1.0 + r.random_range(-0.15..0.15));
            let phase = r.random_range(0.0..2.0 * PI);
            add_transient(
                &mut out,
                sr,
                (t * sr_f) as usize,
                p.transient_shape,
                p.resonance_hz * freq_scale,
                amp,
                phase,
                &mut r,
            );
            t += period * (1.0 + r.random_range(-0.1..0.1));
        }
    }
    out
}

/// `sin(2π·cycles_per_sample·n + phase)` by phasor rotation, re-anchored
/// every 4096 samples to bound drift.
struct Oscillator {
    step: (f64, f64),
    z: (f64, f64),
    n: usize,
    cycles: f64,
    phase: f64,
}

impl Oscillator {
    fn new(cycles_per_sample: f64, phase: f64) -> Self {
        let w = 2.0 * PI * cycles_per_sample;
        Self {
            step: (w.cos(), w.sin()),
            z: (phase.cos(), phase.sin()),
            n: 0,
            cycles: cycles_per_sample,
            phase,
        }
    }
}

impl Iterator for Oscillator {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if self.n % 4096 == 0 {
            let a = 2.0 * PI * (self.cycles * self.n as f64).fract() + self.phase;
            self.z = (a.cos(), a.sin());
        }
        let out = self.z.1;
        let (c, s) = self.z;
        self.z = (c * self.step.0 - s * self.step.1, c * self.step.1 + s * self.step.0);
        self.n += 1;
        Some(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn add_transient<R: Rng>(
    out: &mut [f64],
    sr: u32,
    start: usize,
    shape: TransientShape,
    freq: f64,
    amp: f64,
    phase: f64,
    r: &mut R,
) {
    let sr_f = sr as f64;
    let tau = shape.decay_s();
    let len = ((6.0 * tau * sr_f) as usize).min(out.len().saturating_sub(start));
    let w = 2.0 * PI * freq / sr_f;
    for i in 0..len {
        let env = amp * (-(i as f64) / (tau * sr_f)).exp();
        let carrier = (w * i as f64 + phase).sin();
        let v = match shape {
            TransientShape::Click => env * carrier,
            TransientShape::Burst => {
                let z: f64 = StandardNormal.sample(r);
                env * carrier * z
            }
        };
        out[start + i] += v;
    }
}

/// Extra transients of the machine's own shape and resonance, as from a loose part.
fn add_rattle<R: Rng>(out: &mut [f64], sr: u32, profile: &MachineProfile, severity: f64, r: &mut R) {
    let sr_f = sr as f64;
    let period = 1.0 / RATTLE_RATE_HZ;
    let duration = out.len() as f64 / sr_f;
    let mut t = r.random_range(0.0..period);
    while t < duration {
        let amp = RATTLE_PEAK * severity * (1.0 + r.random_range(-0.2..0.2));
        let phase = r.random_range(0.0..2.0 * PI);
        let freq = profile.resonance_hz * (1.0 + r.random_range(-0.05..0.05));
        add_transient(out, sr, (t * sr_f) as usize, profile.transient_shape, freq, amp, phase, r);
        t += period * (1.0 + r.random_range(-0.3..0.3));
    }
}

fn apply_dropout<R: Rng>(out: &mut [f64], sr: u32, severity: f64, r: &mut R) {
    let target = ((DROPOUT_PER_SEVERITY * severity * out.len() as f64).round() as usize).min(out.len());
    let mut silent = vec![false; out.len()];
    let mut count = 0;
    while count < target {
        let seg = ((r.random_range(0.1..0.3) * sr as f64) as usize).clamp(1, out.len());
        let start = r.random_range(0..=out.len() - seg);
        for s in &mut silent[start..start + seg] {
            if !*s && count < target {
                *s = true;
                count += 1;
            }
        }
    }
    for (v, s) in out.iter_mut().zip(silent) {
        if s {
            *v = 0.0;
        }
    }
}

/// Mixes `target` with `others` at `snr_db`.
///
/// The non-target clips are scaled to the RMS of the first one, summed, and
/// the sum is scaled so that target power over interference power equals
/// `snr_db`. The ground truth is the target, unchanged.
pub fn mix_at_snr(target: &AudioClip, others: &[AudioClip], snr_db: f64) -> Result<(AudioClip, AudioClip)> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument("snr_db must be finite".into()));
    }
    if others.is_empty() {
        return Err(Error::SilentInterference);
    }
    for o in others {
        if o.len() != target.len() {
            return Err(Error::LengthMismatch(target.len(), o.len()));
        }
        if o.sample_rate() != target.sample_rate() {
            return Err(Error::SampleRateMismatch {
                expected: target.sample_rate(),
                actual: o.sample_rate(),
            });
        }
    }
    let p_target = target.power();
    if p_target == 0.0 {
        return Err(Error::SilentTarget);
    }
    let powers: Vec<f64> = others.iter().map(|o| o.power()).collect();
    if powers.iter().any(|&p| p == 0.0) {
        return Err(Error::SilentInterference);
    }
    let mut interference = vec![0.0f64; target.len()];
    for (o, &p) in others.iter().zip(&powers) {
        let eq = if p == powers[0] { 1.0 } else { (powers[0] / p).sqrt() };
        for (acc, &v) in interference.iter_mut().zip(o.samples()) {
            *acc += eq * v as f64;
        }
    }
    let p_sum = interference.iter().map(|v| v * v).sum::<f64>() / target.len() as f64;
    if p_sum == 0.0 {
        return Err(Error::SilentInterference);
    }
    let ratio = p_target / (p_sum * 10f64.powf(snr_db / 10.0));
    let g = if ratio == 1.0 { 1.0 } else { ratio.sqrt() };
    let mixed: Vec<f32> = target
        .samples()
        .iter()
        .zip(&interference)
        .map(|(&t, &i)| (t as f64 + g * i) as f32)
        .collect();
    Ok((target.with_samples(mixed)?, target.clone()))
}

/// `10·log10(P(target) / P(mixture − target))`.
pub fn achieved_snr_db(mixture: &AudioClip, target: &AudioClip) -> f64 {
    let resid: Vec<f32> = mixture
        .samples()
        .iter()
        .zip(target.samples())
        .map(|(&m, &t)| ((m as f64) - (t as f64)) as f32)
        .collect();
    10.0 * (target.power() / power(&resid)).log10()
}

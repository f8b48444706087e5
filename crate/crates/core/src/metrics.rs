//! SI-SDR, SI-SDR improvement and strict-tie ROC AUC.
//!
//! SI-SDR returns `f64::INFINITY` when the residual vanishes and
//! `f64::NEG_INFINITY` when the estimate is orthogonal to the reference.
//! Aggregates go through [`capped_mean`], which clamps to ±[`SISDR_CAP_DB`].
//!
//! AUC gives a tied (normal, anomalous) pair zero credit, so a detector that
//! outputs a constant scores 0, not 0.5.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub const SISDR_CAP_DB: f64 = 60.0;
/// Residual energy below this fraction of the target energy counts as zero.
pub const ZERO_RESIDUAL_RATIO: f64 = 1e-12;

/// SI-SDR in dB of `estimate` against `reference`.
pub fn si_sdr_slice<T: Copy + Into<f64>>(reference: &[T], estimate: &[T]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch(reference.len(), estimate.len()));
    }
    let ref_energy: f64 = reference.iter().map(|&v| v.into().powi(2)).sum();
    if ref_energy == 0.0 {
        return Err(Error::ZeroReference);
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(&s, &e)| s.into() * e.into()).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    if target_energy == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(&s, &e)| (alpha * s.into() - e.into()).powi(2))
        .sum();
    if residual < ZERO_RESIDUAL_RATIO * target_energy {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target_energy / residual).log10())
}

pub fn si_sdr(s: &AudioClip, s_hat: &AudioClip) -> Result<f64> {
    si_sdr_slice(s.samples(), s_hat.samples())
}

/// Difference of two possibly infinite dB values; equal operands give 0.
pub fn db_difference(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        a - b
    }
}

/// `si_sdr(s, s_hat) − si_sdr(s, x)`.
pub fn si_sdri_slice<T: Copy + Into<f64>>(s: &[T], s_hat: &[T], x: &[T]) -> Result<f64> {
    if s.len() != x.len() {
        return Err(Error::LengthMismatch(s.len(), x.len()));
    }
    Ok(db_difference(si_sdr_slice(s, s_hat)?, si_sdr_slice(s, x)?))
}

pub fn si_sdri(s: &AudioClip, s_hat: &AudioClip, x: &AudioClip) -> Result<f64> {
    si_sdri_slice(s.samples(), s_hat.samples(), x.samples())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CappedMean {
    pub mean: f64,
    pub count: usize,
    /// Items clamped to ±cap (including infinite sentinels).
    pub capped: usize,
}

pub fn capped_mean(values: &[f64], cap: f64) -> CappedMean {
    let mut sum = 0.0;
    let mut capped = 0;
    for &v in values {
        if v.abs() > cap {
            capped += 1;
        }
        sum += v.clamp(-cap, cap);
    }
    CappedMean {
        mean: if values.is_empty() { f64::NAN } else { sum / values.len() as f64 },
        count: values.len(),
        capped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub normal_scores: Vec<f64>,
    pub anomalous_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(normal_scores: Vec<f64>, anomalous_scores: Vec<f64>) -> Self {
        Self {
            normal_scores,
            anomalous_scores,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.normal_scores.is_empty() {
            return Err(Error::EmptyClass("normal"));
        }
        if self.anomalous_scores.is_empty() {
            return Err(Error::EmptyClass("anomalous"));
        }
        if self.normal_scores.iter().chain(&self.anomalous_scores).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(())
    }
}

/// Fraction of (normal, anomalous) pairs where the anomalous score is
/// strictly greater. O((N_n + N_a) log N_n).
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let mut normal = scores.normal_scores.clone();
    normal.sort_by(f64::total_cmp);
    let wins: u64 = scores
        .anomalous_scores
        .iter()
        .map(|&a| normal.partition_point(|&n| n < a) as u64)
        .sum();
    Ok(wins as f64 / (normal.len() as f64 * scores.anomalous_scores.len() as f64))
}

//! Autoencoder detector on standardized log-mel context vectors.
//!
//! 640 → 128 → 128 → 128 → 128 → 8 → 128 → 128 → 128 → 128 → 640, with batch
//! norm and ReLU after every linear layer but the last. The clip score is the
//! mean over its context vectors of the per-vector reconstruction MSE.

use std::path::Path;

use nngine::{loss, Adam, AdamConfig, Checkpoint, LayerSpec, Mode, NnError, Network, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audio::AudioClip;
use crate::config::TrainConfig;
use crate::dataset::{Label, ManifestItem};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, FeatureMatrix};
use crate::rng;

pub const MODEL_KIND: &str = "detector";
pub const HIDDEN: usize = 128;
pub const BOTTLENECK: usize = 8;
/// Standard deviations below this are treated as 1 during standardization.
pub const MIN_STD: f64 = 1e-6;

pub fn autoencoder_specs(dim: usize) -> Vec<LayerSpec> {
    let widths = [dim, HIDDEN, HIDDEN, HIDDEN, HIDDEN, BOTTLENECK, HIDDEN, HIDDEN, HIDDEN, HIDDEN, dim];
    let mut specs = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        specs.push(LayerSpec::Linear { input: w[0], output: w[1] });
        if i + 2 < widths.len() {
            specs.push(LayerSpec::BatchNorm1d { features: w[1] });
            specs.push(LayerSpec::Relu);
        }
    }
    specs
}

#[derive(Debug, Clone)]
enum Reconstructor {
    Network(Network<f32>),
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(rows: &FeatureMatrix) -> Result<Self> {
        if rows.rows == 0 {
            return Err(Error::Contract("no feature vectors to standardize".into()));
        }
        let n = rows.rows as f64;
        let mut mean = vec![0.0f64; rows.dim];
        for r in rows.data.chunks_exact(rows.dim) {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; rows.dim];
        for r in rows.data.chunks_exact(rows.dim) {
            for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var
                .iter()
                .map(|&s| {
                    let sd = (s / n).sqrt();
                    if sd < MIN_STD {
                        1.0
                    } else {
                        sd as f32
                    }
                })
                .collect(),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, rows: &mut FeatureMatrix) {
        for r in rows.data.chunks_exact_mut(rows.dim) {
            for ((v, &m), &s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub features: FeatureConfig,
    pub sample_rate: u32,
    pub standardizer: Standardizer,
    extractor: FeatureExtractor,
    net: Reconstructor,
}

impl DetectorModel {
    pub fn new(features: FeatureConfig, sample_rate: u32, seed: u64) -> Result<Self> {
        let extractor = FeatureExtractor::new(features.clone(), sample_rate)?;
        let dim = features.dim();
        let net = Network::new(&autoencoder_specs(dim), &mut rng::rng(seed))?;
        Ok(Self {
            standardizer: Standardizer::identity(dim),
            features,
            sample_rate,
            extractor,
            net: Reconstructor::Network(net),
        })
    }

    /// Model whose reconstruction equals its input (test hook).
    pub fn identity_stub(features: FeatureConfig, sample_rate: u32) -> Result<Self> {
        let extractor = FeatureExtractor::new(features.clone(), sample_rate)?;
        Ok(Self {
            standardizer: Standardizer::identity(features.dim()),
            features,
            sample_rate,
            extractor,
            net: Reconstructor::Identity,
        })
    }

    pub fn network(&self) -> Option<&Network<f32>> {
        match &self.net {
            Reconstructor::Network(n) => Some(n),
            Reconstructor::Identity => None,
        }
    }

    /// Standardized context vectors of a clip.
    pub fn vectors(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.sample_rate,
                actual: clip.sample_rate(),
            });
        }
        let mut v = self.extractor.vectors(clip)?;
        self.standardizer.apply(&mut v);
        Ok(v)
    }

    /// Per-vector reconstruction MSE in eval mode.
    pub fn vector_errors(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        let v = self.vectors(clip)?;
        let recon = match &self.net {
            Reconstructor::Identity => return Ok(vec![0.0; v.rows]),
            Reconstructor::Network(net) => net.infer(Tensor::new(vec![v.rows, v.dim], v.data.clone())?)?,
        };
        Ok(recon
            .data()
            .chunks_exact(v.dim)
            .zip(v.data.chunks_exact(v.dim))
            .map(|(r, x)| r.iter().zip(x).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / v.dim as f64)
            .collect())
    }

    /// Mean per-vector reconstruction MSE.
    pub fn anomaly_score(&self, clip: &AudioClip) -> Result<f64> {
        let e = self.vector_errors(clip)?;
        Ok(e.iter().sum::<f64>() / e.len() as f64)
    }

    pub fn save(&self, dir: &Path, seed: u64, train: Option<&TrainConfig>, epochs: usize, extra: Value) -> Result<()> {
        let Reconstructor::Network(net) = &self.net else {
            return Err(Error::Contract("identity stub cannot be saved".into()));
        };
        let mut meta_extra = json!({
            "features": self.features,
            "sample_rate": self.sample_rate,
            "standardization": self.standardizer,
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta_extra, extra) {
            m.extend(e);
        }
        Checkpoint::new(
            MODEL_KIND,
            vec![("autoencoder".into(), net.clone())],
            seed,
            serde_json::to_value(train)?,
            epochs,
            meta_extra,
        )
        .save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(dir)?;
        if ckpt.meta.model_kind != MODEL_KIND {
            return Err(Error::Contract(format!(
                "{} holds a {} checkpoint, expected a detector",
                dir.display(),
                ckpt.meta.model_kind
            )));
        }
        let extra = &ckpt.meta.extra;
        let features: FeatureConfig = serde_json::from_value(extra["features"].clone())?;
        let sample_rate: u32 = serde_json::from_value(extra["sample_rate"].clone())?;
        let standardizer: Standardizer = serde_json::from_value(extra["standardization"].clone())?;
        let net = ckpt
            .network("autoencoder")
            .cloned()
            .ok_or_else(|| Error::Contract("detector checkpoint lacks the autoencoder".into()))?;
        if net.specs() != autoencoder_specs(features.dim()) || standardizer.mean.len() != features.dim() {
            return Err(Error::Contract("detector layers do not match the recorded feature config".into()));
        }
        Ok(Self {
            extractor: FeatureExtractor::new(features.clone(), sample_rate)?,
            features,
            sample_rate,
            standardizer,
            net: Reconstructor::Network(net),
        })
    }
}

pub fn check_training_items(items: &[&ManifestItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Contract("empty detector training split".into()));
    }
    if let Some(bad) = items.iter().find(|i| i.label != Label::Normal) {
        return Err(Error::Contract(format!("anomalous item {} in detector training split", bad.id)));
    }
    Ok(())
}

/// Fits the standardizer on all context vectors of `clips`, then trains the
/// autoencoder with MSE on shuffled mini-batches. A trailing batch of one
/// vector is skipped (batch norm needs two).
pub fn train_detector(
    model: &mut DetectorModel,
    clips: &[AudioClip],
    train: &TrainConfig,
    shuffle_seed: u64,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::Contract("empty detector training split".into()));
    }
    if train.batch < 2 {
        return Err(Error::Config("detector batch must be at least 2".into()));
    }
    let dim = model.features.dim();
    let mut data = Vec::new();
    for c in clips {
        if c.sample_rate() != model.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: model.sample_rate,
                actual: c.sample_rate(),
            });
        }
        data.extend(model.extractor.vectors(c)?.data);
    }
    let mut all = FeatureMatrix {
        rows: data.len() / dim,
        dim,
        data,
    };
    model.standardizer = Standardizer::fit(&all)?;
    model.standardizer.apply(&mut all);

    let Reconstructor::Network(net) = &mut model.net else {
        return Err(Error::Contract("identity stub cannot be trained".into()));
    };
    let mut adam = Adam::new(AdamConfig::with_lr(train.lr))?;
    let mut r = rng::rng(shuffle_seed);
    let mut order: Vec<usize> = (0..all.rows).collect();
    let mut losses = Vec::with_capacity(train.epochs);
    let mut batch = Vec::with_capacity(train.batch * dim);
    for epoch in 1..=train.epochs {
        let div = |e: NnError| match e {
            NnError::NonFiniteLoss | NnError::NonFinite { .. } => Error::Divergence { epoch },
            other => Error::Nn(other),
        };
        order.shuffle(&mut r);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(train.batch).filter(|c| c.len() >= 2) {
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(all.row(i));
            }
            let x = Tensor::new(vec![chunk.len(), dim], batch.clone())?;
            let (y, cache) = net.forward(x.clone(), Mode::Train).map_err(div)?;
            let (l, g) = loss::mse(&y, &x).map_err(div)?;
            let (grads, _) = net.backward(&cache, g)?;
            adam.step(net.params_mut(), &grads)?;
            total += l * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::Contract("fewer than two training vectors".into()));
        }
        let mean = total / seen as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_matches_table() {
        let specs = autoencoder_specs(640);
        let linears: Vec<(usize, usize)> = specs
            .iter()
            .filter_map(|s| match s {
                LayerSpec::Linear { input, output } => Some((*input, *output)),
                _ => None,
            })
            .collect();
        assert_eq!(
            linears,
            vec![
                (640, 128),
                (128, 128),
                (128, 128),
                (128, 128),
                (128, 8),
                (8, 128),
                (128, 128),
                (128, 128),
                (128, 128),
                (128, 640)
            ]
        );
        assert_eq!(specs.len(), 10 + 9 * 2);
        assert!(matches!(specs.last(), Some(LayerSpec::Linear { .. })));
    }

    #[test]
    fn identity_stub_scores_zero() {
        let m = DetectorModel::identity_stub(FeatureConfig::default(), 16000).unwrap();
        let clip = AudioClip::new((0..16000).map(|i| (i as f32 * 0.01).sin()).collect(), 16000).unwrap();
        assert_eq!(m.anomaly_score(&clip).unwrap(), 0.0);
    }

    #[test]
    fn standardizer_centres_and_scales() {
        let rows = FeatureMatrix {
            rows: 4,
            dim: 2,
            data: vec![1.0, 5.0, 3.0, 5.0, 5.0, 5.0, 7.0, 5.0],
        };
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.mean, vec![4.0, 5.0]);
        assert_eq!(s.std[1], 1.0);
        let mut r = rows.clone();
        s.apply(&mut r);
        let col: Vec<f32> = r.data.iter().step_by(2).copied().collect();
        assert!((col.iter().map(|v| v * v).sum::<f32>() / 4.0 - 1.0).abs() < 1e-6);
    }
}

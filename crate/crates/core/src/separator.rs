//! Masked time-domain separator: `y = Dec(Enc(x) ⊙ M(Enc(x)))`.
//!
//! Encoder: strided conv + ReLU. Mask network: layer norm over channels,
//! 1×1 conv, dilated residual conv blocks with PReLU, 1×1 conv, sigmoid.
//! Decoder: transposed conv back to one waveform.

use std::path::Path;

use nngine::{loss, Adam, AdamConfig, Checkpoint, LayerSpec, Mode, NnError, Network, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audio::AudioClip;
use crate::config::{SeparatorConfig, TrainConfig};
use crate::dataset::{Label, ManifestItem};
use crate::error::{Error, Result};
use crate::metrics::{capped_mean, si_sdr, si_sdri, CappedMean, SISDR_CAP_DB};
use crate::rng;
use crate::synth::{section_name, MachineType};

pub const MODEL_KIND: &str = "separator";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum SeparatorScope {
    IdSep { machine_type: MachineType, section: u8 },
    TypeSep { machine_type: MachineType },
}

impl SeparatorScope {
    pub fn machine_type(&self) -> MachineType {
        match self {
            SeparatorScope::IdSep { machine_type, .. } | SeparatorScope::TypeSep { machine_type } => *machine_type,
        }
    }

    /// Directory name under `models/`.
    pub fn dir_name(&self) -> String {
        match self {
            SeparatorScope::IdSep { machine_type, section } => format!("sep_id_{machine_type}_{}", section_name(*section)),
            SeparatorScope::TypeSep { machine_type } => format!("sep_type_{machine_type}"),
        }
    }

    /// Checks that a training split fits this scope: normal items only,
    /// patterns 1 to 3 of one section (ID) or pattern 1 of any section (type).
    pub fn check_items(&self, items: &[&ManifestItem]) -> Result<()> {
        if items.is_empty() {
            return Err(Error::Contract(format!("empty training split for {}", self.dir_name())));
        }
        if let Some(bad) = items.iter().find(|i| i.label != Label::Normal) {
            return Err(Error::Contract(format!("anomalous item {} in separator training split", bad.id)));
        }
        if let Some(bad) = items.iter().find(|i| i.machine_type != self.machine_type()) {
            return Err(Error::Contract(format!("item {} has the wrong machine type", bad.id)));
        }
        match self {
            SeparatorScope::IdSep { section, .. } => {
                if let Some(bad) = items.iter().find(|i| i.section_id() != *section) {
                    return Err(Error::Contract(format!("item {} is from another section", bad.id)));
                }
                for p in 1..=3 {
                    if !items.iter().any(|i| i.pattern == p) {
                        return Err(Error::Contract(format!(
                            "ID separator training needs mixing patterns 1, 2 and 3; pattern {p} missing"
                        )));
                    }
                }
            }
            SeparatorScope::TypeSep { .. } => {
                if let Some(bad) = items.iter().find(|i| i.pattern != 1) {
                    return Err(Error::Contract(format!(
                        "type separator trains on noise-only mixtures; item {} has pattern {}",
                        bad.id, bad.pattern
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Anything that maps a mixture to a same-length estimate.
pub trait Separate {
    fn separate(&self, mixture: &AudioClip) -> Result<AudioClip>;
}

/// Returns the input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl Separate for PassThrough {
    fn separate(&self, mixture: &AudioClip) -> Result<AudioClip> {
        Ok(mixture.clone())
    }
}

/// Replaces the predicted mask (test hook).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOverride {
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct SeparatorModel {
    pub config: SeparatorConfig,
    pub scope: SeparatorScope,
    pub sample_rate: u32,
    encoder: Network<f32>,
    mask: Network<f32>,
    decoder: Network<f32>,
    mask_override: Option<MaskOverride>,
}

fn encoder_specs(c: &SeparatorConfig) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv1d {
            input: 1,
            output: c.enc_filters,
            kernel: c.enc_kernel,
            stride: c.enc_stride,
            dilation: 1,
            padding: 0,
        },
        LayerSpec::Relu,
    ]
}

fn mask_specs(c: &SeparatorConfig) -> Vec<LayerSpec> {
    let pointwise = |input, output| LayerSpec::Conv1d {
        input,
        output,
        kernel: 1,
        stride: 1,
        dilation: 1,
        padding: 0,
    };
    let mut specs = vec![
        LayerSpec::LayerNorm { channels: c.enc_filters },
        pointwise(c.enc_filters, c.mask_channels),
    ];
    let mut dilation = 1;
    for _ in 0..c.mask_blocks {
        specs.push(LayerSpec::Residual {
            body: vec![
                LayerSpec::Conv1d {
                    input: c.mask_channels,
                    output: c.mask_channels,
                    kernel: 3,
                    stride: 1,
                    dilation,
                    padding: dilation,
                },
                LayerSpec::Prelu { channels: c.mask_channels },
            ],
        });
        dilation *= c.dilation_growth;
    }
    specs.push(pointwise(c.mask_channels, c.enc_filters));
    specs.push(LayerSpec::Sigmoid);
    specs
}

fn decoder_specs(c: &SeparatorConfig) -> Vec<LayerSpec> {
    vec![LayerSpec::Conv1dTranspose {
        input: c.enc_filters,
        output: 1,
        kernel: c.enc_kernel,
        stride: c.enc_stride,
        dilation: 1,
        padding: 0,
    }]
}

fn divergence(epoch: usize) -> impl Fn(NnError) -> Error {
    move |e| match e {
        NnError::NonFiniteLoss | NnError::NonFinite { .. } => Error::Divergence { epoch },
        other => Error::Nn(other),
    }
}

impl SeparatorModel {
    pub fn new(config: SeparatorConfig, scope: SeparatorScope, sample_rate: u32, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let encoder = Network::new(&encoder_specs(&config), &mut r)?;
        let mask = Network::new(&mask_specs(&config), &mut r)?;
        let mut decoder = Network::new(&decoder_specs(&config), &mut r)?;
        for t in decoder.params_mut().into_iter().skip(1) {
            t.data_mut().fill(0.0);
        }
        Ok(Self {
            config,
            scope,
            sample_rate,
            encoder,
            mask,
            decoder,
            mask_override: None,
        })
    }

    pub fn with_mask_override(mut self, mask: Option<MaskOverride>) -> Self {
        self.mask_override = mask;
        self
    }

    pub fn encoder(&self) -> &Network<f32> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network<f32> {
        &self.decoder
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.mask.parameter_count() + self.decoder.parameter_count()
    }

    /// Smallest length ≥ `len` that the encoder frames exactly.
    pub fn padded_len(&self, len: usize) -> usize {
        let (k, s) = (self.config.enc_kernel, self.config.enc_stride);
        let l = len.max(k);
        let r = (l - k) % s;
        if r == 0 {
            l
        } else {
            l + s - r
        }
    }

    fn batch_tensor(&self, clips: &[&[f32]]) -> Result<Tensor<f32>> {
        let len = clips[0].len();
        let padded = self.padded_len(len);
        let mut data = vec![0.0f32; clips.len() * padded];
        for (row, c) in data.chunks_exact_mut(padded).zip(clips) {
            row[..len].copy_from_slice(c);
        }
        Ok(Tensor::new(vec![clips.len(), 1, padded], data)?)
    }

    fn infer_padded(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let e = self.encoder.infer(x)?;
        let p = match self.mask_override {
            Some(MaskOverride::Ones) => e,
            Some(MaskOverride::Zeros) => Tensor::zeros_like(&e),
            None => {
                let m = self.mask.infer(e.clone())?;
                e.mul(&m)?
            }
        };
        Ok(self.decoder.infer(p)?)
    }

    /// Separates each equal-length clip in `batch`.
    pub fn separate_batch(&self, batch: &[&AudioClip]) -> Result<Vec<AudioClip>> {
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        for c in batch {
            if c.sample_rate() != self.sample_rate {
                return Err(Error::SampleRateMismatch {
                    expected: self.sample_rate,
                    actual: c.sample_rate(),
                });
            }
            if c.len() < self.config.enc_kernel {
                return Err(Error::TooShort {
                    len: c.len(),
                    min: self.config.enc_kernel,
                });
            }
            if c.len() != first.len() {
                return Err(Error::LengthMismatch(first.len(), c.len()));
            }
        }
        let len = first.len();
        let samples: Vec<&[f32]> = batch.iter().map(|c| c.samples()).collect();
        let y = self.infer_padded(self.batch_tensor(&samples)?)?;
        let padded = y.dim(2);
        y.data()
            .chunks_exact(padded)
            .map(|row| AudioClip::new(row[..len].to_vec(), self.sample_rate))
            .collect()
    }

    pub fn save(&self, dir: &Path, seed: u64, train: Option<&TrainConfig>, epochs: usize, extra: Value) -> Result<()> {
        let mut meta_extra = json!({
            "scope": self.scope,
            "config": self.config,
            "sample_rate": self.sample_rate,
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta_extra, extra) {
            m.extend(e);
        }
        let ckpt = Checkpoint::new(
            MODEL_KIND,
            vec![
                ("encoder".into(), self.encoder.clone()),
                ("mask".into(), self.mask.clone()),
                ("decoder".into(), self.decoder.clone()),
            ],
            seed,
            serde_json::to_value(train)?,
            epochs,
            meta_extra,
        );
        ckpt.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(dir)?;
        if ckpt.meta.model_kind != MODEL_KIND {
            return Err(Error::Contract(format!(
                "{} holds a {} checkpoint, expected a separator",
                dir.display(),
                ckpt.meta.model_kind
            )));
        }
        let extra = &ckpt.meta.extra;
        let scope: SeparatorScope = serde_json::from_value(extra["scope"].clone())?;
        let config: SeparatorConfig = serde_json::from_value(extra["config"].clone())?;
        let sample_rate: u32 = serde_json::from_value(extra["sample_rate"].clone())?;
        let net = |name: &str| {
            ckpt.network(name)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("separator checkpoint lacks network '{name}'")))
        };
        let model = Self {
            encoder: net("encoder")?,
            mask: net("mask")?,
            decoder: net("decoder")?,
            config,
            scope,
            sample_rate,
            mask_override: None,
        };
        let expect = (encoder_specs(&model.config), mask_specs(&model.config), decoder_specs(&model.config));
        if (model.encoder.specs(), model.mask.specs(), model.decoder.specs()) != expect {
            return Err(Error::Contract("separator layers do not match the recorded config".into()));
        }
        Ok(model)
    }

    /// One optimizer step on a batch of equal-length (mixture, target) crops.
    /// Returns the mean L1 loss before the update.
    fn train_step(&mut self, adam: &mut Adam<f32>, mixes: &[&[f32]], targets: &[&[f32]], epoch: usize) -> Result<f64> {
        let div = divergence(epoch);
        let len = mixes[0].len();
        let x = self.batch_tensor(mixes)?;
        let padded = x.dim(2);
        let (e, enc_cache) = self.encoder.forward(x, Mode::Train).map_err(&div)?;
        let (m, mask_cache) = self.mask.forward(e.clone(), Mode::Train).map_err(&div)?;
        let p = e.mul(&m)?;
        let (y, dec_cache) = self.decoder.forward(p, Mode::Train).map_err(&div)?;

        let b = mixes.len();
        let mut pred = Vec::with_capacity(b * len);
        for row in y.data().chunks_exact(padded) {
            pred.extend_from_slice(&row[..len]);
        }
        let pred = Tensor::new(vec![b, len], pred)?;
        let target = Tensor::new(vec![b, len], targets.concat())?;
        let (loss, g) = loss::l1(&pred, &target).map_err(&div)?;
        let mut dy = vec![0.0f32; b * padded];
        for (dst, src) in dy.chunks_exact_mut(padded).zip(g.data().chunks_exact(len)) {
            dst[..len].copy_from_slice(src);
        }
        let dy = Tensor::new(vec![b, 1, padded], dy)?;

        let (g_dec, dp) = self.decoder.backward(&dec_cache, dy)?;
        let dm = dp.mul(&e)?;
        let de_direct = dp.mul(&m)?;
        let (g_mask, mut de) = self.mask.backward(&mask_cache, dm)?;
        de.add_assign(&de_direct)?;
        let (g_enc, _) = self.encoder.backward(&enc_cache, de)?;

        let grads: Vec<Tensor<f32>> = g_enc.into_iter().chain(g_mask).chain(g_dec).collect();
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        let params: Vec<&mut Tensor<f32>> = self
            .encoder
            .params_mut()
            .into_iter()
            .chain(self.mask.params_mut())
            .chain(self.decoder.params_mut())
            .collect();
        adam.step(params, &grads)?;
        Ok(loss)
    }
}

impl Separate for SeparatorModel {
    fn separate(&self, mixture: &AudioClip) -> Result<AudioClip> {
        Ok(self.separate_batch(&[mixture])?.remove(0))
    }
}

/// Trains on random fixed-length crops taken at the same offset from each
/// mixture and its ground truth. Item order is reshuffled every epoch.
/// `on_epoch(epoch, mean_loss)` is called after each epoch (1-based).
pub fn train_separator(
    model: &mut SeparatorModel,
    pairs: &[(AudioClip, AudioClip)],
    train: &TrainConfig,
    crop: usize,
    crop_seed: u64,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty separator training split".into()));
    }
    if train.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    for (mix, gt) in pairs {
        if mix.len() != gt.len() {
            return Err(Error::LengthMismatch(mix.len(), gt.len()));
        }
        if mix.len() < crop {
            return Err(Error::TooShort { len: mix.len(), min: crop });
        }
        if mix.sample_rate() != model.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: model.sample_rate,
                actual: mix.sample_rate(),
            });
        }
    }
    let mut adam = Adam::new(AdamConfig::with_lr(train.lr))?;
    let mut r = rng::rng(crop_seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch) {
            let mut mixes = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (mix, gt) = &pairs[i];
                let start = r.random_range(0..=mix.len() - crop);
                mixes.push(&mix.samples()[start..start + crop]);
                targets.push(&gt.samples()[start..start + crop]);
            }
            let l = model.train_step(&mut adam, &mixes, &targets, epoch)?;
            total += l * chunk.len() as f64;
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SisdriRow {
    pub item_id: String,
    pub label: Label,
    pub si_sdr_mixture: f64,
    pub si_sdr_estimate: f64,
    pub si_sdri: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SisdriSummary {
    pub normal: Option<CappedMean>,
    pub anomalous: Option<CappedMean>,
}

/// Per-item SI-SDR of mixture and estimate against the ground truth.
pub fn sisdri_row(item: &ManifestItem, separator: &dyn Separate, mixture: &AudioClip, truth: &AudioClip) -> Result<SisdriRow> {
    let est = separator.separate(mixture)?;
    Ok(SisdriRow {
        item_id: item.id.clone(),
        label: item.label,
        si_sdr_mixture: si_sdr(truth, mixture)?,
        si_sdr_estimate: si_sdr(truth, &est)?,
        si_sdri: si_sdri(truth, &est, mixture)?,
    })
}

pub fn summarize_sisdri(rows: &[SisdriRow]) -> SisdriSummary {
    let mean_of = |label| {
        let v: Vec<f64> = rows.iter().filter(|r| r.label == label).map(|r| r.si_sdri).collect();
        (!v.is_empty()).then(|| capped_mean(&v, SISDR_CAP_DB))
    };
    SisdriSummary {
        normal: mean_of(Label::Normal),
        anomalous: mean_of(Label::Anomalous),
    }
}

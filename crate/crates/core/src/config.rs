//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{NoiseKind, DEFAULT_SAMPLE_RATE};
use crate::error::{io_at, Error, Result};
use crate::features::FeatureConfig;
use crate::synth::{AnomalyKind, MachineProfile, MachineType, SECTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub separator: SeparatorSection,
    pub detector: DetectorSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dataset: DatasetConfig::default(),
            separator: SeparatorSection::default(),
            detector: DetectorSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub machine_types: Vec<MachineType>,
    /// Reference count per mixing pattern and section, before scaling.
    pub items_per_pattern: usize,
    /// Eval items per section (half anomalous), before scaling.
    pub eval_items: usize,
    /// Scale applied to `items_per_pattern`.
    pub scale: f64,
    /// Scale applied to `eval_items`.
    pub eval_scale: f64,
    pub snr_db: Vec<f64>,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub noise: NoiseKind,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub severity: f64,
    /// Replaces the built-in profile with the same type and section.
    pub profiles: Vec<MachineProfile>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            machine_types: MachineType::ALL.to_vec(),
            items_per_pattern: 990,
            eval_items: 100,
            scale: 1.0 / 30.0,
            eval_scale: 1.0,
            snr_db: vec![-5.0, 0.0, 5.0],
            duration_s: 4.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            noise: NoiseKind::Pink,
            anomaly_kinds: AnomalyKind::ALL.to_vec(),
            severity: 0.3,
            profiles: Vec::new(),
        }
    }
}

impl DatasetConfig {
    pub fn scaled_items_per_pattern(&self) -> usize {
        (self.items_per_pattern as f64 * self.scale).round() as usize
    }

    pub fn scaled_eval_items(&self) -> usize {
        (self.eval_items as f64 * self.eval_scale).round() as usize
    }

    pub fn profile(&self, machine_type: MachineType, section: u8) -> Result<MachineProfile> {
        match self
            .profiles
            .iter()
            .find(|p| p.machine_type == machine_type && p.section == section)
        {
            Some(p) => Ok(p.clone()),
            None => MachineProfile::preset(machine_type, section),
        }
    }

    pub fn clip_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorConfig {
    pub enc_filters: usize,
    pub enc_kernel: usize,
    pub enc_stride: usize,
    pub mask_blocks: usize,
    pub mask_channels: usize,
    pub dilation_growth: usize,
    pub n_sources: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            enc_filters: 64,
            enc_kernel: 32,
            enc_stride: 16,
            mask_blocks: 4,
            mask_channels: 64,
            dilation_growth: 2,
            n_sources: 1,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources != 1 {
            return Err(Error::Config("separator n_sources must be 1".into()));
        }
        let counts = [
            self.enc_filters,
            self.enc_kernel,
            self.enc_stride,
            self.mask_blocks,
            self.mask_channels,
            self.dilation_growth,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("separator sizes must be positive".into()));
        }
        if self.enc_stride > self.enc_kernel {
            return Err(Error::Config("separator enc_stride must not exceed enc_kernel".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorSection {
    pub model: SeparatorConfig,
    pub id_sep: TrainConfig,
    pub type_sep: TrainConfig,
    /// Length of the random training crops.
    pub crop_s: f64,
}

impl Default for SeparatorSection {
    fn default() -> Self {
        let train = TrainConfig {
            batch: 2,
            lr: 1e-4,
            epochs: 50,
        };
        Self {
            model: SeparatorConfig::default(),
            id_sep: train.clone(),
            type_sep: train,
            crop_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub features: FeatureConfig,
    pub train: TrainConfig,
    /// One detector per section instead of one per machine type.
    pub per_section: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            train: TrainConfig {
                batch: 512,
                lr: 1e-3,
                epochs: 100,
            },
            per_section: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineName {
    Baseline,
    AfterTypeSep,
    AfterIdSep,
    OeSep,
}

impl PipelineName {
    pub const ALL: [PipelineName; 4] = [
        PipelineName::Baseline,
        PipelineName::AfterTypeSep,
        PipelineName::AfterIdSep,
        PipelineName::OeSep,
    ];

    pub fn key(self) -> &'static str {
        match self {
            PipelineName::Baseline => "baseline",
            PipelineName::AfterTypeSep => "after_type_sep",
            PipelineName::AfterIdSep => "after_id_sep",
            PipelineName::OeSep => "oe_sep",
        }
    }

    /// Row label in the Markdown table.
    pub fn label(self) -> &'static str {
        match self {
            PipelineName::Baseline => "Baseline",
            PipelineName::AfterTypeSep => "After-Type-Sep",
            PipelineName::AfterIdSep => "After-ID-Sep",
            PipelineName::OeSep => "Separation-based OE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline '{s}' (expected baseline, after_type_sep, after_id_sep or oe_sep)")))
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let p = Self::parse(part)?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no pipelines selected".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pipelines: Vec<PipelineName>,
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pipelines: PipelineName::ALL.to_vec(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.machine_types.is_empty() {
            return Err(Error::Config("dataset.machine_types is empty".into()));
        }
        if d.snr_db.is_empty() || d.snr_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset.snr_db must be a nonempty list of finite values".into()));
        }
        if !(d.scale > 0.0) || !(d.eval_scale > 0.0) {
            return Err(Error::Config("dataset scales must be positive".into()));
        }
        if d.scaled_items_per_pattern() == 0 {
            return Err(Error::Config("dataset.items_per_pattern × scale rounds to zero".into()));
        }
        let eval = d.scaled_eval_items();
        if eval < 2 || eval % 2 != 0 {
            return Err(Error::Config(format!(
                "eval items per section must be even and ≥ 2 (half normal, half anomalous), got {eval}"
            )));
        }
        if !(d.duration_s > 0.0) || d.sample_rate == 0 {
            return Err(Error::Config("dataset duration and sample rate must be positive".into()));
        }
        if d.anomaly_kinds.is_empty() {
            return Err(Error::Config("dataset.anomaly_kinds is empty".into()));
        }
        if !(d.severity > 0.0 && d.severity <= 1.0) {
            return Err(Error::Config("dataset.severity must be in (0, 1]".into()));
        }
        for p in &d.profiles {
            if !SECTIONS.contains(&p.section) {
                return Err(Error::Config(format!("profile section {} out of range", p.section)));
            }
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.separator.model.validate()?;
        let s = &self.separator;
        for (name, t) in [("separator.id_sep", &s.id_sep), ("separator.type_sep", &s.type_sep), ("detector.train", &self.detector.train)] {
            if t.batch == 0 || !(t.lr > 0.0) {
                return Err(Error::Config(format!("{name}: batch and lr must be positive")));
            }
        }
        if self.detector.train.batch < 2 {
            return Err(Error::Config("detector.train.batch must be ≥ 2 (batch normalization)".into()));
        }
        let crop = (s.crop_s * d.sample_rate as f64).round() as usize;
        if crop < s.model.enc_kernel || crop > d.clip_samples() {
            return Err(Error::Config(format!(
                "separator.crop_s gives {crop} samples; must be between enc_kernel and the clip length"
            )));
        }
        let f = &self.detector.features;
        if f.n_mels == 0 || f.context == 0 || !f.frame_size.is_power_of_two() || f.hop_size == 0 || f.hop_size > f.frame_size {
            return Err(Error::Config("detector.features invalid".into()));
        }
        if d.clip_samples() < f.min_samples() {
            return Err(Error::Config("clips too short for one detector context vector".into()));
        }
        if self.eval.pipelines.is_empty() {
            return Err(Error::Config("eval.pipelines is empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn crop_samples(&self) -> usize {
        (self.separator.crop_s * self.dataset.sample_rate as f64).round() as usize
    }
}

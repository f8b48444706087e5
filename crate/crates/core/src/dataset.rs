//! Dataset generation and the JSON Lines manifest.
//!
//! Layout under the data directory:
//! `manifest.jsonl` and `audio/<id>_mix.wav`, `audio/<id>_gt.wav`. Paths in
//! the manifest are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, seeded_noise, write_wav, AudioClip, WavEncoding};
use crate::config::DatasetConfig;
use crate::error::{io_at, Error, Result};
use crate::rng;
use crate::synth::{mix_at_snr, render_machine, section_name, AnomalyKind, AnomalySpec, MachineType, SECTIONS};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const AUDIO_DIR: &str = "audio";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainSepId,
    TrainSepType,
    TrainDetector,
    Eval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainSepId, Split::TrainSepType, Split::TrainDetector, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainSepId => "train_sep_id",
            Split::TrainSepType => "train_sep_type",
            Split::TrainDetector => "train_detector",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub split: Split,
    pub machine_type: MachineType,
    pub section: String,
    pub pattern: u8,
    pub snr_db: f64,
    pub label: Label,
    pub anomaly_kind: Option<AnomalyKind>,
    pub mixture_path: String,
    pub ground_truth_path: String,
    pub seed: u64,
}

impl ManifestItem {
    pub fn section_id(&self) -> u8 {
        self.section.parse().unwrap_or(u8::MAX)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory holding the manifest; item paths are relative to it.
    pub root: PathBuf,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_at(path))?;
        let mut items = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_at(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let item: ManifestItem = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            items.push(item);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, items })
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let file = std::fs::File::create(&path).map_err(io_at(&path))?;
        let mut w = std::io::BufWriter::new(file);
        for item in &self.items {
            let line = serde_json::to_string(item)?;
            writeln!(w, "{line}").map_err(io_at(&path))?;
        }
        w.flush().map_err(io_at(&path))?;
        Ok(path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn select(&self, split: Split, machine_type: MachineType, section: Option<u8>) -> Vec<&ManifestItem> {
        self.split(split)
            .filter(|i| i.machine_type == machine_type && section.is_none_or(|s| i.section_id() == s))
            .collect()
    }

    pub fn mixture(&self, item: &ManifestItem) -> Result<AudioClip> {
        read_wav(&self.root.join(&item.mixture_path))
    }

    pub fn ground_truth(&self, item: &ManifestItem) -> Result<AudioClip> {
        read_wav(&self.root.join(&item.ground_truth_path))
    }

    /// Item counts keyed by (split, machine type, section).
    pub fn counts(&self) -> BTreeMap<(Split, MachineType, String), usize> {
        let mut out = BTreeMap::new();
        for i in &self.items {
            *out.entry((i.split, i.machine_type, i.section.clone())).or_insert(0) += 1;
        }
        out
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for i in &self.items {
            *out.entry(i.split).or_insert(0) += 1;
        }
        out
    }
}

/// Recipe for one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub machine_type: MachineType,
    pub section: u8,
    pub pattern: u8,
    pub interferer: Option<u8>,
    pub snr_db: f64,
    pub anomaly: Option<AnomalySpec>,
    pub seed: u64,
}

impl MixSpec {
    pub fn label(&self) -> Label {
        if self.anomaly.is_some() {
            Label::Anomalous
        } else {
            Label::Normal
        }
    }

    /// Renders (mixture, ground truth).
    pub fn render(&self, cfg: &DatasetConfig) -> Result<(AudioClip, AudioClip)> {
        let target = cfg
            .profile(self.machine_type, self.section)?
            .with_seed(rng::substream(self.seed, "target"));
        let s = render_machine(&target, cfg.duration_s, cfg.sample_rate, self.anomaly.as_ref())?;
        let noise = seeded_noise(s.len(), rng::substream(self.seed, "noise"), cfg.noise, cfg.sample_rate)?;
        let mut others = Vec::with_capacity(2);
        if let Some(sec) = self.interferer {
            let p = cfg
                .profile(self.machine_type, sec)?
                .with_seed(rng::substream(self.seed, "interferer"));
            others.push(render_machine(&p, cfg.duration_s, cfg.sample_rate, None)?);
        }
        others.push(noise);
        mix_at_snr(&s, &others, self.snr_db)
    }
}

fn other_sections(section: u8) -> Vec<u8> {
    SECTIONS.iter().copied().filter(|&s| s != section).collect()
}

fn pick_snr(cfg: &DatasetConfig, seed: u64) -> f64 {
    let mut r = rng::rng(rng::substream(seed, "snr"));
    cfg.snr_db[r.random_range(0..cfg.snr_db.len())]
}

/// Mixture recipes for a section's separator training items, patterns 1 to 3.
pub fn train_specs(cfg: &DatasetConfig, dataset_seed: u64, machine_type: MachineType, section: u8) -> Vec<MixSpec> {
    let per = cfg.scaled_items_per_pattern();
    let mut out = Vec::with_capacity(3 * per);
    let others = other_sections(section);
    for pattern in 1..=3u8 {
        let label = format!("train/{machine_type}/{section}/{pattern}");
        for i in 0..per {
            let seed = rng::item_seed(dataset_seed, &label, i as u64);
            out.push(MixSpec {
                machine_type,
                section,
                pattern,
                interferer: (pattern > 1).then(|| others[pattern as usize - 2]),
                snr_db: pick_snr(cfg, seed),
                anomaly: None,
                seed,
            });
        }
    }
    out
}

/// Eval recipes for one section: the first half normal, the second half
/// anomalous with kinds cycling through `cfg.anomaly_kinds`.
pub fn eval_specs(cfg: &DatasetConfig, dataset_seed: u64, machine_type: MachineType, section: u8) -> Result<Vec<MixSpec>> {
    let total = cfg.scaled_eval_items();
    let label = format!("eval/{machine_type}/{section}");
    (0..total)
        .map(|i| {
            let seed = rng::item_seed(dataset_seed, &label, i as u64);
            let anomaly = if i < total / 2 {
                None
            } else {
                let kind = cfg.anomaly_kinds[(i - total / 2) % cfg.anomaly_kinds.len()];
                Some(AnomalySpec::new(kind, cfg.severity)?)
            };
            Ok(MixSpec {
                machine_type,
                section,
                pattern: 1,
                interferer: None,
                snr_db: pick_snr(cfg, seed),
                anomaly,
                seed,
            })
        })
        .collect()
}

fn emit(
    spec: &MixSpec,
    id: &str,
    cfg: &DatasetConfig,
    root: &Path,
) -> Result<(String, String)> {
    let (mix, gt) = spec.render(cfg)?;
    let mix_rel = format!("{AUDIO_DIR}/{id}_mix.wav");
    let gt_rel = format!("{AUDIO_DIR}/{id}_gt.wav");
    write_wav(&mix, &root.join(&mix_rel), WavEncoding::Float32)?;
    write_wav(&gt, &root.join(&gt_rel), WavEncoding::Float32)?;
    Ok((mix_rel, gt_rel))
}

fn item(spec: &MixSpec, id: String, split: Split, paths: &(String, String)) -> ManifestItem {
    ManifestItem {
        id,
        split,
        machine_type: spec.machine_type,
        section: section_name(spec.section),
        pattern: spec.pattern,
        snr_db: spec.snr_db,
        label: spec.label(),
        anomaly_kind: spec.anomaly.map(|a| a.kind),
        mixture_path: paths.0.clone(),
        ground_truth_path: paths.1.clone(),
        seed: spec.seed,
    }
}

/// Renders every split into `out_dir` and writes the manifest.
///
/// Separator-by-type and detector training reuse the pattern-1 items of the
/// per-section training set, so those rows point at the same files.
pub fn build_dataset(cfg: &DatasetConfig, dataset_seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir.join(AUDIO_DIR)).map_err(io_at(out_dir))?;
    let mut items = Vec::new();
    for &mt in &cfg.machine_types {
        let mut pattern_one = Vec::new();
        for &section in &SECTIONS {
            for (i, spec) in train_specs(cfg, dataset_seed, mt, section).iter().enumerate() {
                let per = cfg.scaled_items_per_pattern();
                let id = format!("{mt}_{}_p{}_{:04}", section_name(section), spec.pattern, i % per);
                let paths = emit(spec, &id, cfg, out_dir)?;
                if spec.pattern == 1 {
                    pattern_one.push((spec.clone(), id.clone(), paths.clone()));
                }
                items.push(item(spec, id, Split::TrainSepId, &paths));
            }
        }
        for split in [Split::TrainSepType, Split::TrainDetector] {
            for (spec, id, paths) in &pattern_one {
                items.push(item(spec, id.clone(), split, paths));
            }
        }
        for &section in &SECTIONS {
            for (i, spec) in eval_specs(cfg, dataset_seed, mt, section)?.iter().enumerate() {
                let id = format!("{mt}_{}_eval_{:04}", section_name(section), i);
                let paths = emit(spec, &id, cfg, out_dir)?;
                items.push(item(spec, id, Split::Eval, &paths));
            }
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        items,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_specs_follow_mixing_patterns() {
        let cfg = DatasetConfig::default();
        let specs = train_specs(&cfg, 5, MachineType::Slider, 1);
        assert_eq!(specs.len(), 99);
        for s in &specs {
            assert_eq!(s.interferer.is_some(), s.pattern > 1);
            assert_ne!(s.interferer, Some(1));
            assert!(cfg.snr_db.contains(&s.snr_db));
            assert_eq!(s.label(), Label::Normal);
        }
        assert_eq!(specs.iter().filter(|s| s.interferer == Some(0)).count(), 33);
        assert_eq!(specs.iter().filter(|s| s.interferer == Some(2)).count(), 33);
    }

    #[test]
    fn eval_specs_are_balanced() {
        let cfg = DatasetConfig::default();
        let specs = eval_specs(&cfg, 5, MachineType::Valve, 2).unwrap();
        assert_eq!(specs.len(), 100);
        assert_eq!(specs.iter().filter(|s| s.label() == Label::Anomalous).count(), 50);
        assert!(specs.iter().all(|s| s.pattern == 1 && s.interferer.is_none()));
    }

    #[test]
    fn item_seeds_are_distinct_across_sections() {
        let cfg = DatasetConfig::default();
        let a = train_specs(&cfg, 5, MachineType::Slider, 0);
        let b = train_specs(&cfg, 5, MachineType::Slider, 1);
        assert!(a.iter().all(|x| b.iter().all(|y| x.seed != y.seed)));
    }
}

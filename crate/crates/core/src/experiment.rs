//! On-disk experiment layout and the synth, train and eval steps.
//!
//! ```text
//! <out>/data/manifest.jsonl, data/audio/*.wav
//! <out>/models/sep_id_<type>_<sec>/, sep_type_<type>/, det_<type>[_<sec>]/
//! <out>/eval/scores.csv, auc.csv, table.md, sisdri.csv, sisdri_items.csv, provenance.json
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, PipelineName};
use crate::dataset::{build_dataset, DatasetManifest, Label, Split, MANIFEST_FILE};
use crate::detector::{check_training_items, train_detector, DetectorModel};
use crate::error::{io_at, Error, Result};
use crate::pipeline::{score_clip, write_text, EvalReport, ScoreRow, SectionModels};
use crate::rng;
use crate::separator::{summarize_sisdri, train_separator, SeparatorModel, SeparatorScope, SisdriRow};
use crate::metrics::{si_sdr, si_sdri};
use crate::synth::{parse_section, section_name, MachineType, SECTIONS};

pub const LOSS_FILE: &str = "loss.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join(MANIFEST_FILE)
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn model_dir(&self, target: &TrainTarget) -> PathBuf {
        self.models().join(target.dir_name())
    }
}

/// Seed of the dataset substream.
pub fn dataset_seed(cfg: &ExperimentConfig) -> u64 {
    rng::substream(cfg.seed, "dataset")
}

/// Renders the dataset under `layout.data()`.
pub fn synth(cfg: &ExperimentConfig, layout: &Layout) -> Result<DatasetManifest> {
    cfg.validate()?;
    let manifest = build_dataset(&cfg.dataset, dataset_seed(cfg), &layout.data())?;
    write_provenance(&layout.data(), cfg, json!({ "step": "synth" }))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainTarget {
    Separator(SeparatorScope),
    Detector {
        machine_type: MachineType,
        section: Option<u8>,
    },
}

impl TrainTarget {
    pub fn machine_type(&self) -> MachineType {
        match self {
            TrainTarget::Separator(s) => s.machine_type(),
            TrainTarget::Detector { machine_type, .. } => *machine_type,
        }
    }

    pub fn dir_name(&self) -> String {
        match self {
            TrainTarget::Separator(s) => s.dir_name(),
            TrainTarget::Detector { machine_type, section: None } => format!("det_{machine_type}"),
            TrainTarget::Detector {
                machine_type,
                section: Some(s),
            } => format!("det_{machine_type}_{}", section_name(*s)),
        }
    }

    /// Parses `id <type> <section>`, `type <type>` or `detector <type> [<section>]`.
    pub fn parse(kind: &str, machine_type: &str, section: Option<&str>) -> Result<Self> {
        let machine_type: MachineType = machine_type.parse()?;
        let section = section.map(parse_section).transpose()?;
        match (kind, section) {
            ("id", Some(section)) => Ok(TrainTarget::Separator(SeparatorScope::IdSep { machine_type, section })),
            ("id", None) => Err(Error::InvalidArgument("an ID separator needs a section".into())),
            ("type", None) => Ok(TrainTarget::Separator(SeparatorScope::TypeSep { machine_type })),
            ("type", Some(_)) => Err(Error::InvalidArgument("a type separator takes no section".into())),
            ("detector", section) => Ok(TrainTarget::Detector { machine_type, section }),
            (other, _) => Err(Error::InvalidArgument(format!(
                "unknown training target '{other}' (expected id, type or detector)"
            ))),
        }
    }
}

impl fmt::Display for TrainTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dir_name())
    }
}

/// Every model the configured pipelines could need, in training order.
pub fn all_targets(cfg: &ExperimentConfig) -> Vec<TrainTarget> {
    let mut out = Vec::new();
    for &machine_type in &cfg.dataset.machine_types {
        for section in SECTIONS {
            out.push(TrainTarget::Separator(SeparatorScope::IdSep { machine_type, section }));
        }
        out.push(TrainTarget::Separator(SeparatorScope::TypeSep { machine_type }));
        out.extend(detector_targets(cfg, machine_type));
    }
    out
}

fn detector_targets(cfg: &ExperimentConfig, machine_type: MachineType) -> Vec<TrainTarget> {
    if cfg.detector.per_section {
        SECTIONS
            .iter()
            .map(|&s| TrainTarget::Detector {
                machine_type,
                section: Some(s),
            })
            .collect()
    } else {
        vec![TrainTarget::Detector {
            machine_type,
            section: None,
        }]
    }
}

fn detector_target(cfg: &ExperimentConfig, machine_type: MachineType, section: u8) -> TrainTarget {
    TrainTarget::Detector {
        machine_type,
        section: cfg.detector.per_section.then_some(section),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub losses: Vec<f64>,
}

/// Trains one model from the manifest and writes its checkpoint and loss curve.
/// `epochs` overrides the configured epoch count.
pub fn train(
    cfg: &ExperimentConfig,
    layout: &Layout,
    manifest: &DatasetManifest,
    target: &TrainTarget,
    epochs: Option<usize>,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = layout.model_dir(target);
    let name = target.dir_name();
    let sr = cfg.dataset.sample_rate;
    let extra = json!({ "config_hash": cfg.hash(), "experiment_seed": cfg.seed });
    let losses = match target {
        TrainTarget::Separator(scope) => {
            let (split, section, base) = match scope {
                SeparatorScope::IdSep { section, .. } => (Split::TrainSepId, Some(*section), &cfg.separator.id_sep),
                SeparatorScope::TypeSep { .. } => (Split::TrainSepType, None, &cfg.separator.type_sep),
            };
            let items = manifest.select(split, scope.machine_type(), section);
            scope.check_items(&items).map_err(|e| missing_split(e, split, &name))?;
            let pairs = items
                .iter()
                .map(|i| Ok((manifest.mixture(i)?, manifest.ground_truth(i)?)))
                .collect::<Result<Vec<_>>>()?;
            let mut tc = base.clone();
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let init = rng::substream(rng::substream(cfg.seed, "sep-init"), &name);
            let crop_seed = rng::substream(rng::substream(cfg.seed, "crop"), &name);
            let mut model = SeparatorModel::new(cfg.separator.model.clone(), scope.clone(), sr, init)?;
            let losses = train_separator(&mut model, &pairs, &tc, cfg.crop_samples(), crop_seed, on_epoch)?;
            model.save(&dir, init, Some(&tc), tc.epochs, extra)?;
            losses
        }
        TrainTarget::Detector { machine_type, section } => {
            let items = manifest.select(Split::TrainDetector, *machine_type, *section);
            check_training_items(&items).map_err(|e| missing_split(e, Split::TrainDetector, &name))?;
            let clips = items.iter().map(|i| manifest.mixture(i)).collect::<Result<Vec<_>>>()?;
            let mut tc = cfg.detector.train.clone();
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let init = rng::substream(rng::substream(cfg.seed, "det-init"), &name);
            let shuffle = rng::substream(init, "shuffle");
            let mut model = DetectorModel::new(cfg.detector.features.clone(), sr, init)?;
            let losses = train_detector(&mut model, &clips, &tc, shuffle, on_epoch)?;
            model.save(&dir, init, Some(&tc), tc.epochs, extra)?;
            losses
        }
    };
    write_text(&dir.join(LOSS_FILE), &loss_csv(&losses))?;
    Ok(TrainOutcome { dir, losses })
}

fn missing_split(e: Error, split: Split, name: &str) -> Error {
    match e {
        Error::Contract(msg) if msg.starts_with("empty") => {
            Error::Config(format!("manifest has no {split} items for {name}"))
        }
        other => other,
    }
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:e}", i + 1);
    }
    s
}

/// Checkpoint directories the pipelines need.
pub fn required_targets(cfg: &ExperimentConfig, pipelines: &[PipelineName]) -> Vec<TrainTarget> {
    let any = |ps: &[PipelineName]| pipelines.iter().any(|p| ps.contains(p));
    let mut out = Vec::new();
    for &machine_type in &cfg.dataset.machine_types {
        if any(&[PipelineName::Baseline, PipelineName::AfterIdSep, PipelineName::AfterTypeSep]) {
            out.extend(detector_targets(cfg, machine_type));
        }
        if any(&[PipelineName::AfterIdSep, PipelineName::OeSep]) {
            for section in SECTIONS {
                out.push(TrainTarget::Separator(SeparatorScope::IdSep { machine_type, section }));
            }
        }
        if any(&[PipelineName::AfterTypeSep, PipelineName::OeSep]) {
            out.push(TrainTarget::Separator(SeparatorScope::TypeSep { machine_type }));
        }
    }
    out
}

/// Missing checkpoint directories, all of them.
pub fn missing_checkpoints(cfg: &ExperimentConfig, layout: &Layout, pipelines: &[PipelineName]) -> Vec<PathBuf> {
    required_targets(cfg, pipelines)
        .iter()
        .map(|t| layout.model_dir(t))
        .filter(|d| !d.join(nngine::checkpoint::META_FILE).is_file())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SisdriItem {
    pub model: String,
    pub item_id: String,
    pub machine_type: MachineType,
    pub section: String,
    pub label: Label,
    pub anomaly_kind: Option<String>,
    pub si_sdr_mixture: f64,
    pub si_sdr_estimate: f64,
    pub si_sdri: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub sisdri: Vec<SisdriItem>,
}

/// Scores every eval clip under `pipelines` and writes the reports.
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout, pipelines: &[PipelineName]) -> Result<EvalOutcome> {
    cfg.validate()?;
    if pipelines.is_empty() {
        return Err(Error::Config("no pipelines selected".into()));
    }
    let manifest = DatasetManifest::load(&layout.manifest())?;
    let missing = missing_checkpoints(cfg, layout, pipelines);
    if !missing.is_empty() {
        return Err(Error::MissingCheckpoints(missing));
    }
    let needs = |ps: &[PipelineName]| pipelines.iter().any(|p| ps.contains(p));
    let needs_det = needs(&[PipelineName::Baseline, PipelineName::AfterIdSep, PipelineName::AfterTypeSep]);
    let needs_id = needs(&[PipelineName::AfterIdSep, PipelineName::OeSep]);
    let needs_type = needs(&[PipelineName::AfterTypeSep, PipelineName::OeSep]);

    let mut rows = Vec::new();
    let mut sisdri = Vec::new();
    for &mt in &cfg.dataset.machine_types {
        let type_sep = needs_type
            .then(|| SeparatorModel::load(&layout.model_dir(&TrainTarget::Separator(SeparatorScope::TypeSep { machine_type: mt }))))
            .transpose()?;
        let mut detectors: BTreeMap<String, DetectorModel> = BTreeMap::new();
        for section in SECTIONS {
            let items = manifest.select(Split::Eval, mt, Some(section));
            if items.is_empty() {
                return Err(Error::Config(format!("manifest has no eval items for {mt} section {}", section_name(section))));
            }
            let det_target = detector_target(cfg, mt, section);
            if needs_det && !detectors.contains_key(&det_target.dir_name()) {
                let d = DetectorModel::load(&layout.model_dir(&det_target))?;
                detectors.insert(det_target.dir_name(), d);
            }
            let id_target = TrainTarget::Separator(SeparatorScope::IdSep { machine_type: mt, section });
            let id_sep = needs_id.then(|| SeparatorModel::load(&layout.model_dir(&id_target))).transpose()?;
            let models = SectionModels {
                detector: detectors.get(&det_target.dir_name()),
                id_sep: id_sep.as_ref().map(|m| m as _),
                type_sep: type_sep.as_ref().map(|m| m as _),
            };
            for item in items {
                let mix = manifest.mixture(item)?;
                let clip = score_clip(pipelines, &models, &mix)?;
                for (pipeline, score) in clip.scores {
                    rows.push(ScoreRow {
                        item_id: item.id.clone(),
                        machine_type: mt,
                        section: item.section.clone(),
                        label: item.label,
                        pipeline,
                        score,
                    });
                }
                if clip.id_estimate.is_none() && clip.type_estimate.is_none() {
                    continue;
                }
                let truth = manifest.ground_truth(item)?;
                let base = si_sdr(&truth, &mix)?;
                for (model, est) in [("id_sep", &clip.id_estimate), ("type_sep", &clip.type_estimate)] {
                    let Some(est) = est else { continue };
                    sisdri.push(SisdriItem {
                        model: model.into(),
                        item_id: item.id.clone(),
                        machine_type: mt,
                        section: item.section.clone(),
                        label: item.label,
                        anomaly_kind: item.anomaly_kind.map(|k| k.name().to_string()),
                        si_sdr_mixture: base,
                        si_sdr_estimate: si_sdr(&truth, est)?,
                        si_sdri: si_sdri(&truth, est, &mix)?,
                    });
                }
            }
        }
    }
    let report = EvalReport::from_scores(pipelines, rows)?;
    let out = layout.eval();
    std::fs::create_dir_all(&out).map_err(io_at(&out))?;
    write_text(&out.join("scores.csv"), &report.scores_csv())?;
    write_text(&out.join("auc.csv"), &report.auc_csv())?;
    write_text(&out.join("table.md"), &report.table_markdown())?;
    write_text(&out.join("sisdri.csv"), &sisdri_summary_csv(&sisdri))?;
    write_text(&out.join("sisdri_items.csv"), &sisdri_items_csv(&sisdri))?;
    let pipelines_keys: Vec<&str> = pipelines.iter().map(|p| p.key()).collect();
    write_provenance(&out, cfg, json!({ "step": "eval", "pipelines": pipelines_keys }))?;
    Ok(EvalOutcome { report, sisdri })
}

/// Mean SI-SDRi per separator and section, split by label, plus one
/// row per anomaly kind.
pub fn sisdri_summary_csv(items: &[SisdriItem]) -> String {
    let mut groups: BTreeMap<(String, MachineType, String, String), Vec<SisdriRow>> = BTreeMap::new();
    for i in items {
        let row = SisdriRow {
            item_id: i.item_id.clone(),
            label: i.label,
            si_sdr_mixture: i.si_sdr_mixture,
            si_sdr_estimate: i.si_sdr_estimate,
            si_sdri: i.si_sdri,
        };
        let key = |group: &str| (i.model.clone(), i.machine_type, i.section.clone(), group.to_string());
        groups.entry(key("all")).or_default().push(row.clone());
        if let Some(kind) = &i.anomaly_kind {
            groups.entry(key(kind)).or_default().push(row);
        }
    }
    let mut s = String::from("model,machine_type,section,group,normal_sisdri,normal_count,anomalous_sisdri,anomalous_count,capped\n");
    let cell = |m: &Option<crate::metrics::CappedMean>| m.as_ref().map_or(("NA".to_string(), 0), |m| (format!("{:.4}", m.mean), m.count));
    for ((model, mt, section, group), rows) in &groups {
        let sum = summarize_sisdri(rows);
        let (n, nc) = cell(&sum.normal);
        let (a, ac) = cell(&sum.anomalous);
        let capped = sum.normal.map_or(0, |m| m.capped) + sum.anomalous.map_or(0, |m| m.capped);
        let _ = writeln!(s, "{model},{mt},{section},{group},{n},{nc},{a},{ac},{capped}");
    }
    s
}

pub fn sisdri_items_csv(items: &[SisdriItem]) -> String {
    let mut s = String::from("model,item_id,machine_type,section,label,anomaly_kind,si_sdr_mixture,si_sdr_estimate,si_sdri\n");
    for i in items {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            i.model,
            i.item_id,
            i.machine_type,
            i.section,
            i.label.name(),
            i.anomaly_kind.as_deref().unwrap_or(""),
            i.si_sdr_mixture,
            i.si_sdr_estimate,
            i.si_sdri
        );
    }
    s
}

fn write_provenance(dir: &Path, cfg: &ExperimentConfig, extra: Value) -> Result<()> {
    let mut v = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    write_text(&dir.join(PROVENANCE_FILE), &serde_json::to_string_pretty(&v)?)
}

//! Baseline, separate-then-detect and separation-disagreement scoring, the
//! threshold rule, and per-section AUC reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::config::PipelineName;
use crate::dataset::Label;
use crate::detector::DetectorModel;
use crate::error::{io_at, Error, Result};
use crate::metrics::{auc, ScoreSet};
use crate::separator::Separate;
use crate::synth::{MachineType, SECTIONS, section_name};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Anomaly,
    Normal,
}

/// Anomaly iff `score > threshold`.
pub fn decide(score: f64, threshold: f64) -> Result<Decision> {
    if !score.is_finite() || !threshold.is_finite() {
        return Err(Error::InvalidArgument("score and threshold must be finite".into()));
    }
    Ok(if score > threshold {
        Decision::Anomaly
    } else {
        Decision::Normal
    })
}

/// Per-sample mean squared difference of two waveforms.
pub fn waveform_mse(a: &AudioClip, b: &AudioClip) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::SampleRateMismatch {
            expected: a.sample_rate(),
            actual: b.sample_rate(),
        });
    }
    Ok(a.samples()
        .iter()
        .zip(b.samples())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

pub enum PipelineSpec<'a> {
    Baseline {
        detector: &'a DetectorModel,
    },
    AfterSep {
        detector: &'a DetectorModel,
        separator: &'a dyn Separate,
    },
    OeSep {
        id_sep: &'a dyn Separate,
        type_sep: &'a dyn Separate,
    },
}

pub fn score(spec: &PipelineSpec<'_>, mixture: &AudioClip) -> Result<f64> {
    match spec {
        PipelineSpec::Baseline { detector } => detector.anomaly_score(mixture),
        PipelineSpec::AfterSep { detector, separator } => detector.anomaly_score(&separator.separate(mixture)?),
        PipelineSpec::OeSep { id_sep, type_sep } => waveform_mse(&id_sep.separate(mixture)?, &type_sep.separate(mixture)?),
    }
}

/// Models available for one section.
#[derive(Clone, Copy, Default)]
pub struct SectionModels<'a> {
    pub detector: Option<&'a DetectorModel>,
    pub id_sep: Option<&'a dyn Separate>,
    pub type_sep: Option<&'a dyn Separate>,
}

impl<'a> SectionModels<'a> {
    /// Model roles a pipeline needs but this section lacks.
    pub fn missing(&self, pipeline: PipelineName) -> Vec<&'static str> {
        let mut out = Vec::new();
        let needs_det = matches!(
            pipeline,
            PipelineName::Baseline | PipelineName::AfterIdSep | PipelineName::AfterTypeSep
        );
        if needs_det && self.detector.is_none() {
            out.push("detector");
        }
        if matches!(pipeline, PipelineName::AfterIdSep | PipelineName::OeSep) && self.id_sep.is_none() {
            out.push("id separator");
        }
        if matches!(pipeline, PipelineName::AfterTypeSep | PipelineName::OeSep) && self.type_sep.is_none() {
            out.push("type separator");
        }
        out
    }

    pub fn spec(&self, pipeline: PipelineName) -> Result<PipelineSpec<'a>> {
        let missing = self.missing(pipeline);
        if !missing.is_empty() {
            return Err(Error::Contract(format!("{} needs {}", pipeline.key(), missing.join(", "))));
        }
        Ok(match pipeline {
            PipelineName::Baseline => PipelineSpec::Baseline {
                detector: self.detector.unwrap(),
            },
            PipelineName::AfterIdSep => PipelineSpec::AfterSep {
                detector: self.detector.unwrap(),
                separator: self.id_sep.unwrap(),
            },
            PipelineName::AfterTypeSep => PipelineSpec::AfterSep {
                detector: self.detector.unwrap(),
                separator: self.type_sep.unwrap(),
            },
            PipelineName::OeSep => PipelineSpec::OeSep {
                id_sep: self.id_sep.unwrap(),
                type_sep: self.type_sep.unwrap(),
            },
        })
    }
}

/// Scores of one clip under several pipelines, plus the separator outputs
/// that were computed along the way.
#[derive(Debug, Clone)]
pub struct ClipScores {
    pub scores: Vec<(PipelineName, f64)>,
    pub id_estimate: Option<AudioClip>,
    pub type_estimate: Option<AudioClip>,
}

/// Same values as calling [`score`] per pipeline, with each separator run
/// at most once per clip.
pub fn score_clip(pipelines: &[PipelineName], models: &SectionModels<'_>, mixture: &AudioClip) -> Result<ClipScores> {
    for &p in pipelines {
        models.spec(p)?;
    }
    let wants = |ps: &[PipelineName]| pipelines.iter().any(|p| ps.contains(p));
    let id_estimate = if wants(&[PipelineName::AfterIdSep, PipelineName::OeSep]) {
        Some(models.id_sep.unwrap().separate(mixture)?)
    } else {
        None
    };
    let type_estimate = if wants(&[PipelineName::AfterTypeSep, PipelineName::OeSep]) {
        Some(models.type_sep.unwrap().separate(mixture)?)
    } else {
        None
    };
    let mut scores = Vec::with_capacity(pipelines.len());
    for &p in pipelines {
        let s = match p {
            PipelineName::Baseline => models.detector.unwrap().anomaly_score(mixture)?,
            PipelineName::AfterIdSep => models.detector.unwrap().anomaly_score(id_estimate.as_ref().unwrap())?,
            PipelineName::AfterTypeSep => models.detector.unwrap().anomaly_score(type_estimate.as_ref().unwrap())?,
            PipelineName::OeSep => waveform_mse(id_estimate.as_ref().unwrap(), type_estimate.as_ref().unwrap())?,
        };
        scores.push((p, s));
    }
    Ok(ClipScores {
        scores,
        id_estimate,
        type_estimate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub item_id: String,
    pub machine_type: MachineType,
    pub section: String,
    pub label: Label,
    pub pipeline: PipelineName,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub machine_type: MachineType,
    pub section: String,
    pub pipeline: PipelineName,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub pipelines: Vec<PipelineName>,
    pub scores: Vec<ScoreRow>,
    pub aucs: Vec<AucRow>,
}

impl EvalReport {
    /// Per-section AUCs from per-clip scores. Scores are merged in item-id
    /// order, so the input order does not matter.
    pub fn from_scores(pipelines: &[PipelineName], mut scores: Vec<ScoreRow>) -> Result<Self> {
        scores.sort_by(|a, b| {
            (a.machine_type, &a.section, &a.item_id, a.pipeline).cmp(&(b.machine_type, &b.section, &b.item_id, b.pipeline))
        });
        let mut groups: BTreeMap<(MachineType, String, PipelineName), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &scores {
            let g = groups.entry((r.machine_type, r.section.clone(), r.pipeline)).or_default();
            match r.label {
                Label::Normal => g.0.push(r.score),
                Label::Anomalous => g.1.push(r.score),
            }
        }
        let mut aucs = Vec::new();
        for ((machine_type, section, pipeline), (normal, anomalous)) in groups {
            let a = auc(&ScoreSet::new(normal, anomalous)).map_err(|e| match e {
                Error::EmptyClass(class) => Error::Contract(format!(
                    "{machine_type} section {section}: no {class} items scored by {}",
                    pipeline.key()
                )),
                other => other,
            })?;
            aucs.push(AucRow {
                machine_type,
                section,
                pipeline,
                auc: a,
            });
        }
        Ok(Self {
            pipelines: pipelines.to_vec(),
            scores,
            aucs,
        })
    }

    pub fn machine_types(&self) -> Vec<MachineType> {
        let mut v: Vec<MachineType> = self.aucs.iter().map(|r| r.machine_type).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn section_auc(&self, machine_type: MachineType, section: &str, pipeline: PipelineName) -> Option<f64> {
        self.aucs
            .iter()
            .find(|r| r.machine_type == machine_type && r.section == section && r.pipeline == pipeline)
            .map(|r| r.auc)
    }

    /// Mean of the three section AUCs; `None` unless all three exist.
    pub fn average_auc(&self, machine_type: MachineType, pipeline: PipelineName) -> Option<f64> {
        let v: Option<Vec<f64>> = SECTIONS
            .iter()
            .map(|&s| self.section_auc(machine_type, &section_name(s), pipeline))
            .collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Every requested pipeline has an AUC for every section of every type.
    pub fn is_complete(&self) -> bool {
        let types = self.machine_types();
        !types.is_empty()
            && types
                .iter()
                .all(|&t| self.pipelines.iter().all(|&p| self.average_auc(t, p).is_some()))
    }

    /// Rebuilds a report from the text of `scores.csv`.
    pub fn from_scores_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("item_id,machine_type,section,label,pipeline,score") {
            return Err(Error::Config("scores.csv has an unexpected header".into()));
        }
        let mut pipelines = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Config(format!("scores.csv line {}: malformed row", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let label = match f[3] {
                "normal" => Label::Normal,
                "anomalous" => Label::Anomalous,
                _ => return Err(bad()),
            };
            let pipeline = PipelineName::parse(f[4])?;
            if !pipelines.contains(&pipeline) {
                pipelines.push(pipeline);
            }
            rows.push(ScoreRow {
                item_id: f[0].to_string(),
                machine_type: f[1].parse()?,
                section: f[2].to_string(),
                label,
                pipeline,
                score: f[5].parse().map_err(|_| bad())?,
            });
        }
        pipelines.sort();
        Self::from_scores(&pipelines, rows)
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from("item_id,machine_type,section,label,pipeline,score\n");
        for r in &self.scores {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e}",
                r.item_id,
                r.machine_type,
                r.section,
                r.label.name(),
                r.pipeline.key(),
                r.score
            );
        }
        s
    }

    /// Per-clip decisions under threshold `phi`.
    pub fn decisions_csv(&self, phi: f64) -> Result<String> {
        let mut s = String::from("item_id,machine_type,section,label,pipeline,score,decision\n");
        for r in &self.scores {
            let d = match decide(r.score, phi)? {
                Decision::Anomaly => "anomaly",
                Decision::Normal => "normal",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e},{d}",
                r.item_id,
                r.machine_type,
                r.section,
                r.label.name(),
                r.pipeline.key(),
                r.score
            );
        }
        Ok(s)
    }

    /// Section rows followed by an `avg` row per type and pipeline.
    pub fn auc_csv(&self) -> String {
        let mut s = String::from("machine_type,section,pipeline,auc\n");
        for t in self.machine_types() {
            for &p in &self.pipelines {
                for sec in SECTIONS {
                    if let Some(a) = self.section_auc(t, &section_name(sec), p) {
                        let _ = writeln!(s, "{t},{},{},{a:.6}", section_name(sec), p.key());
                    }
                }
                if let Some(a) = self.average_auc(t, p) {
                    let _ = writeln!(s, "{t},avg,{},{a:.6}", p.key());
                }
            }
        }
        s
    }

    /// AUC in percent with two decimals, one table per machine type.
    pub fn table_markdown(&self) -> String {
        let mut s = String::new();
        for t in self.machine_types() {
            let _ = writeln!(s, "### {t}\n");
            let _ = writeln!(s, "| Method | 00 | 01 | 02 | Avg |");
            let _ = writeln!(s, "|---|---:|---:|---:|---:|");
            for &p in &self.pipelines {
                let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} |",
                    p.label(),
                    cell(self.section_auc(t, "00", p)),
                    cell(self.section_auc(t, "01", p)),
                    cell(self.section_auc(t, "02", p)),
                    cell(self.average_auc(t, p)),
                );
            }
            s.push('\n');
        }
        s
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_at(path))?;
    f.write_all(text.as_bytes()).map_err(io_at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decide_is_strict() {
        assert_eq!(decide(1.2, 1.0).unwrap(), Decision::Anomaly);
        assert_eq!(decide(1.0, 1.0).unwrap(), Decision::Normal);
        assert_eq!(decide(0.5, 1.0).unwrap(), Decision::Normal);
        assert!(decide(f64::NAN, 1.0).is_err());
        assert!(decide(1.0, f64::INFINITY).is_err());
    }

    fn row(id: &str, section: &str, label: Label, score: f64) -> ScoreRow {
        ScoreRow {
            item_id: id.into(),
            machine_type: MachineType::Slider,
            section: section.into(),
            label,
            pipeline: PipelineName::Baseline,
            score,
        }
    }

    fn rigged() -> Vec<ScoreRow> {
        let mut rows = Vec::new();
        for sec in ["00", "01", "02"] {
            for i in 0..4 {
                let label = if i < 2 { Label::Normal } else { Label::Anomalous };
                let score = if label == Label::Anomalous { 1.0 } else { 0.0 } + 0.01 * i as f64;
                rows.push(row(&format!("{sec}_{i}"), sec, label, score));
            }
        }
        rows
    }

    #[test]
    fn rigged_scores_give_perfect_auc_and_complete_rows() {
        let r = EvalReport::from_scores(&[PipelineName::Baseline], rigged()).unwrap();
        assert!(r.aucs.iter().all(|a| a.auc == 1.0));
        assert_eq!(r.average_auc(MachineType::Slider, PipelineName::Baseline), Some(1.0));
        assert!(r.is_complete());
        assert!(r.table_markdown().contains("| Baseline | 100.00 | 100.00 | 100.00 | 100.00 |"));
        assert!(r.auc_csv().contains("slider,avg,baseline,1.000000"));
    }

    #[test]
    fn order_does_not_matter() {
        let mut rows = rigged();
        rows[0].score = 2.0;
        let a = EvalReport::from_scores(&[PipelineName::Baseline], rows.clone()).unwrap();
        rows.reverse();
        let b = EvalReport::from_scores(&[PipelineName::Baseline], rows).unwrap();
        assert_eq!(a.aucs, b.aucs);
        assert_eq!(a.scores_csv(), b.scores_csv());
    }

    #[test]
    fn one_label_section_is_an_error() {
        let rows: Vec<ScoreRow> = rigged().into_iter().filter(|r| !(r.section == "01" && r.label == Label::Normal)).collect();
        assert!(EvalReport::from_scores(&[PipelineName::Baseline], rows).is_err());
    }

    #[test]
    fn average_is_mean_of_sections() {
        let mut rows = rigged();
        for r in rows.iter_mut().filter(|r| r.section == "02") {
            r.score = 0.0;
        }
        let rep = EvalReport::from_scores(&[PipelineName::Baseline], rows).unwrap();
        assert_eq!(rep.section_auc(MachineType::Slider, "02", PipelineName::Baseline), Some(0.0));
        assert!((rep.average_auc(MachineType::Slider, PipelineName::Baseline).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(rep.table_markdown().contains("| 66.67 |"));
    }

    #[test]
    fn scores_csv_round_trips() {
        let mut rows = Vec::new();
        for (i, (label, score)) in [(Label::Normal, 0.25), (Label::Anomalous, 1.5e-7), (Label::Normal, 3.0)].into_iter().enumerate() {
            for sec in ["00", "01", "02"] {
                for p in [PipelineName::Baseline, PipelineName::OeSep] {
                    rows.push(ScoreRow {
                        item_id: format!("x_{sec}_{i}"),
                        machine_type: MachineType::Valve,
                        section: sec.into(),
                        label,
                        pipeline: p,
                        score: score * 1.37,
                    });
                }
            }
        }
        let r = EvalReport::from_scores(&[PipelineName::Baseline, PipelineName::OeSep], rows).unwrap();
        let back = EvalReport::from_scores_csv(&r.scores_csv()).unwrap();
        assert_eq!(back, r);
        assert!(EvalReport::from_scores_csv("nope\n").is_err());
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sepasd::audio::read_wav;
use sepasd::config::{ExperimentConfig, PipelineName};
use sepasd::dataset::{DatasetManifest, Split};
use sepasd::experiment::{self, Layout, TrainTarget};
use sepasd::features::{stft_power, FeatureExtractor};
use sepasd::pipeline::EvalReport;
use sepasd::separator::{Separate, SeparatorModel};
use sepasd::Error;

#[derive(Parser)]
#[command(name = "sepasd", version, about = "Synthesize, train and evaluate separation-aided anomalous sound detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment root (data/, models/, eval/).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset size factor relative to the full item counts.
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset and write its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model, or every model with `all`.
    Train {
        #[command(flatten)]
        common: Common,
        /// id, type, detector or all.
        kind: String,
        /// slider or valve (omit for `all`).
        machine_type: Option<String>,
        /// Section 00, 01 or 02 (ID separators, per-section detectors).
        section: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the eval split and write scores, AUCs and SI-SDRi reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: baseline,after_type_sep,after_id_sep,oe_sep.
        #[arg(long)]
        pipelines: Option<String>,
        /// Also write decisions.csv: anomaly iff score > threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print the AUC table from an existing scores.csv.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Write a spectrogram of a WAV file as CSV (frames x bins).
    DumpSpectrogram {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value = "log-mel")]
        kind: SpectrogramKind,
        /// Separator checkpoint to apply before the transform.
        #[arg(long)]
        separator: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SpectrogramKind {
    Power,
    LogMel,
}

fn load_config(common: &Common) -> sepasd::Result<(ExperimentConfig, Layout)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.scale {
        cfg.dataset.scale = s;
    }
    cfg.validate()?;
    let root = common
        .out
        .clone()
        .or_else(|| cfg.eval.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, Layout::new(root)))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> sepasd::Result<ExitCode> {
    match cli.command {
        Command::Synth { common } => {
            let (cfg, layout) = load_config(&common)?;
            let manifest = experiment::synth(&cfg, &layout)?;
            println!("wrote {}", layout.manifest().display());
            for (split, n) in manifest.split_counts() {
                println!("{split}: {n}");
            }
            for ((split, mt, section), n) in manifest.counts() {
                println!("  {split} {mt} {section}: {n}");
            }
        }
        Command::Train {
            common,
            kind,
            machine_type,
            section,
            epochs,
        } => {
            let (cfg, layout) = load_config(&common)?;
            let targets = if kind == "all" {
                if machine_type.is_some() {
                    return Err(Error::InvalidArgument("`train all` takes no machine type".into()));
                }
                experiment::all_targets(&cfg)
            } else {
                let mt = machine_type.ok_or_else(|| Error::InvalidArgument("missing machine type".into()))?;
                vec![TrainTarget::parse(&kind, &mt, section.as_deref())?]
            };
            let manifest = DatasetManifest::load(&layout.manifest())?;
            for t in targets {
                eprintln!("training {t}");
                let out = experiment::train(&cfg, &layout, &manifest, &t, epochs, &mut |e, l| {
                    eprintln!("  epoch {e:>3}  loss {l:.6}");
                })?;
                let first = out.losses.first().copied().unwrap_or(f64::NAN);
                let last = out.losses.last().copied().unwrap_or(f64::NAN);
                println!("{t}: {} epochs, loss {first:.6} -> {last:.6}, saved to {}", out.losses.len(), out.dir.display());
            }
        }
        Command::Eval {
            common,
            pipelines,
            threshold,
        } => {
            let (cfg, layout) = load_config(&common)?;
            let pipelines = match pipelines {
                Some(p) => PipelineName::parse_list(&p).map_err(|e| match e {
                    Error::Config(msg) => Error::InvalidArgument(msg),
                    other => other,
                })?,
                None => cfg.eval.pipelines.clone(),
            };
            let out = experiment::evaluate(&cfg, &layout, &pipelines)?;
            print!("{}", out.report.table_markdown());
            if let Some(phi) = threshold {
                let path = layout.eval().join("decisions.csv");
                std::fs::write(&path, out.report.decisions_csv(phi)?).map_err(|source| Error::Io { path, source })?;
            }
            println!("reports written to {}", layout.eval().display());
            let expected = DatasetManifest::load(&layout.manifest())?
                .split(Split::Eval)
                .filter(|i| cfg.dataset.machine_types.contains(&i.machine_type))
                .count()
                * pipelines.len();
            if !out.report.is_complete() || out.report.scores.len() != expected {
                eprintln!("error: not every pipeline scored every eval item");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { common } => {
            let (_, layout) = load_config(&common)?;
            let path = layout.eval().join("scores.csv");
            let text = std::fs::read_to_string(&path).map_err(|source| Error::Io { path, source })?;
            let report = EvalReport::from_scores_csv(&text)?;
            print!("{}", report.table_markdown());
        }
        Command::DumpSpectrogram {
            input,
            output,
            kind,
            separator,
            config,
        } => dump_spectrogram(&input, &output, kind, separator.as_deref(), config.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn dump_spectrogram(
    input: &Path,
    output: &Path,
    kind: SpectrogramKind,
    separator: Option<&Path>,
    config: Option<&Path>,
) -> sepasd::Result<()> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut clip = read_wav(input)?;
    if let Some(dir) = separator {
        clip = SeparatorModel::load(dir)?.separate(&clip)?;
    }
    let f = &cfg.detector.features;
    match kind {
        SpectrogramKind::Power => stft_power(&clip, f.frame_size, f.hop_size)?.write_csv(output)?,
        SpectrogramKind::LogMel => FeatureExtractor::new(f.clone(), clip.sample_rate())?
            .log_mel(&clip)?
            .write_csv(output)?,
    }
    println!("wrote {}", output.display());
    Ok(())
}

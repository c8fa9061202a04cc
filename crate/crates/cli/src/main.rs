use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affpipe::backbone::{
    extract_activations, extract_features, fingerprint, load_backbone, write_feature_csv, BackboneSpec, FeaturePooling,
    WeightsRef,
};
use affpipe::config::RunConfig;
use affpipe::experiment::{
    check_split, load_split, run_experiment, save_split, subject_disjoint_split, RunArtifacts, SplitAssignment,
};
use affpipe::explain::{contact_sheet, eigencam_with, render_overlay, save_saliency, DEFAULT_ALPHA};
use affpipe::ingest::{ingest_videos, load_manifest, summarize, FrameRecord, DEFAULT_SAMPLING_RATE_HZ};
use affpipe::preprocess::{
    load_crops, load_sidecar, localizer_from_id, preprocess_records, save_crops, FaceLocalizer, DEFAULT_MIN_CONFIDENCE,
};
use affpipe::probe::{init_probe, predict, train, ProbeCheckpoint};
use affpipe::report::{emit_curves, emit_table, EvalReport};
use affpipe::rng::derive_seed;
use affpipe::synthetic::{write_face_fixture, FixtureSpec};
use affpipe::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Emotion classification from animal face images with linear probes on
/// frozen vision backbones.
#[derive(Parser)]
#[command(name = "affpipe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pooling {
    Standard,
    MeanTokens,
}

impl From<Pooling> for FeaturePooling {
    fn from(p: Pooling) -> Self {
        match p {
            Pooling::Standard => FeaturePooling::Standard,
            Pooling::MeanTokens => FeaturePooling::MeanTokens,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract frames from labeled videos into a manifest.
    Ingest {
        #[arg(long)]
        videos: PathBuf,
        /// CSV with columns video, subject_id, label and optional sex, age_years, neutered.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLING_RATE_HZ)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print dataset statistics as JSON.
    Summarize { manifest: PathBuf },
    /// Localize, crop and resize faces.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// JSONL face-box sidecar.
        #[arg(long, conflicts_with = "detector")]
        boxes: Option<PathBuf>,
        /// `full-frame` or `cmd:<program> [args]`.
        #[arg(long)]
        detector: Option<String>,
        #[arg(long, default_value_t = DEFAULT_MIN_CONFIDENCE)]
        min_conf: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a subject-disjoint split file.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "train-subjects", default_value_t = 22)]
        train_subjects: usize,
        #[arg(long = "test-subjects", default_value_t = 7)]
        test_subjects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.10)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write pooled backbone features of a crop directory as CSV.
    Features {
        #[arg(long)]
        backbone: String,
        /// `synthetic:<seed>`, a safetensors file, or a cache name. Defaults to the backbone id.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long, value_enum, default_value = "standard")]
        pooling: Pooling,
        #[arg(long)]
        crops: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one probe and write its checkpoint.
    Train {
        #[arg(long)]
        backbone: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured comparison end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render the table and curves of a run directory.
    Report { run_dir: PathBuf },
    /// Eigen-CAM overlays for crops.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        backbone: String,
        #[arg(long)]
        weights: Option<String>,
        /// Crop directory written by `preprocess`.
        #[arg(long)]
        crops: PathBuf,
        /// Comma-separated frame ids; all crops when omitted.
        #[arg(long, value_delimiter = ',')]
        frames: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        centered: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic face dataset with a box sidecar.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long = "frames-per-subject", default_value_t = 5)]
        frames_per_subject: usize,
        #[arg(long, default_value_t = 128)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "code": e.code(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn weights_for(backbone: &str, weights: Option<&str>) -> Result<WeightsRef> {
    WeightsRef::parse(weights.unwrap_or(backbone))
}

fn localizer(boxes: Option<&Path>, detector: Option<&str>) -> Result<Box<dyn FaceLocalizer>> {
    match boxes {
        Some(p) => Ok(Box::new(load_sidecar(p)?)),
        None => localizer_from_id(detector.unwrap_or(affpipe::config::DEFAULT_DETECTOR)),
    }
}

fn print_json(value: serde_json::Result<String>) {
    println!("{}", value.expect("serializable"));
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { videos, labels, rate, out } => {
            let manifest = ingest_videos(&videos, &labels, rate, &out)?;
            log::info!("wrote {} frames to {}", manifest.records.len(), out.display());
        }
        Command::Summarize { manifest } => print_json(serde_json::to_string_pretty(&summarize(&load_manifest(&manifest)?))),
        Command::Preprocess { manifest, boxes, detector, min_conf, out } => {
            let m = load_manifest(&manifest)?;
            let records: Vec<&FrameRecord> = m.records.iter().collect();
            let loc = localizer(boxes.as_deref(), detector.as_deref())?;
            let outcome = preprocess_records(&manifest, &records, loc.as_ref(), min_conf)?;
            save_crops(&out, &outcome.crops, &records)?;
            let dropped = out.join("dropped_frames.json");
            std::fs::write(&dropped, serde_json::to_string_pretty(&outcome.dropped).expect("serializable"))
                .map_err(|e| Error::io(&dropped, e))?;
            log::info!("{} crops written, {} frames dropped without a face", outcome.crops.len(), outcome.dropped.len());
        }
        Command::Split { manifest, train_subjects, test_subjects, seed, tolerance, out } => {
            let m = load_manifest(&manifest)?;
            let split = subject_disjoint_split(&m, train_subjects, test_subjects, seed, tolerance)?;
            save_split(&split, &out)?;
            print_json(serde_json::to_string_pretty(&split.descriptor()));
        }
        Command::Features { backbone, weights, pooling, crops, out } => {
            let spec = BackboneSpec::from_id(&backbone)?;
            let handle = load_backbone(&spec, &weights_for(&backbone, weights.as_deref())?)?.with_pooling(pooling.into());
            let crops: Vec<_> = load_crops(&crops)?.into_iter().map(|(c, _)| c).collect();
            let batch = extract_features(&handle, &crops)?;
            write_feature_csv(&batch, &out)?;
            log::info!("{} x {} features from {} ({})", batch.len(), batch.dim(), backbone, fingerprint(&handle));
        }
        Command::Train { backbone, manifest, split, config, out } => train_one(&backbone, &manifest, &split, &config, &out)?,
        Command::Run { config, out } => {
            let (mut cfg, text) = RunConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = std::path::absolute(&out).map_err(|e| Error::io(&out, e))?;
            }
            let report = run_experiment(&cfg, Some(&text))?;
            print!("{}", emit_table(&report));
            let failed = report.rows.iter().filter(|r| !r.is_ok()).count();
            if failed > 0 {
                return Err(Error::PartialFailure { failed, total: report.rows.len() });
            }
        }
        Command::Report { run_dir } => {
            let art = RunArtifacts::new(&run_dir);
            let report = EvalReport::load(&art.report())?;
            let table = emit_table(&report);
            std::fs::write(art.table(), &table).map_err(|e| Error::io(art.table(), e))?;
            if !report.curves.is_empty() {
                emit_curves(&report.curves, &run_dir)?;
            }
            print!("{table}");
        }
        Command::Explain { ckpt, backbone, weights, crops, frames, alpha, centered, out } => {
            explain(&ckpt, &backbone, weights.as_deref(), &crops, &frames, alpha, centered, &out)?
        }
        Command::Fixture { out, subjects, frames_per_subject, side, seed } => {
            let spec = FixtureSpec { n_subjects: subjects, frames_per_subject, image_side: side, seed };
            let m = write_face_fixture(&out, &spec)?;
            log::info!("wrote {} frames to {}", m.records.len(), out.display());
        }
    }
    Ok(())
}

fn train_one(backbone: &str, manifest_path: &Path, split_path: &Path, config: &Path, out: &Path) -> Result<()> {
    let (cfg, _) = RunConfig::load(config)?;
    let manifest = load_manifest(manifest_path)?;
    let split: SplitAssignment = load_split(split_path)?;
    check_split(&split, &manifest)?;
    let entry = cfg
        .backbones
        .iter()
        .find(|b| b.id == backbone)
        .cloned()
        .unwrap_or_else(|| affpipe::config::BackboneEntry {
            id: backbone.to_string(),
            weights: None,
            checksum: None,
            pooling: FeaturePooling::Standard,
        });
    let spec = entry.spec()?;
    let handle = load_backbone(&spec, &entry.weights_ref()?)?.with_pooling(entry.pooling);
    let loc = localizer(cfg.dataset.boxes.as_deref(), cfg.dataset.detector.as_deref())?;
    let side = |frames: &[String]| -> Result<(Vec<_>, Vec<usize>)> {
        let records: Vec<&FrameRecord> = frames
            .iter()
            .map(|f| manifest.record(f).ok_or_else(|| Error::InvalidArgument(format!("unknown frame {f}"))))
            .collect::<Result<_>>()?;
        let p = preprocess_records(manifest_path, &records, loc.as_ref(), cfg.dataset.min_confidence)?;
        Ok((p.crops, p.labels.iter().map(|l| l.index()).collect()))
    };
    let (train_crops, train_labels) = side(&split.train_frames)?;
    let (test_crops, test_labels) = side(&split.test_frames)?;
    let optimizer = cfg.optimizer.for_family(spec.family);
    let probe = init_probe(handle.feature_dim(), spec.clone(), derive_seed(cfg.seeds.probe_init, &["probe", backbone]))?;
    let outcome = train(
        probe,
        &handle,
        &train_crops,
        &train_labels,
        &test_crops,
        &test_labels,
        optimizer,
        &cfg.augmentation,
        cfg.training.augmentation_views,
        derive_seed(cfg.seeds.training, &["train", backbone]),
    )?;
    ProbeCheckpoint::new(&outcome.probe, &fingerprint(&handle), optimizer).save(out)?;
    let curve = out.with_extension("curve.csv");
    std::fs::write(&curve, outcome.curve.to_csv()).map_err(|e| Error::io(&curve, e))?;
    if let Some(last) = outcome.curve.last() {
        log::info!("final epoch: train accuracy {:.4}, val accuracy {:.4}", last.train_accuracy, last.val_accuracy);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn explain(
    ckpt: &Path,
    backbone: &str,
    weights: Option<&str>,
    crops_dir: &Path,
    frames: &[String],
    alpha: f64,
    centered: bool,
    out: &Path,
) -> Result<()> {
    let checkpoint = ProbeCheckpoint::load(ckpt)?;
    let spec = BackboneSpec::from_id(backbone)?;
    if checkpoint.backbone_spec.id()? != spec.id()? {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained on {}, not {backbone}",
            checkpoint.backbone_spec
        )));
    }
    let handle = load_backbone(&spec, &weights_for(backbone, weights)?)?;
    let actual = fingerprint(&handle);
    if actual != checkpoint.backbone_fingerprint {
        return Err(Error::ChecksumMismatch { expected: checkpoint.backbone_fingerprint.clone(), actual });
    }
    let probe = checkpoint.to_probe()?;
    let selected: Vec<_> = load_crops(crops_dir)?
        .into_iter()
        .filter(|(c, _)| frames.is_empty() || frames.contains(&c.source_frame_id))
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptySplit("no crops selected".into()));
    }
    let crops: Vec<_> = selected.iter().map(|(c, _)| c.clone()).collect();
    let features = extract_features(&handle, &crops)?.vectors.mapv(f64::from);
    let predictions = predict(&probe, &features.view())?;
    let mut sheet = Vec::new();
    for ((crop, entry), pred) in selected.iter().zip(&predictions) {
        let grid = eigencam_with(&extract_activations(&handle, crop)?, centered)?.with_frame_id(&crop.source_frame_id);
        let overlay = render_overlay(crop, &grid, alpha)?;
        save_saliency(out, &grid, &overlay, Some(entry.label), Some(pred.label))?;
        sheet.push((entry.label, overlay.pixels));
    }
    let items: Vec<_> = sheet.iter().map(|(l, p)| (*l, p)).collect();
    contact_sheet(&items, 4, 112).save_png(out.join("contact_sheet.png"))?;
    log::info!("wrote {} overlays to {}", sheet.len(), out.display());
    Ok(())
}

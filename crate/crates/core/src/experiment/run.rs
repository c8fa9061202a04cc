use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use super::metrics::{evaluate_features, Metrics};
use super::split::{check_split, load_split, save_split, subject_disjoint_split, SplitAssignment};
use crate::backbone::{extract_activations, extract_features, fingerprint, load_backbone, BackboneHandle};
use crate::config::{BackboneEntry, RunConfig};
use crate::error::{Error, Result};
use crate::explain::{contact_sheet, eigencam_with, render_overlay, save_saliency};
use crate::ingest::{load_manifest, summarize, ConditionLabel, DatasetManifest, FrameRecord};
use crate::preprocess::{load_sidecar, localizer_from_id, preprocess_records, FaceCrop, FaceLocalizer, PreprocessOutcome};
use crate::probe::{init_probe, predict, train_probe, AugmentedFeatures, ProbeCheckpoint, TrainingCurve};
use crate::report::{emit_curves, emit_table, ErrorRecord, EvalReport, ReportRow};
use crate::rng::derive_seed;

/// Version of the run-directory layout, written to `LAYOUT_VERSION`.
pub const LAYOUT_VERSION: u32 = 1;

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub root: PathBuf,
}

impl RunArtifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunArtifacts { root: root.into() }
    }

    pub fn layout_version(&self) -> PathBuf {
        self.root.join("LAYOUT_VERSION")
    }
    pub fn config_verbatim(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }
    pub fn dataset_summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn dropped_frames(&self) -> PathBuf {
        self.root.join("dropped_frames.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn table(&self) -> PathBuf {
        self.root.join("table.txt")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("run.log")
    }
    pub fn failure(&self) -> PathBuf {
        self.root.join("failure.json")
    }
    pub fn backbone_dir(&self, id: &str) -> PathBuf {
        self.root.join("backbones").join(id)
    }
    pub fn checkpoint(&self, id: &str) -> PathBuf {
        self.backbone_dir(id).join("probe.json")
    }
    pub fn curve(&self, id: &str) -> PathBuf {
        self.backbone_dir(id).join("curve.csv")
    }
    pub fn metrics(&self, id: &str) -> PathBuf {
        self.backbone_dir(id).join("metrics.json")
    }
    pub fn backbone_failure(&self, id: &str) -> PathBuf {
        self.backbone_dir(id).join("failure.json")
    }
    pub fn saliency_dir(&self, id: &str) -> PathBuf {
        self.backbone_dir(id).join("saliency")
    }
    pub fn contact_sheet(&self, id: &str) -> PathBuf {
        self.saliency_dir(id).join("contact_sheet.png")
    }
}

struct RunLog {
    file: Mutex<File>,
    start: Instant,
}

impl RunLog {
    fn create(path: &Path) -> Result<RunLog> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            file: Mutex::new(file),
            start: Instant::now(),
        })
    }

    fn info(&self, message: impl AsRef<str>) {
        let message = message.as_ref();
        log::info!("{message}");
        let mut f = self.file.lock().expect("log lock");
        let _ = writeln!(f, "[{:>9.3}s] {message}", self.start.elapsed().as_secs_f64());
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Crops and labels for one split side.
struct SidePrep {
    crops: Vec<FaceCrop>,
    labels: Vec<usize>,
}

impl From<PreprocessOutcome> for SidePrep {
    fn from(p: PreprocessOutcome) -> Self {
        SidePrep {
            crops: p.crops,
            labels: p.labels.iter().map(|l| l.index()).collect(),
        }
    }
}

#[derive(Serialize)]
struct BackboneMetrics<'a> {
    backbone: &'a str,
    weights_source: &'a str,
    fingerprint: &'a str,
    feature_dim: usize,
    train: &'a Metrics,
    test: &'a Metrics,
}

/// Run every configured backbone end to end and write the run directory.
///
/// A failing backbone is recorded in its row and in a `failure.json`
/// marker; the remaining backbones still run. Failures before the
/// per-backbone stage (manifest, split, preprocessing) abort the run after
/// writing a top-level `failure.json`.
pub fn run_experiment(cfg: &RunConfig, verbatim_config: Option<&str>) -> Result<EvalReport> {
    cfg.validate()?;
    let art = RunArtifacts::new(&cfg.output_dir);
    std::fs::create_dir_all(&art.root).map_err(|e| Error::io(&art.root, e))?;
    let _ = std::fs::remove_file(art.failure());
    let log = RunLog::create(&art.log())?;
    let result = run_inner(cfg, verbatim_config, &art, &log);
    if let Err(e) = &result {
        log.info(format!("run failed: {e}"));
        write_json(&art.failure(), &ErrorRecord::from(e))?;
    }
    result
}

fn run_inner(cfg: &RunConfig, verbatim: Option<&str>, art: &RunArtifacts, log: &RunLog) -> Result<EvalReport> {
    write_text(&art.layout_version(), &format!("{LAYOUT_VERSION}\n"))?;
    let snapshot = cfg.to_toml();
    write_text(&art.config_snapshot(), &snapshot)?;
    write_text(&art.config_verbatim(), verbatim.unwrap_or(&snapshot))?;
    log.info(format!("run directory {}", art.root.display()));

    let manifest = load_manifest(&cfg.dataset.manifest)?;
    let summary = summarize(&manifest);
    write_json(&art.dataset_summary(), &summary)?;
    log.info(format!(
        "manifest: {} frames, {} subjects, {} videos",
        summary.n_frames, summary.n_subjects, summary.n_videos
    ));

    let split = match &cfg.split.file {
        Some(path) => {
            let s = load_split(path)?;
            check_split(&s, &manifest)?;
            s
        }
        None => subject_disjoint_split(
            &manifest,
            cfg.split.n_train_subjects,
            cfg.split.n_test_subjects,
            cfg.seeds.split,
            cfg.split.stratify_tolerance,
        )?,
    };
    save_split(&split, &art.split())?;
    log.info(format!(
        "split: {} train subjects / {} frames, {} test subjects / {} frames, {} excluded, stratified={}",
        split.train_subjects.len(),
        split.train_frames.len(),
        split.test_subjects.len(),
        split.test_frames.len(),
        split.excluded.len(),
        split.stratified
    ));

    let localizer: Box<dyn FaceLocalizer> = match (&cfg.dataset.boxes, &cfg.dataset.detector) {
        (Some(path), _) => Box::new(load_sidecar(path)?),
        (None, Some(id)) => localizer_from_id(id)?,
        (None, None) => localizer_from_id(crate::config::DEFAULT_DETECTOR)?,
    };
    let (train, test, dropped) = preprocess_split(cfg, &manifest, &split, localizer.as_ref())?;
    write_json(&art.dropped_frames(), &dropped)?;
    log.info(format!(
        "preprocess ({}): {} train crops, {} test crops, {} frames dropped without a face",
        localizer.id(),
        train.crops.len(),
        test.crops.len(),
        dropped.len()
    ));
    if train.crops.is_empty() || test.crops.is_empty() {
        return Err(Error::EmptySplit(format!(
            "{} train and {} test frames remain after face localization",
            train.crops.len(),
            test.crops.len()
        )));
    }

    let mut rows = Vec::new();
    let mut curves = BTreeMap::new();
    for entry in &cfg.backbones {
        let dir = art.backbone_dir(&entry.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let _ = std::fs::remove_file(art.backbone_failure(&entry.id));
        match run_backbone(cfg, entry, &train, &test, art, log) {
            Ok((row, curve)) => {
                curves.insert(entry.id.clone(), curve);
                rows.push(row);
            }
            Err(e) => {
                log.info(format!("{}: failed: {e}", entry.id));
                write_json(&art.backbone_failure(&entry.id), &ErrorRecord::from(&e))?;
                rows.push(ReportRow::failed(&entry.spec()?, &e));
            }
        }
    }

    let mut report = EvalReport::new(rows);
    report.curves = curves;
    report.config = Some(cfg.clone());
    report.dataset = Some(summary);
    report.split = Some(split.descriptor());
    report.dropped_frames = dropped.len();
    write_text(&art.report(), &report.to_json())?;
    let table = emit_table(&report);
    write_text(&art.table(), &table)?;
    if !report.curves.is_empty() {
        emit_curves(&report.curves, &art.root)?;
    }
    log.info(format!("results:\n{table}"));
    Ok(report)
}

fn preprocess_split(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    localizer: &dyn FaceLocalizer,
) -> Result<(SidePrep, SidePrep, Vec<crate::preprocess::DroppedFrame>)> {
    let by_id: BTreeMap<&str, &FrameRecord> = manifest.records.iter().map(|r| (r.frame_id.as_str(), r)).collect();
    let side = |frames: &[String]| -> Result<PreprocessOutcome> {
        let records: Vec<&FrameRecord> = frames
            .iter()
            .map(|f| {
                by_id
                    .get(f.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("split frame {f} not in manifest")))
            })
            .collect::<Result<_>>()?;
        preprocess_records(&cfg.dataset.manifest, &records, localizer, cfg.dataset.min_confidence)
    };
    let mut train = side(&split.train_frames)?;
    let mut test = side(&split.test_frames)?;
    let mut dropped = std::mem::take(&mut train.dropped);
    dropped.append(&mut test.dropped);
    Ok((train.into(), test.into(), dropped))
}

fn run_backbone(
    cfg: &RunConfig,
    entry: &BackboneEntry,
    train: &SidePrep,
    test: &SidePrep,
    art: &RunArtifacts,
    log: &RunLog,
) -> Result<(ReportRow, TrainingCurve)> {
    let spec = entry.spec()?;
    let handle = load_backbone(&spec, &entry.weights_ref()?)?.with_pooling(entry.pooling);
    let before = fingerprint(&handle);
    log.info(format!(
        "{}: weights {} fingerprint {before} feature_dim {}",
        entry.id,
        handle.weights_source(),
        handle.feature_dim()
    ));

    let optimizer = cfg.optimizer.for_family(spec.family);
    let probe_seed = derive_seed(cfg.seeds.probe_init, &["probe", &entry.id]);
    let train_seed = derive_seed(cfg.seeds.training, &["train", &entry.id]);
    let probe = init_probe(handle.feature_dim(), spec.clone(), probe_seed)?;

    let test_features = extract_features(&handle, &test.crops)?.vectors.mapv(f64::from);
    let mut source = AugmentedFeatures::new(
        &handle,
        &train.crops,
        cfg.augmentation.clone(),
        train_seed,
        cfg.training.augmentation_views,
    );
    let outcome = train_probe(probe, &mut source, &train.labels, &test_features, &test.labels, optimizer, train_seed)?;
    let after = fingerprint(&handle);
    if after != before {
        return Err(Error::FrozenViolation { before, after });
    }

    let train_metrics = evaluate_features(&outcome.probe, &outcome.final_train_features, &train.labels)?;
    let test_metrics = evaluate_features(&outcome.probe, &test_features, &test.labels)?;
    ProbeCheckpoint::new(&outcome.probe, &before, optimizer).save(&art.checkpoint(&entry.id))?;
    write_text(&art.curve(&entry.id), &outcome.curve.to_csv())?;
    write_json(
        &art.metrics(&entry.id),
        &BackboneMetrics {
            backbone: &entry.id,
            weights_source: handle.weights_source(),
            fingerprint: &before,
            feature_dim: handle.feature_dim(),
            train: &train_metrics,
            test: &test_metrics,
        },
    )?;
    log.info(format!(
        "{}: train accuracy {:.4}, test accuracy {:.4}, fingerprint unchanged",
        entry.id, train_metrics.accuracy, test_metrics.accuracy
    ));

    if cfg.explain.frames_per_label > 0 {
        let n = explain_test_frames(cfg, &handle, &outcome.probe, test, &art.saliency_dir(&entry.id), &art.contact_sheet(&entry.id))?;
        log.info(format!("{}: wrote {n} saliency overlays", entry.id));
    }

    let mut row = ReportRow::new(&spec, outcome.curve.last().map_or(0.0, |r| r.train_accuracy), test_metrics.accuracy);
    row.train_metrics = Some(train_metrics);
    row.val_metrics = Some(test_metrics);
    row.fingerprint = Some(before);
    Ok((row, outcome.curve))
}

/// Eigen-CAM overlays for the first `frames_per_label` test frames of each
/// label, plus a contact sheet. Returns the number of overlays.
fn explain_test_frames(
    cfg: &RunConfig,
    handle: &BackboneHandle,
    probe: &crate::probe::ProbeModel,
    test: &SidePrep,
    dir: &Path,
    sheet_path: &Path,
) -> Result<usize> {
    let mut chosen = Vec::new();
    for label in [ConditionLabel::PositiveAnticipation, ConditionLabel::Frustration] {
        chosen.extend(
            test.labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == label.index())
                .take(cfg.explain.frames_per_label)
                .map(|(i, _)| (i, label)),
        );
    }
    let crops: Vec<FaceCrop> = chosen.iter().map(|&(i, _)| test.crops[i].clone()).collect();
    if crops.is_empty() {
        return Ok(0);
    }
    let features = extract_features(handle, &crops)?.vectors.mapv(f64::from);
    let predictions = predict(probe, &features.view())?;
    let mut overlays = Vec::new();
    for ((crop, &(_, label)), pred) in crops.iter().zip(&chosen).zip(&predictions) {
        let activation = extract_activations(handle, crop)?;
        let grid = eigencam_with(&activation, cfg.explain.centered)?.with_frame_id(&crop.source_frame_id);
        let overlay = render_overlay(crop, &grid, cfg.explain.alpha)?;
        save_saliency(dir, &grid, &overlay, Some(label), Some(pred.label))?;
        overlays.push((label, overlay.pixels));
    }
    let items: Vec<(ConditionLabel, &crate::imaging::RgbImage)> = overlays.iter().map(|(l, p)| (*l, p)).collect();
    contact_sheet(&items, cfg.explain.columns, 112).save_png(sheet_path)?;
    Ok(overlays.len())
}

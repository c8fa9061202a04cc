//! Python bindings for the affpipe toolkit.
//!
//! Arrays cross the boundary as nested lists; structured results (summaries,
//! splits, reports) come back as plain dicts decoded from their JSON form.

use std::path::PathBuf;

use affpipe::backbone::{
    extract_activations, extract_features, fingerprint, load_backbone, ActivationTensor, BackboneHandle, BackboneSpec,
    WeightsRef,
};
use affpipe::config::RunConfig;
use affpipe::experiment::{run_experiment as run, subject_disjoint_split as split};
use affpipe::explain::{eigencam_with, SaliencyGrid};
use affpipe::imaging::RgbImage;
use affpipe::ingest::{load_manifest, summarize as summarize_manifest};
use affpipe::preprocess::{load_crops, FaceBox, FaceCrop, MODEL_SIDE};
use affpipe::probe::{self, AdamState, OptimizerConfig, ProbeCheckpoint, ProbeModel};
use affpipe::report::{emit_table as render_table, EvalReport, ReportRow};
use affpipe::synthetic::{write_face_fixture, FixtureSpec};
use ndarray::{Array2, Array3};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(affpipe_py, AffpipeError, PyException, "Raised with args (code, message).");

fn err(e: affpipe::Error) -> PyErr {
    AffpipeError::new_err((e.code(), e.to_string()))
}

fn to_dict<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| AffpipeError::new_err(("SERIALIZATION", e.to_string())))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows_to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(err(affpipe::Error::Shape("ragged rows".into())));
    }
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("n·d values"))
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn spec(id: &str) -> PyResult<BackboneSpec> {
    BackboneSpec::from_id(id).map_err(err)
}

/// A 224×224 crop from row-major H×W×3 floats in [0, 1].
fn crop_from_pixels(pixels: Vec<f32>) -> PyResult<FaceCrop> {
    let data = Array3::from_shape_vec((MODEL_SIDE, MODEL_SIDE, 3), pixels)
        .map_err(|_| err(affpipe::Error::Shape(format!("expected {MODEL_SIDE}·{MODEL_SIDE}·3 pixel values"))))?;
    let pixels = RgbImage::new(data).map_err(err)?;
    Ok(FaceCrop {
        source_box: FaceBox::full(&pixels),
        pixels,
        source_frame_id: String::new(),
    })
}

/// A frozen feature extractor.
#[pyclass(name = "Backbone", frozen)]
struct PyBackbone {
    handle: BackboneHandle,
}

#[pymethods]
impl PyBackbone {
    /// Load `backbone_id` from `weights`: `synthetic:<seed>`, a safetensors
    /// path, or a cache name (default: the id itself).
    #[new]
    #[pyo3(signature = (backbone_id, weights=None))]
    fn new(py: Python<'_>, backbone_id: &str, weights: Option<&str>) -> PyResult<Self> {
        let spec = spec(backbone_id)?;
        let weights = WeightsRef::parse(weights.unwrap_or(backbone_id)).map_err(err)?;
        let handle = py.detach(|| load_backbone(&spec, &weights)).map_err(err)?;
        Ok(PyBackbone { handle })
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.handle.feature_dim()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        fingerprint(&self.handle)
    }

    #[getter]
    fn spec(&self) -> String {
        self.handle.spec().to_string()
    }

    /// Pooled feature vector of one crop given as 224·224·3 floats.
    fn features(&self, py: Python<'_>, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let crop = crop_from_pixels(pixels)?;
        let batch = py.detach(|| extract_features(&self.handle, &[crop])).map_err(err)?;
        Ok(batch.vectors.row(0).to_vec())
    }

    /// Features for every crop in a directory written by `preprocess`.
    /// Returns `(frame_ids, rows)`.
    fn features_for_crops(&self, py: Python<'_>, crops_dir: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<f32>>)> {
        let crops: Vec<FaceCrop> = load_crops(&crops_dir).map_err(err)?.into_iter().map(|(c, _)| c).collect();
        let batch = py.detach(|| extract_features(&self.handle, &crops)).map_err(err)?;
        let rows = batch.vectors.rows().into_iter().map(|r| r.to_vec()).collect();
        Ok((batch.frame_ids, rows))
    }

    /// Final activations of one crop: `(shape, flat values)`.
    fn activations(&self, py: Python<'_>, pixels: Vec<f32>) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let crop = crop_from_pixels(pixels)?;
        let act = py.detach(|| extract_activations(&self.handle, &crop)).map_err(err)?;
        let flat = match &act {
            ActivationTensor::Spatial(a) => a.iter().copied().collect(),
            ActivationTensor::Tokens { data, .. } => data.iter().copied().collect(),
        };
        Ok((act.shape(), flat))
    }

    /// Eigen-CAM saliency of one crop; see [`eigencam_spatial`].
    #[pyo3(signature = (pixels, centered=false))]
    fn saliency(&self, py: Python<'_>, pixels: Vec<f32>, centered: bool) -> PyResult<(Vec<Vec<f64>>, bool)> {
        let crop = crop_from_pixels(pixels)?;
        let grid = py
            .detach(|| extract_activations(&self.handle, &crop).and_then(|a| eigencam_with(&a, centered)))
            .map_err(err)?;
        Ok(grid_out(&grid))
    }
}

fn grid_out(grid: &SaliencyGrid) -> (Vec<Vec<f64>>, bool) {
    (array_to_rows(&grid.values), grid.degenerate)
}

/// Eigen-CAM over an H×W×C map given as flat row-major values. Returns the
/// normalized grid and whether it was degenerate.
#[pyfunction]
#[pyo3(signature = (values, height, width, channels, centered=false))]
fn eigencam_spatial(
    values: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
    centered: bool,
) -> PyResult<(Vec<Vec<f64>>, bool)> {
    let a = Array3::from_shape_vec((height, width, channels), values)
        .map_err(|_| err(affpipe::Error::Shape("values do not match height·width·channels".into())))?;
    Ok(grid_out(&eigencam_with(&ActivationTensor::Spatial(a), centered).map_err(err)?))
}

/// Eigen-CAM over (1 + T) × C transformer tokens, class token first.
#[pyfunction]
#[pyo3(signature = (tokens, patch_size, centered=false))]
fn eigencam_tokens(tokens: Vec<Vec<f64>>, patch_size: usize, centered: bool) -> PyResult<(Vec<Vec<f64>>, bool)> {
    let data = rows_to_array(tokens)?.mapv(|x| x as f32);
    let act = ActivationTensor::Tokens { data, patch_size };
    Ok(grid_out(&eigencam_with(&act, centered).map_err(err)?))
}

/// Linear probe over frozen features.
#[pyclass(name = "Probe")]
struct PyProbe {
    probe: ProbeModel,
}

#[pymethods]
impl PyProbe {
    #[new]
    fn new(feature_dim: usize, backbone_id: &str, seed: u64) -> PyResult<Self> {
        let probe = probe::init_probe(feature_dim, spec(backbone_id)?, seed).map_err(err)?;
        Ok(PyProbe { probe })
    }

    /// Load the probe from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let probe = ProbeCheckpoint::load(&path).and_then(|c| c.to_probe()).map_err(err)?;
        Ok(PyProbe { probe })
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        array_to_rows(&self.probe.weights)
    }

    #[setter]
    fn set_weights(&mut self, rows: Vec<Vec<f64>>) -> PyResult<()> {
        let w = rows_to_array(rows)?;
        if w.dim() != self.probe.weights.dim() {
            return Err(err(affpipe::Error::Shape(format!("expected {:?}", self.probe.weights.dim()))));
        }
        self.probe.weights = w;
        Ok(())
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.probe.bias.to_vec()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.probe.feature_dim()
    }

    /// N × 2 logits.
    fn forward(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = rows_to_array(features)?;
        Ok(array_to_rows(&probe::forward(&self.probe, &x.view()).map_err(err)?))
    }

    /// Mean softmax cross-entropy; labels are 0 (negative) or 1 (positive).
    fn loss(&self, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let x = rows_to_array(features)?;
        let logits = probe::forward(&self.probe, &x.view()).map_err(err)?;
        probe::loss(&logits.view(), &labels).map_err(err)
    }

    /// `(label, confidence)` per row, label being "negative" or "positive".
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<(String, f64)>> {
        let x = rows_to_array(features)?;
        let preds = probe::predict(&self.probe, &x.view()).map_err(err)?;
        Ok(preds.into_iter().map(|p| (p.label.as_str().to_string(), p.confidence)).collect())
    }
}

/// One Adam step on a flat parameter vector. Returns the updated
/// `(params, m, v, t)`.
#[pyfunction]
#[pyo3(signature = (params, grads, m, v, t, learning_rate, beta1=0.0, beta2=0.999, epsilon=1e-8))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn adam_step(
    mut params: Vec<f64>,
    grads: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, u64)> {
    let cfg = OptimizerConfig {
        beta1,
        beta2,
        epsilon,
        ..OptimizerConfig::with_learning_rate(learning_rate)
    };
    cfg.validate().map_err(err)?;
    let mut state = AdamState { m, v, t };
    probe::adam_step(&mut params, &grads, &mut state, &cfg).map_err(err)?;
    Ok((params, state.m, state.v, state.t))
}

/// Dataset statistics of a manifest file.
#[pyfunction]
fn summarize(py: Python<'_>, manifest: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let m = load_manifest(&manifest).map_err(err)?;
    to_dict(py, &summarize_manifest(&m))
}

/// Number of frame records in a manifest file.
#[pyfunction]
fn count_frames(manifest: PathBuf) -> PyResult<usize> {
    Ok(load_manifest(&manifest).map_err(err)?.records.len())
}

/// Subject-disjoint train/test assignment as a dict.
#[pyfunction]
#[pyo3(signature = (manifest, n_train, n_test, seed=0, tolerance=0.10))]
fn subject_disjoint_split(
    py: Python<'_>,
    manifest: PathBuf,
    n_train: usize,
    n_test: usize,
    seed: u64,
    tolerance: f64,
) -> PyResult<Bound<'_, PyAny>> {
    let m = load_manifest(&manifest).map_err(err)?;
    to_dict(py, &split(&m, n_train, n_test, seed, tolerance).map_err(err)?)
}

/// Run a TOML experiment config end to end; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (config, output_dir=None))]
fn run_experiment(py: Python<'_>, config: PathBuf, output_dir: Option<PathBuf>) -> PyResult<Bound<'_, PyAny>> {
    let (mut cfg, text) = RunConfig::load(&config).map_err(err)?;
    if let Some(out) = output_dir {
        cfg.output_dir = std::path::absolute(&out).map_err(|e| err(affpipe::Error::io(&out, e)))?;
    }
    let report = py.detach(|| run(&cfg, Some(&text))).map_err(err)?;
    to_dict(py, &report)
}

/// Comparison table from `(backbone_id, train_accuracy, val_accuracy)` rows.
#[pyfunction]
fn emit_table(rows: Vec<(String, f64, f64)>) -> PyResult<String> {
    let rows = rows
        .iter()
        .map(|(id, t, v)| Ok(ReportRow::new(&spec(id)?, *t, *v)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(render_table(&EvalReport::new(rows)))
}

/// Comparison table of a saved `report.json`.
#[pyfunction]
fn emit_table_from_report(report: PathBuf) -> PyResult<String> {
    Ok(render_table(&EvalReport::load(&report).map_err(err)?))
}

/// Supported backbone ids in table order.
#[pyfunction]
fn backbone_ids() -> PyResult<Vec<String>> {
    BackboneSpec::all()
        .iter()
        .map(|s| s.id().map(str::to_string).map_err(err))
        .collect()
}

/// Write a synthetic face dataset (frames, manifest, box sidecar) to `out`.
#[pyfunction]
#[pyo3(signature = (out, subjects=10, frames_per_subject=5, side=128, seed=0))]
fn write_fixture(out: PathBuf, subjects: usize, frames_per_subject: usize, side: usize, seed: u64) -> PyResult<usize> {
    let spec = FixtureSpec {
        n_subjects: subjects,
        frames_per_subject,
        image_side: side,
        seed,
    };
    Ok(write_face_fixture(&out, &spec).map_err(err)?.records.len())
}

#[pymodule]
fn affpipe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AffpipeError", m.py().get_type::<AffpipeError>())?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyProbe>()?;
    m.add_function(wrap_pyfunction!(eigencam_spatial, m)?)?;
    m.add_function(wrap_pyfunction!(eigencam_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(adam_step, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(count_frames, m)?)?;
    m.add_function(wrap_pyfunction!(subject_disjoint_split, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(emit_table, m)?)?;
    m.add_function(wrap_pyfunction!(emit_table_from_report, m)?)?;
    m.add_function(wrap_pyfunction!(backbone_ids, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixture, m)?)?;
    Ok(())
}

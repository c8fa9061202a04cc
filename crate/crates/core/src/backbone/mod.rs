//! The four frozen feature extractors: ResNet-50 and ViT-Small, each with
//! supervised or self-distillation (DINO) pretraining.
//!
//! Weights are read from safetensors files using torchvision/timm tensor
//! names, or generated from a seed (`synthetic:<seed>`) for tests and
//! offline runs. A [`BackboneHandle`] exposes no way to modify its
//! parameters; [`fingerprint`] hashes them so callers can prove that.

mod ops;
mod params;
mod resnet;
mod vit;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use params::{Init, ParamDef, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::preprocess::{FaceCrop, MODEL_SIDE};

/// Channel statistics of the pretraining data, applied before every backbone.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Environment variable naming the weight cache directory.
pub const CACHE_ENV: &str = "AFFPIPE_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    ResidualCnn,
    VisionTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pretraining {
    Supervised,
    SelfDistillation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub pretraining: Pretraining,
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_checksum: Option<String>,
}

/// Supported (id, family, pretraining, variant), in comparison-table order.
pub const SUPPORTED: [(&str, Family, Pretraining, &str); 4] = [
    ("sup-resnet50", Family::ResidualCnn, Pretraining::Supervised, "depth-50"),
    ("sup-vit-s16", Family::VisionTransformer, Pretraining::Supervised, "small/16"),
    ("dino-resnet50", Family::ResidualCnn, Pretraining::SelfDistillation, "depth-50"),
    ("dino-vit-s8", Family::VisionTransformer, Pretraining::SelfDistillation, "small/8"),
];

fn supported_list() -> String {
    SUPPORTED
        .iter()
        .map(|(id, f, p, v)| format!("{id} ({f:?}, {p:?}, {v})"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl BackboneSpec {
    pub fn new(family: Family, pretraining: Pretraining, variant: impl Into<String>) -> Self {
        BackboneSpec {
            family,
            pretraining,
            variant: variant.into(),
            weights_checksum: None,
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        SUPPORTED
            .iter()
            .find(|(sid, ..)| *sid == id)
            .map(|&(_, f, p, v)| BackboneSpec::new(f, p, v))
            .ok_or_else(|| Error::UnsupportedSpec {
                requested: id.to_string(),
                supported: supported_list(),
            })
    }

    pub fn all() -> Vec<BackboneSpec> {
        SUPPORTED.iter().map(|&(_, f, p, v)| BackboneSpec::new(f, p, v)).collect()
    }

    pub fn with_checksum(mut self, checksum: impl Into<String>) -> Self {
        self.weights_checksum = Some(checksum.into());
        self
    }

    /// Position among the supported combinations, or `None` if unsupported.
    pub fn table_rank(&self) -> Option<usize> {
        SUPPORTED
            .iter()
            .position(|&(_, f, p, v)| f == self.family && p == self.pretraining && v == self.variant)
    }

    pub fn id(&self) -> Result<&'static str> {
        self.table_rank().map(|i| SUPPORTED[i].0).ok_or_else(|| Error::UnsupportedSpec {
            requested: format!("({:?}, {:?}, {})", self.family, self.pretraining, self.variant),
            supported: supported_list(),
        })
    }

    fn arch(&self) -> Result<Arch> {
        self.id()?;
        Ok(match self.family {
            Family::ResidualCnn => Arch::ResNet50,
            Family::VisionTransformer => {
                let patch = self
                    .variant
                    .strip_prefix("small/")
                    .and_then(|p| p.parse().ok())
                    .expect("supported variants are small/<patch>");
                Arch::VitSmall { patch }
            }
        })
    }

    pub fn pretraining_label(&self) -> &'static str {
        match self.pretraining {
            Pretraining::Supervised => "Sup.",
            Pretraining::SelfDistillation => "DINO",
        }
    }

    pub fn architecture_label(&self) -> String {
        match self.family {
            Family::ResidualCnn => "ResNet50".into(),
            Family::VisionTransformer => format!("ViT-S/{}", self.variant.trim_start_matches("small/")),
        }
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.id() {
            Ok(id) => f.write_str(id),
            Err(_) => write!(f, "({:?}, {:?}, {})", self.family, self.pretraining, self.variant),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arch {
    ResNet50,
    VitSmall { patch: usize },
}

impl Arch {
    fn layout(self) -> Vec<ParamDef> {
        match self {
            Arch::ResNet50 => resnet::layout(),
            Arch::VitSmall { patch } => vit::layout(patch, MODEL_SIDE),
        }
    }

    fn feature_dim(self) -> usize {
        match self {
            Arch::ResNet50 => resnet::FEATURE_DIM,
            Arch::VitSmall { .. } => vit::EMBED_DIM,
        }
    }

    /// Feature width as stored in the weights: the channel count of the last
    /// norm before pooling.
    fn feature_dim_from(self, params: &ParamStore) -> usize {
        match self {
            Arch::ResNet50 => params.get("layer4.2.bn3.weight").shape[0],
            Arch::VitSmall { .. } => params.get("norm.weight").shape[0],
        }
    }
}

/// How the probe input vector is pooled from the final activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePooling {
    /// Class token for transformers, global average pooling for CNNs.
    #[default]
    Standard,
    /// Mean over patch tokens for transformers (CNNs unchanged).
    MeanTokens,
}

/// A loaded backbone. Parameters are shared and immutable.
#[derive(Debug, Clone)]
pub struct BackboneHandle {
    spec: BackboneSpec,
    arch: Arch,
    params: Arc<ParamStore>,
    feature_dim: usize,
    weights_source: String,
    pooling: FeaturePooling,
}

impl BackboneHandle {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Always true: handles never expose their parameters mutably.
    pub fn frozen(&self) -> bool {
        true
    }

    pub fn weights_source(&self) -> &str {
        &self.weights_source
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn pooling(&self) -> FeaturePooling {
        self.pooling
    }

    pub fn with_pooling(mut self, pooling: FeaturePooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.params.save_safetensors(path)
    }

    /// Final activations and pooled feature for one crop.
    fn forward(&self, crop: &FaceCrop) -> Result<(Vec<f32>, ActivationTensor)> {
        let input = normalize_input(crop)?;
        Ok(match self.arch {
            Arch::ResNet50 => {
                let map = resnet::forward(&self.params, &input);
                let feature = ops::global_avg_pool(&map);
                let hwc = map.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
                (feature, ActivationTensor::Spatial(hwc))
            }
            Arch::VitSmall { patch } => {
                let tokens = vit::forward(&self.params, &input, patch);
                let feature = match self.pooling {
                    FeaturePooling::Standard => tokens.row(0).to_vec(),
                    FeaturePooling::MeanTokens => ops::mean_rows(&tokens.slice(ndarray::s![1.., ..])),
                };
                (feature, ActivationTensor::Tokens { data: tokens, patch_size: patch })
            }
        })
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightsRef {
    /// Seeded synthetic weights.
    Synthetic(u64),
    /// A safetensors file.
    File(PathBuf),
    /// A name resolved to `$AFFPIPE_CACHE/<name>.safetensors`.
    Registry(String),
}

impl WeightsRef {
    /// `synthetic:<seed>`, an existing path, or a registry name.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(seed) = s.strip_prefix("synthetic:") {
            return seed
                .parse()
                .map(WeightsRef::Synthetic)
                .map_err(|_| Error::InvalidArgument(format!("bad synthetic seed in `{s}`")));
        }
        let path = Path::new(s);
        if path.extension().is_some_and(|e| e == "safetensors") || path.exists() {
            return Ok(WeightsRef::File(path.to_path_buf()));
        }
        Ok(WeightsRef::Registry(s.to_string()))
    }

    pub fn describe(&self) -> String {
        match self {
            WeightsRef::Synthetic(seed) => format!("synthetic:{seed}"),
            WeightsRef::File(p) => p.display().to_string(),
            WeightsRef::Registry(name) => name.clone(),
        }
    }
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            std::env::var_os("HOME")
                .map(|h| PathBuf::from(h).join(".cache").join("affpipe"))
                .unwrap_or_else(|| PathBuf::from(".affpipe-cache"))
        })
}

/// Load a backbone and verify it against `spec.weights_checksum` when set.
pub fn load_backbone(spec: &BackboneSpec, weights: &WeightsRef) -> Result<BackboneHandle> {
    let arch = spec.arch()?;
    let layout = arch.layout();
    let params = match weights {
        WeightsRef::Synthetic(seed) => {
            let seed = crate::rng::derive_seed(*seed, &[spec.id()?]);
            ParamStore::synthetic(&layout, seed)
        }
        WeightsRef::File(path) => ParamStore::load_safetensors(path, &layout)?,
        WeightsRef::Registry(name) => {
            let path = cache_dir().join(format!("{name}.safetensors"));
            if !path.exists() {
                return Err(Error::WeightsNotFound(format!(
                    "registry id `{name}` (looked for {})",
                    path.display()
                )));
            }
            ParamStore::load_safetensors(&path, &layout)?
        }
    };
    let feature_dim = arch.feature_dim_from(&params);
    if feature_dim != arch.feature_dim() {
        return Err(Error::InvalidWeights(format!(
            "weights give feature width {feature_dim}, architecture expects {}",
            arch.feature_dim()
        )));
    }
    let handle = BackboneHandle {
        spec: spec.clone(),
        arch,
        params: Arc::new(params),
        feature_dim,
        weights_source: weights.describe(),
        pooling: FeaturePooling::Standard,
    };
    if let Some(expected) = &spec.weights_checksum {
        let actual = fingerprint(&handle);
        if &actual != expected {
            return Err(Error::ChecksumMismatch {
                expected: expected.clone(),
                actual,
            });
        }
    }
    Ok(handle)
}

/// Stable hash over all parameters in canonical order.
pub fn fingerprint(handle: &BackboneHandle) -> String {
    handle.params.fingerprint()
}

/// Layout of the final activations.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivationTensor {
    /// H × W × C map (residual CNN).
    Spatial(Array3<f32>),
    /// (1 + T) × C tokens with the class token first (transformer).
    Tokens { data: Array2<f32>, patch_size: usize },
}

impl ActivationTensor {
    pub fn channels(&self) -> usize {
        match self {
            ActivationTensor::Spatial(a) => a.dim().2,
            ActivationTensor::Tokens { data, .. } => data.ncols(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            ActivationTensor::Spatial(a) => a.shape().to_vec(),
            ActivationTensor::Tokens { data, .. } => data.shape().to_vec(),
        }
    }

    pub fn layout_name(&self) -> &'static str {
        match self {
            ActivationTensor::Spatial(_) => "spatial",
            ActivationTensor::Tokens { .. } => "tokens",
        }
    }
}

/// Pooled features for a batch of crops.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub vectors: Array2<f32>,
    pub frame_ids: Vec<String>,
    pub spec: BackboneSpec,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn normalize_input(crop: &FaceCrop) -> Result<Array3<f32>> {
    if !crop.is_standard() {
        return Err(Error::Shape(format!(
            "crop {} is {}×{}, expected {MODEL_SIDE}×{MODEL_SIDE}",
            crop.source_frame_id,
            crop.pixels.height(),
            crop.pixels.width()
        )));
    }
    let px = crop.pixels.data();
    Ok(Array3::from_shape_fn((3, MODEL_SIDE, MODEL_SIDE), |(c, y, x)| {
        (px[[y, x, c]] - PIXEL_MEAN[c]) / PIXEL_STD[c]
    }))
}

/// One feature row per crop, in input order.
pub fn extract_features(handle: &BackboneHandle, crops: &[FaceCrop]) -> Result<FeatureBatch> {
    if crops.is_empty() {
        return Err(Error::Shape("empty crop batch".into()));
    }
    let rows: Vec<Vec<f32>> = crops
        .par_iter()
        .map(|c| handle.forward(c).map(|(f, _)| f))
        .collect::<Result<_>>()?;
    let d = handle.feature_dim;
    let mut vectors = Array2::zeros((rows.len(), d));
    for (mut dst, src) in vectors.rows_mut().into_iter().zip(&rows) {
        dst.assign(&ndarray::ArrayView1::from(src.as_slice()));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape(format!("{}: non-finite features", handle.spec)));
    }
    Ok(FeatureBatch {
        vectors,
        frame_ids: crops.iter().map(|c| c.source_frame_id.clone()).collect(),
        spec: handle.spec.clone(),
    })
}

/// Final-block activations for one crop.
pub fn extract_activations(handle: &BackboneHandle, crop: &FaceCrop) -> Result<ActivationTensor> {
    handle.forward(crop).map(|(_, a)| a)
}

/// Write a feature batch as CSV: `frame_id,f0,...,f{D-1}`.
pub fn write_feature_csv(batch: &FeatureBatch, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("frame_id");
    for j in 0..batch.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (id, row) in batch.frame_ids.iter().zip(batch.vectors.rows()) {
        out.push_str(id);
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a feature CSV written by [`write_feature_csv`].
pub fn read_feature_csv(path: &Path, spec: BackboneSpec) -> Result<FeatureBatch> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let w = rec.len() - 1;
        if *width.get_or_insert(w) != w {
            return Err(bad("ragged feature row".into()));
        }
        ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            data.push(f.parse::<f32>().map_err(|_| bad(format!("bad value `{f}`")))?);
        }
    }
    let vectors = Array2::from_shape_vec((ids.len(), width.unwrap_or(0)), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureBatch {
        vectors,
        frame_ids: ids,
        spec,
    })
}

//! Run configuration (TOML). Relative paths are resolved against the
//! directory of the config file, and every default is written out in the
//! resolved snapshot.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, Family, FeaturePooling, WeightsRef};
use crate::error::{Error, Result};
use crate::preprocess::{AugmentConfig, DEFAULT_MIN_CONFIDENCE};
use crate::probe::OptimizerConfig;

pub const DEFAULT_DETECTOR: &str = "full-frame";
pub const DEFAULT_TRAIN_SUBJECTS: usize = 22;
pub const DEFAULT_TEST_SUBJECTS: usize = 7;
pub const DEFAULT_STRATIFY_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub backbones: Vec<BackboneEntry>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub augmentation: AugmentConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub explain: ExplainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub manifest: PathBuf,
    /// Precomputed face boxes (JSONL sidecar). Takes precedence over `detector`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<PathBuf>,
    /// Localizer id used when no sidecar is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
    #[serde(default = "default_min_confidence")]
    pub min_confidence: f64,
}

fn default_min_confidence() -> f64 {
    DEFAULT_MIN_CONFIDENCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// A previously written split file. When set the counts are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default = "default_train_subjects")]
    pub n_train_subjects: usize,
    #[serde(default = "default_test_subjects")]
    pub n_test_subjects: usize,
    /// Largest accepted gap between the positive-frame fractions of the two
    /// sides.
    #[serde(default = "default_stratify_tolerance")]
    pub stratify_tolerance: f64,
}

fn default_train_subjects() -> usize {
    DEFAULT_TRAIN_SUBJECTS
}
fn default_test_subjects() -> usize {
    DEFAULT_TEST_SUBJECTS
}
fn default_stratify_tolerance() -> f64 {
    DEFAULT_STRATIFY_TOLERANCE
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            file: None,
            n_train_subjects: DEFAULT_TRAIN_SUBJECTS,
            n_test_subjects: DEFAULT_TEST_SUBJECTS,
            stratify_tolerance: DEFAULT_STRATIFY_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneEntry {
    pub id: String,
    /// `synthetic:<seed>`, a safetensors path, or a registry name. Defaults
    /// to the backbone id looked up in the weights cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    #[serde(default)]
    pub pooling: FeaturePooling,
}

impl BackboneEntry {
    pub fn new(id: impl Into<String>, weights: impl Into<String>) -> Self {
        BackboneEntry {
            id: id.into(),
            weights: Some(weights.into()),
            checksum: None,
            pooling: FeaturePooling::Standard,
        }
    }

    pub fn spec(&self) -> Result<BackboneSpec> {
        let spec = BackboneSpec::from_id(&self.id)?;
        Ok(match &self.checksum {
            Some(c) => spec.with_checksum(c.clone()),
            None => spec,
        })
    }

    pub fn weights_ref(&self) -> Result<WeightsRef> {
        WeightsRef::parse(self.weights.as_deref().unwrap_or(&self.id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "cnn_optimizer")]
    pub residual_cnn: OptimizerConfig,
    #[serde(default = "vit_optimizer")]
    pub vision_transformer: OptimizerConfig,
}

fn cnn_optimizer() -> OptimizerConfig {
    OptimizerConfig::for_family(Family::ResidualCnn)
}
fn vit_optimizer() -> OptimizerConfig {
    OptimizerConfig::for_family(Family::VisionTransformer)
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            residual_cnn: cnn_optimizer(),
            vision_transformer: vit_optimizer(),
        }
    }
}

impl OptimizerSection {
    pub fn for_family(&self, family: Family) -> &OptimizerConfig {
        match family {
            Family::ResidualCnn => &self.residual_cnn,
            Family::VisionTransformer => &self.vision_transformer,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// 0: fresh augmentations every epoch. K > 0: K precomputed augmented
    /// views per crop, cycled over epochs.
    pub augmentation_views: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub probe_init: u64,
    /// Shuffling and augmentation.
    pub training: u64,
    /// Base seed for `synthetic:` weights given without one.
    pub weights: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// Test-side frames per label rendered after training. 0 disables.
    pub frames_per_label: usize,
    pub alpha: f64,
    pub centered: bool,
    pub columns: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            frames_per_label: 2,
            alpha: crate::explain::DEFAULT_ALPHA,
            centered: false,
            columns: 4,
        }
    }
}

fn absolutize(base: &Path, p: &Path) -> Result<PathBuf> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).map_err(|e| Error::io(&joined, e))
}

fn is_path_like(weights: &str) -> bool {
    !weights.starts_with("synthetic:") && (weights.contains('/') || weights.ends_with(".safetensors"))
}

impl RunConfig {
    /// Parse, resolve relative paths against `base_dir`, materialize
    /// defaults and validate.
    pub fn from_toml_str(text: &str, base_dir: &Path, origin: &Path) -> Result<RunConfig> {
        let raw: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        raw.resolve(base_dir)
    }

    /// Load a config file; returns the resolved config and the verbatim text.
    pub fn load(path: &Path) -> Result<(RunConfig, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        Ok((RunConfig::from_toml_str(&text, base, path)?, text))
    }

    pub fn resolve(mut self, base_dir: &Path) -> Result<RunConfig> {
        self.output_dir = absolutize(base_dir, &self.output_dir)?;
        self.dataset.manifest = absolutize(base_dir, &self.dataset.manifest)?;
        if let Some(b) = &self.dataset.boxes {
            self.dataset.boxes = Some(absolutize(base_dir, b)?);
            self.dataset.detector = None;
        } else if self.dataset.detector.is_none() {
            self.dataset.detector = Some(DEFAULT_DETECTOR.to_string());
        }
        if let Some(f) = &self.split.file {
            self.split.file = Some(absolutize(base_dir, f)?);
        }
        for entry in &mut self.backbones {
            match &entry.weights {
                Some(w) if is_path_like(w) => {
                    entry.weights = Some(absolutize(base_dir, Path::new(w))?.display().to_string());
                }
                Some(w) if w == "synthetic" => entry.weights = Some(format!("synthetic:{}", self.seeds.weights)),
                Some(_) => {}
                None => entry.weights = Some(entry.id.clone()),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbones.is_empty() {
            return bad("at least one backbone is required".into());
        }
        let mut seen = BTreeSet::new();
        for b in &self.backbones {
            b.spec()?;
            b.weights_ref()?;
            if !seen.insert(b.id.as_str()) {
                return bad(format!("backbone `{}` listed twice", b.id));
            }
        }
        if !(0.0..=1.0).contains(&self.dataset.min_confidence) {
            return bad(format!("min_confidence {} outside [0, 1]", self.dataset.min_confidence));
        }
        if self.split.file.is_none() && (self.split.n_train_subjects == 0 || self.split.n_test_subjects == 0) {
            return bad("both split sides need at least one subject".into());
        }
        if !(0.0..=1.0).contains(&self.split.stratify_tolerance) {
            return bad(format!("stratify_tolerance {} outside [0, 1]", self.split.stratify_tolerance));
        }
        self.optimizer.residual_cnn.validate()?;
        self.optimizer.vision_transformer.validate()?;
        self.augmentation.validate()?;
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            return bad(format!("explain.alpha {} outside [0, 1]", self.explain.alpha));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "runs/a"

[dataset]
manifest = "data/manifest.jsonl"

[[backbones]]
id = "dino-vit-s8"
weights = "synthetic:3"
"#;

    #[test]
    fn defaults_are_materialized() {
        let cfg = RunConfig::from_toml_str(MINIMAL, Path::new("/tmp/x"), Path::new("c.toml")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x/runs/a"));
        assert_eq!(cfg.dataset.detector.as_deref(), Some("full-frame"));
        assert_eq!(cfg.split.n_train_subjects, 22);
        assert_eq!(cfg.optimizer.vision_transformer.learning_rate, 5e-6);
        assert_eq!(cfg.optimizer.residual_cnn.learning_rate, 1e-4);
        assert_eq!(cfg.optimizer.residual_cnn.beta1, 0.0);
        let text = cfg.to_toml();
        for key in ["min_confidence", "beta2", "epochs", "batch_size", "crop_area_min", "augmentation_views", "frames_per_label"] {
            assert!(text.contains(key), "{key} missing from snapshot:\n{text}");
        }
    }

    #[test]
    fn snapshot_is_a_fixed_point() {
        let cfg = RunConfig::from_toml_str(MINIMAL, Path::new("/tmp/x"), Path::new("c.toml")).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml(), Path::new("/elsewhere"), Path::new("s.toml")).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn weights_defaults_and_paths() {
        let text = r#"
output_dir = "out"
[dataset]
manifest = "m.jsonl"
boxes = "b.jsonl"
[[backbones]]
id = "sup-resnet50"
[[backbones]]
id = "sup-vit-s16"
weights = "w/vit.safetensors"
[[backbones]]
id = "dino-resnet50"
weights = "synthetic"
[seeds]
weights = 9
"#;
        let cfg = RunConfig::from_toml_str(text, Path::new("/r"), Path::new("c.toml")).unwrap();
        assert_eq!(cfg.backbones[0].weights.as_deref(), Some("sup-resnet50"));
        assert_eq!(cfg.backbones[1].weights.as_deref(), Some("/r/w/vit.safetensors"));
        assert_eq!(cfg.backbones[2].weights.as_deref(), Some("synthetic:9"));
        assert_eq!(cfg.dataset.boxes, Some(PathBuf::from("/r/b.jsonl")));
        assert_eq!(cfg.dataset.detector, None);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = Path::new("/tmp");
        let unknown = MINIMAL.replace("dino-vit-s8", "dino-vit-b16");
        assert_eq!(RunConfig::from_toml_str(&unknown, base, Path::new("c")).unwrap_err().code(), "UNSUPPORTED_SPEC");
        let dup = format!("{MINIMAL}\n[[backbones]]\nid = \"dino-vit-s8\"\n");
        assert_eq!(RunConfig::from_toml_str(&dup, base, Path::new("c")).unwrap_err().code(), "CONFIG_ERROR");
        let typo = format!("{MINIMAL}\n[training]\naugmentation_view = 2\n");
        assert_eq!(RunConfig::from_toml_str(&typo, base, Path::new("c")).unwrap_err().code(), "PARSE_ERROR");
        let lr = format!("{MINIMAL}\n[optimizer.residual_cnn]\nlearning_rate = -1.0\n");
        assert_eq!(RunConfig::from_toml_str(&lr, base, Path::new("c")).unwrap_err().code(), "CONFIG_ERROR");
    }
}

//! Linear probe over frozen features: a 2×D affine map trained with softmax
//! cross-entropy and Adam.

mod adam;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, OptimizerConfig, RESNET_LEARNING_RATE, VIT_LEARNING_RATE};
pub use train::{
    train, train_probe, AugmentedFeatures, EpochFeatures, EpochRecord, FixedFeatures, TrainOutcome,
    TrainingCurve,
};

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::ingest::ConditionLabel;

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// 2 × D, one row per class (negative, positive).
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub backbone_spec: BackboneSpec,
    pub seed: u64,
}

impl ProbeModel {
    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Weights uniform in the open interval (-1/√D, 1/√D); zero bias.
pub fn init_probe(feature_dim: usize, backbone_spec: BackboneSpec, seed: u64) -> Result<ProbeModel> {
    if feature_dim == 0 {
        return Err(Error::InvalidArgument("probe feature_dim must be positive".into()));
    }
    let bound = 1.0 / (feature_dim as f64).sqrt();
    let mut rng = crate::rng::derived(seed, &["probe-init"]);
    let weights = Array2::from_shape_simple_fn((NUM_CLASSES, feature_dim), || {
        let u: f64 = rng.sample(Open01);
        bound * (2.0 * u - 1.0)
    });
    Ok(ProbeModel {
        weights,
        bias: Array1::zeros(NUM_CLASSES),
        backbone_spec,
        seed,
    })
}

fn check_dim(probe: &ProbeModel, features: &ArrayView2<f64>) -> Result<()> {
    if features.ncols() != probe.feature_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, probe expects {}",
            features.ncols(),
            probe.feature_dim()
        )));
    }
    Ok(())
}

/// `features · weightsᵀ + bias`, N × 2.
pub fn forward(probe: &ProbeModel, features: &ArrayView2<f64>) -> Result<Array2<f64>> {
    check_dim(probe, features)?;
    let mut logits = features.dot(&probe.weights.t());
    logits += &probe.bias;
    Ok(logits)
}

fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn check_labels(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() || logits.ncols() != NUM_CLASSES {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            logits.dim(),
            labels.len()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::Shape("loss over an empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Shape(format!("label {bad} outside {{0, 1}}")));
    }
    Ok(())
}

/// Mean softmax cross-entropy.
pub fn loss(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    weighted_loss(logits, labels, None)
}

/// Cross-entropy weighted per class: `Σ w[yᵢ]·ℓᵢ / Σ w[yᵢ]`.
pub fn weighted_loss(logits: &ArrayView2<f64>, labels: &[usize], class_weights: Option<[f64; 2]>) -> Result<f64> {
    check_labels(logits, labels)?;
    let w = class_weights.unwrap_or([1.0, 1.0]);
    let mut total = 0.0;
    let mut norm = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        total -= w[y] * log_softmax(row)[y];
        norm += w[y];
    }
    Ok(total / norm)
}

/// Loss and its gradients with respect to (weights, bias).
pub fn loss_and_grad(
    probe: &ProbeModel,
    features: &ArrayView2<f64>,
    labels: &[usize],
    class_weights: Option<[f64; 2]>,
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let logits = forward(probe, features)?;
    check_labels(&logits.view(), labels)?;
    let w = class_weights.unwrap_or([1.0, 1.0]);
    let norm: f64 = labels.iter().map(|&y| w[y]).sum();
    let mut total = 0.0;
    let mut dlogits = Array2::zeros(logits.dim());
    for ((row, mut d), &y) in logits.rows().into_iter().zip(dlogits.rows_mut()).zip(labels) {
        let logp = log_softmax(row);
        total -= w[y] * logp[y];
        let scale = w[y] / norm;
        for k in 0..NUM_CLASSES {
            let target = if k == y { 1.0 } else { 0.0 };
            d[k] = (logp[k].exp() - target) * scale;
        }
    }
    let grad_w = dlogits.t().dot(features);
    let grad_b = dlogits.sum_axis(Axis(0));
    Ok((total / norm, grad_w, grad_b))
}

/// Inverse-frequency class weights, normalized to mean 1 over samples.
pub fn inverse_frequency_weights(labels: &[usize]) -> [f64; 2] {
    let n = labels.len() as f64;
    let mut counts = [0.0; 2];
    for &y in labels {
        counts[y] += 1.0;
    }
    let mut w = [0.0; 2];
    for k in 0..2 {
        w[k] = if counts[k] > 0.0 { n / (2.0 * counts[k]) } else { 0.0 };
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: ConditionLabel,
    /// Softmax probability of the predicted class.
    pub confidence: f64,
}

/// Argmax prediction from logits. Ties go to class 0 (negative).
pub fn predict_logits(logits: &ArrayView2<f64>) -> Vec<Prediction> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let class = if row[1] > row[0] { 1 } else { 0 };
            let margin = row[1 - class] - row[class];
            Prediction {
                label: ConditionLabel::from_index(class).expect("binary"),
                confidence: 1.0 / (1.0 + margin.exp()),
            }
        })
        .collect()
}

pub fn predict(probe: &ProbeModel, features: &ArrayView2<f64>) -> Result<Vec<Prediction>> {
    Ok(predict_logits(&forward(probe, features)?.view()))
}

pub const CHECKPOINT_FORMAT: &str = "affpipe-probe";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk probe checkpoint (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCheckpoint {
    pub format: String,
    pub format_version: u32,
    pub backbone_spec: BackboneSpec,
    pub backbone_fingerprint: String,
    pub feature_dim: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl ProbeCheckpoint {
    pub fn new(probe: &ProbeModel, backbone_fingerprint: &str, optimizer: &OptimizerConfig) -> Self {
        ProbeCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            backbone_spec: probe.backbone_spec.clone(),
            backbone_fingerprint: backbone_fingerprint.into(),
            feature_dim: probe.feature_dim(),
            weights: probe.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: probe.bias.to_vec(),
            optimizer: optimizer.clone(),
            seed: probe.seed,
        }
    }

    pub fn to_probe(&self) -> Result<ProbeModel> {
        let d = self.feature_dim;
        if self.weights.len() != NUM_CLASSES
            || self.weights.iter().any(|r| r.len() != d)
            || self.bias.len() != NUM_CLASSES
        {
            return Err(Error::Shape("checkpoint weights do not match feature_dim".into()));
        }
        let flat: Vec<f64> = self.weights.iter().flatten().copied().collect();
        Ok(ProbeModel {
            weights: Array2::from_shape_vec((NUM_CLASSES, d), flat).expect("checked"),
            bias: Array1::from(self.bias.clone()),
            backbone_spec: self.backbone_spec.clone(),
            seed: self.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ProbeCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.format_version),
            });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec() -> BackboneSpec {
        BackboneSpec::from_id("dino-vit-s8").unwrap()
    }

    fn probe_with(weights: Array2<f64>, bias: Array1<f64>) -> ProbeModel {
        ProbeModel { weights, bias, backbone_spec: spec(), seed: 0 }
    }

    #[test]
    fn init_is_seeded_bounded_and_unbiased() {
        let a = init_probe(384, spec(), 11).unwrap();
        let b = init_probe(384, spec(), 11).unwrap();
        assert_eq!(a, b);
        assert!(a.bias.iter().all(|&v| v == 0.0));
        let bound = 1.0 / 384f64.sqrt();
        assert!(a.weights.iter().all(|w| w.abs() < bound));
        assert_ne!(a, init_probe(384, spec(), 12).unwrap());
        assert!(init_probe(0, spec(), 1).is_err());
    }

    #[test]
    fn zero_features_give_bias() {
        let p = probe_with(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], array![0.5, -0.25]);
        let logits = forward(&p, &Array2::zeros((2, 3)).view()).unwrap();
        assert_eq!(logits, array![[0.5, -0.25], [0.5, -0.25]]);
    }

    #[test]
    fn basis_rows_select_coordinates() {
        let mut w = Array2::zeros((2, 5));
        w[[0, 0]] = 1.0;
        w[[1, 1]] = 1.0;
        let p = probe_with(w, Array1::zeros(2));
        let logits = forward(&p, &array![[3.0, 5.0, 0.0, 0.0, 0.0]].view()).unwrap();
        assert_eq!(logits, array![[3.0, 5.0]]);
    }

    #[test]
    fn forward_is_affine() {
        let p = init_probe(6, spec(), 3).unwrap();
        let p = ProbeModel { bias: array![0.3, -0.7], ..p };
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64 * 0.1 - 1.0);
        let l1 = forward(&p, &x.view()).unwrap() - &p.bias;
        let l2 = forward(&p, &(&x * 2.0).view()).unwrap() - &p.bias;
        assert!((&l2 - &(&l1 * 2.0)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_probe(4, spec(), 1).unwrap();
        assert_eq!(forward(&p, &Array2::zeros((1, 3)).view()).unwrap_err().code(), "SHAPE_ERROR");
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let l = loss(&array![[0.0, 0.0], [0.0, 0.0]].view(), &[0, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_logits_cost_nothing() {
        let l = loss(&array![[20.0, -20.0]].view(), &[0]).unwrap();
        assert!((0.0..1e-8).contains(&l));
    }

    #[test]
    fn loss_rejects_bad_labels() {
        assert!(loss(&array![[0.0, 0.0]].view(), &[2]).is_err());
        assert!(loss(&array![[0.0, 0.0]].view(), &[0, 1]).is_err());
    }

    #[test]
    fn predict_reference_values() {
        let preds = predict_logits(&array![[2.0, -1.0], [0.7, 0.7], [-3.0, 1.0]].view());
        assert_eq!(preds[0].label, ConditionLabel::Frustration);
        // e³ / (1 + e³)
        let expected = 3f64.exp() / (1.0 + 3f64.exp());
        assert!((preds[0].confidence - expected).abs() < 1e-15);
        assert!((preds[0].confidence - 0.9526).abs() < 1e-4);
        assert_eq!(preds[1].label, ConditionLabel::Frustration);
        assert_eq!(preds[1].confidence, 0.5);
        assert_eq!(preds[2].label, ConditionLabel::PositiveAnticipation);
    }

    #[test]
    fn predict_is_shift_invariant() {
        let base = array![[0.3, 1.1], [2.0, -0.5]];
        let shifted = &base + 17.25;
        let a = predict_logits(&base.view());
        let b = predict_logits(&shifted.view());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert!((x.confidence - y.confidence).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_frequency_balances_classes() {
        let w = inverse_frequency_weights(&[0, 0, 0, 1]);
        assert!((w[0] * 3.0 - w[1] * 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.json");
        let p = init_probe(10, spec(), 4).unwrap();
        let opt = OptimizerConfig::with_learning_rate(5e-6);
        ProbeCheckpoint::new(&p, "sha256:abc", &opt).save(&path).unwrap();
        let back = ProbeCheckpoint::load(&path).unwrap();
        assert_eq!(back.to_probe().unwrap(), p);
        assert_eq!(back.optimizer, opt);
        assert_eq!(back.backbone_fingerprint, "sha256:abc");
    }
}

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, forward, inverse_frequency_weights, loss_and_grad, predict_logits, weighted_loss,
    AdamState, OptimizerConfig, ProbeModel,
};
use crate::backbone::{extract_features, fingerprint, BackboneHandle};
use crate::error::{Error, Result};
use crate::preprocess::{augment, AugmentConfig, FaceCrop};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub records: Vec<EpochRecord>,
}

impl TrainingCurve {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Trailing moving average of `field` over `window` epochs.
    pub fn smoothed(&self, window: usize, field: impl Fn(&EpochRecord) -> f64) -> Vec<f64> {
        let values: Vec<f64> = self.records.iter().map(field).collect();
        (0..values.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
            ));
        }
        s
    }
}

/// Training inputs for each epoch, row-aligned with the training labels.
pub trait EpochFeatures {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn features(&mut self, epoch: usize) -> Result<Array2<f64>>;
}

/// The same features every epoch.
pub struct FixedFeatures(pub Array2<f64>);

impl EpochFeatures for FixedFeatures {
    fn len(&self) -> usize {
        self.0.nrows()
    }

    fn features(&mut self, _epoch: usize) -> Result<Array2<f64>> {
        Ok(self.0.clone())
    }
}

/// Features of augmented crops computed through a frozen backbone.
///
/// With `views == 0` every epoch sees freshly augmented crops. With
/// `views = K > 0`, K augmented copies of each crop are computed once and
/// epoch `e` uses copy `(e - 1) mod K`, which bounds backbone cost at K
/// passes over the training set.
pub struct AugmentedFeatures<'a> {
    handle: &'a BackboneHandle,
    crops: &'a [FaceCrop],
    config: AugmentConfig,
    seed: u64,
    views: usize,
    cache: Vec<Option<Array2<f64>>>,
}

impl<'a> AugmentedFeatures<'a> {
    pub fn new(handle: &'a BackboneHandle, crops: &'a [FaceCrop], config: AugmentConfig, seed: u64, views: usize) -> Self {
        AugmentedFeatures {
            handle,
            crops,
            config,
            seed,
            views,
            cache: vec![None; views],
        }
    }

    fn compute(&self, view: usize) -> Result<Array2<f64>> {
        let view_key = view.to_string();
        let augmented: Vec<FaceCrop> = self
            .crops
            .iter()
            .map(|c| {
                let mut r = rng::derived(self.seed, &["augment", &view_key, &c.source_frame_id]);
                augment(c, &self.config, &mut r)
            })
            .collect();
        Ok(extract_features(self.handle, &augmented)?.vectors.mapv(f64::from))
    }
}

impl EpochFeatures for AugmentedFeatures<'_> {
    fn len(&self) -> usize {
        self.crops.len()
    }

    fn features(&mut self, epoch: usize) -> Result<Array2<f64>> {
        if self.views == 0 {
            return self.compute(epoch);
        }
        let view = (epoch - 1) % self.views;
        if let Some(cached) = &self.cache[view] {
            return Ok(cached.clone());
        }
        let computed = self.compute(view)?;
        self.cache[view] = Some(computed.clone());
        Ok(computed)
    }
}

fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let correct = predict_logits(&logits.view())
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.label.index() == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub struct TrainOutcome {
    pub probe: ProbeModel,
    pub curve: TrainingCurve,
    /// Training inputs of the last epoch.
    pub final_train_features: Array2<f64>,
}

/// Train `probe` for exactly `cfg.epochs` epochs of shuffled minibatches.
/// Losses and accuracies are measured after each epoch over the whole
/// training and validation sets.
pub fn train_probe(
    mut probe: ProbeModel,
    train_features: &mut dyn EpochFeatures,
    train_labels: &[usize],
    val_features: &Array2<f64>,
    val_labels: &[usize],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_features.is_empty() || train_features.len() != train_labels.len() {
        return Err(Error::EmptySplit(format!(
            "train ({} inputs, {} labels)",
            train_features.len(),
            train_labels.len()
        )));
    }
    if val_features.nrows() == 0 || val_features.nrows() != val_labels.len() {
        return Err(Error::EmptySplit(format!(
            "validation ({} inputs, {} labels)",
            val_features.nrows(),
            val_labels.len()
        )));
    }
    let class_weights = cfg.class_weighting.then(|| inverse_frequency_weights(train_labels));
    let mut w_state = AdamState::new(probe.weights.len());
    let mut b_state = AdamState::new(probe.bias.len());
    let mut curve = TrainingCurve::default();
    let mut order: Vec<usize> = (0..train_labels.len()).collect();
    let mut last = Array2::zeros((0, 0));

    for epoch in 1..=cfg.epochs {
        let x = train_features.features(epoch)?;
        if x.nrows() != train_labels.len() {
            return Err(Error::Shape(format!("epoch {epoch}: {} training rows", x.nrows())));
        }
        order.shuffle(&mut rng::derived(seed, &["shuffle", &epoch.to_string()]));
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let (batch_loss, gw, gb) = loss_and_grad(&probe, &xb.view(), &yb, class_weights)?;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            adam_step(
                probe.weights.as_slice_mut().expect("standard layout"),
                gw.as_slice().expect("standard layout"),
                &mut w_state,
                cfg,
            )?;
            adam_step(
                probe.bias.as_slice_mut().expect("contiguous"),
                gb.as_slice().expect("contiguous"),
                &mut b_state,
                cfg,
            )?;
        }

        let train_logits = forward(&probe, &x.view())?;
        let val_logits = forward(&probe, &val_features.view())?;
        let record = EpochRecord {
            epoch,
            train_loss: weighted_loss(&train_logits.view(), train_labels, class_weights)?,
            train_accuracy: accuracy(&train_logits, train_labels),
            val_loss: weighted_loss(&val_logits.view(), val_labels, None)?,
            val_accuracy: accuracy(&val_logits, val_labels),
        };
        if !(record.train_loss.is_finite() && record.val_loss.is_finite() && probe.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        log::debug!(
            "epoch {epoch}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}",
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy
        );
        curve.records.push(record);
        last = x;
    }
    Ok(TrainOutcome {
        probe,
        curve,
        final_train_features: last,
    })
}

/// Train a probe on crops through a frozen backbone. Training crops are
/// augmented; validation crops are not. Fails if the backbone's parameter
/// fingerprint changes.
#[allow(clippy::too_many_arguments)]
pub fn train(
    probe: ProbeModel,
    handle: &BackboneHandle,
    train_crops: &[FaceCrop],
    train_labels: &[usize],
    val_crops: &[FaceCrop],
    val_labels: &[usize],
    cfg: &OptimizerConfig,
    aug: &AugmentConfig,
    augmentation_views: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if probe.feature_dim() != handle.feature_dim() {
        return Err(Error::Shape(format!(
            "probe width {} does not match backbone feature_dim {}",
            probe.feature_dim(),
            handle.feature_dim()
        )));
    }
    aug.validate()?;
    let before = fingerprint(handle);
    if val_crops.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    let val = extract_features(handle, val_crops)?.vectors.mapv(f64::from);
    let mut source = AugmentedFeatures::new(handle, train_crops, aug.clone(), seed, augmentation_views);
    let outcome = train_probe(probe, &mut source, train_labels, &val, val_labels, cfg, seed)?;
    let after = fingerprint(handle);
    if before != after {
        return Err(Error::FrozenViolation { before, after });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::probe::init_probe;

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 8), |(i, j)| {
            let shift = if j == 0 { if labels[i] == 1 { 3.0 } else { -3.0 } } else { 0.0 };
            shift + r.random::<f64>() - 0.5
        });
        (x, labels)
    }

    fn spec() -> BackboneSpec {
        BackboneSpec::from_id("sup-resnet50").unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (x, y) = blobs(50, 1);
        let (vx, vy) = blobs(20, 2);
        let p0 = init_probe(8, spec(), 5).unwrap();
        let mut cfg = OptimizerConfig::with_learning_rate(0.0);
        cfg.batch_size = 8;
        let out = train_probe(p0.clone(), &mut FixedFeatures(x), &y, &vx, &vy, &cfg, 9).unwrap();
        assert_eq!(out.probe, p0);
        assert_eq!(out.curve.len(), 30);
        let first = out.curve.records[0];
        for r in &out.curve.records {
            assert_eq!((r.train_loss, r.val_loss, r.train_accuracy, r.val_accuracy), (first.train_loss, first.val_loss, first.train_accuracy, first.val_accuracy));
        }
        assert_eq!(out.curve.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), (1..=30).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_curve() {
        let (x, y) = blobs(64, 3);
        let (vx, vy) = blobs(32, 4);
        let cfg = OptimizerConfig { epochs: 5, batch_size: 16, ..OptimizerConfig::with_learning_rate(1e-2) };
        let run = |seed| train_probe(init_probe(8, spec(), 1).unwrap(), &mut FixedFeatures(x.clone()), &y, &vx, &vy, &cfg, seed).unwrap();
        let (a, b, c) = (run(7), run(7), run(8));
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.probe, b.probe);
        assert_ne!(a.probe, c.probe);
    }

    #[test]
    fn learns_easy_blobs() {
        let (x, y) = blobs(200, 5);
        let (vx, vy) = blobs(100, 6);
        let cfg = OptimizerConfig { epochs: 10, batch_size: 32, ..OptimizerConfig::with_learning_rate(1e-2) };
        let out = train_probe(init_probe(8, spec(), 1).unwrap(), &mut FixedFeatures(x), &y, &vx, &vy, &cfg, 1).unwrap();
        assert_eq!(out.curve.last().unwrap().val_accuracy, 1.0);
    }

    #[test]
    fn diverging_inputs_are_reported() {
        let (mut x, y) = blobs(16, 5);
        x[[3, 2]] = f64::INFINITY;
        let (vx, vy) = blobs(8, 6);
        let cfg = OptimizerConfig { epochs: 2, ..OptimizerConfig::with_learning_rate(1e-2) };
        let err = train_probe(init_probe(8, spec(), 1).unwrap(), &mut FixedFeatures(x), &y, &vx, &vy, &cfg, 1).err().unwrap();
        assert!(matches!(err.code(), "DIVERGENCE" | "NONFINITE_GRADIENT"), "{err}");
    }

    #[test]
    fn empty_validation_is_rejected() {
        let (x, y) = blobs(16, 5);
        let cfg = OptimizerConfig::with_learning_rate(1e-2);
        let err = train_probe(init_probe(8, spec(), 1).unwrap(), &mut FixedFeatures(x), &y, &Array2::zeros((0, 8)), &[], &cfg, 1).err().unwrap();
        assert_eq!(err.code(), "EMPTY_SPLIT");
    }

    #[test]
    fn smoothing_window() {
        let curve = TrainingCurve {
            records: (1..=4)
                .map(|e| EpochRecord { epoch: e, train_loss: e as f64, train_accuracy: 0.0, val_loss: 0.0, val_accuracy: 0.0 })
                .collect(),
        };
        assert_eq!(curve.smoothed(3, |r| r.train_loss), vec![1.0, 1.5, 2.0, 3.0]);
    }
}

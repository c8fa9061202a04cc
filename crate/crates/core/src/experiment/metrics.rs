use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, BackboneHandle};
use crate::error::{Error, Result};
use crate::ingest::ConditionLabel;
use crate::preprocess::FaceCrop;
use crate::probe::{predict, ProbeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    /// `None` for a label with no frames.
    pub per_label_accuracy: BTreeMap<ConditionLabel, Option<f64>>,
    /// `confusion[true][predicted]`, class 0 = negative.
    pub confusion: [[usize; 2]; 2],
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predicted: &[usize]) -> Result<Metrics> {
        if labels.is_empty() {
            return Err(Error::EmptySplit("no frames to evaluate".into()));
        }
        if labels.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", labels.len(), predicted.len())));
        }
        let mut confusion = [[0usize; 2]; 2];
        for (&y, &p) in labels.iter().zip(predicted) {
            if y > 1 || p > 1 {
                return Err(Error::InvalidArgument(format!("class index out of range: ({y}, {p})")));
            }
            confusion[y][p] += 1;
        }
        let n_correct = confusion[0][0] + confusion[1][1];
        let n_total = labels.len();
        let per_label_accuracy = ConditionLabel::ALL
            .iter()
            .map(|&l| {
                let row = confusion[l.index()];
                let n = row[0] + row[1];
                (l, (n > 0).then(|| row[l.index()] as f64 / n as f64))
            })
            .collect();
        Ok(Metrics {
            accuracy: n_correct as f64 / n_total as f64,
            n_correct,
            n_total,
            per_label_accuracy,
            confusion,
        })
    }
}

/// Accuracy and confusion of `probe` over unaugmented crops.
pub fn evaluate(probe: &ProbeModel, handle: &BackboneHandle, crops: &[FaceCrop], labels: &[usize]) -> Result<Metrics> {
    if crops.is_empty() {
        return Err(Error::EmptySplit("no frames to evaluate".into()));
    }
    let features = extract_features(handle, crops)?.vectors.mapv(f64::from);
    evaluate_features(probe, &features, labels)
}

pub fn evaluate_features(probe: &ProbeModel, features: &ndarray::Array2<f64>, labels: &[usize]) -> Result<Metrics> {
    if features.nrows() == 0 {
        return Err(Error::EmptySplit("no frames to evaluate".into()));
    }
    let predicted: Vec<usize> = predict(probe, &features.view())?.iter().map(|p| p.label.index()).collect();
    Metrics::from_predictions(labels, &predicted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let m = Metrics::from_predictions(&y, &y).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.confusion[0][1] + m.confusion[1][0], 0);
    }

    #[test]
    fn constant_negative_predictions() {
        let m = Metrics::from_predictions(&[0, 0, 0, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.per_label_accuracy[&ConditionLabel::Frustration], Some(1.0));
        assert_eq!(m.per_label_accuracy[&ConditionLabel::PositiveAnticipation], Some(0.0));
        assert_eq!(m.confusion, [[3, 0], [1, 0]]);
    }

    #[test]
    fn absent_label_has_no_accuracy() {
        let m = Metrics::from_predictions(&[1, 1], &[1, 0]).unwrap();
        assert_eq!(m.per_label_accuracy[&ConditionLabel::Frustration], None);
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(Metrics::from_predictions(&[], &[]).unwrap_err().code(), "EMPTY_SPLIT");
    }
}

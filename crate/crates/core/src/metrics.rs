//! Confusion matrix and IoU / mIoU.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::IGNORE;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(
        "OutOfRangeClass: {which} value {value} at position {index} is outside [0, {num_classes})"
    )]
    OutOfRangeClass {
        which: &'static str,
        index: usize,
        value: i32,
        num_classes: usize,
    },
    #[error("LengthMismatch: {labels} labels vs {predictions} predictions")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("ClassCountMismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of ground-truth points of `class`.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(class, p)).sum()
    }

    /// Adds one stream; points labelled [`IGNORE`] are skipped. On error the
    /// matrix is left unchanged.
    pub fn accumulate(&mut self, labels: &[i32], predictions: &[i32]) -> Result<(), MetricsError> {
        if labels.len() != predictions.len() {
            return Err(MetricsError::LengthMismatch {
                labels: labels.len(),
                predictions: predictions.len(),
            });
        }
        let c = self.num_classes;
        let in_range = |v: i32| v >= 0 && (v as usize) < c;
        for (index, (&l, &p)) in labels.iter().zip(predictions).enumerate() {
            if l == IGNORE {
                continue;
            }
            if !in_range(l) {
                return Err(MetricsError::OutOfRangeClass {
                    which: "label",
                    index,
                    value: l,
                    num_classes: c,
                });
            }
            if !in_range(p) {
                return Err(MetricsError::OutOfRangeClass {
                    which: "prediction",
                    index,
                    value: p,
                    num_classes: c,
                });
            }
        }
        for (&l, &p) in labels.iter().zip(predictions) {
            if l != IGNORE {
                self.counts[l as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum with a matrix accumulated on another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.num_classes != self.num_classes {
            return Err(MetricsError::ClassCountMismatch(
                self.num_classes,
                other.num_classes,
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the union is empty.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_ = self.support(k) - tp;
                let fp = (0..self.num_classes).map(|t| self.get(t, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union; 0 if there are none.
    pub fn miou(&self) -> f64 {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }

    /// One line per class `class_id iou count` (iou `nan` when undefined),
    /// then `miou <value>`.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (k, iou) in self.iou_per_class().into_iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{k} {v:.6} {}", self.support(k)).unwrap(),
                None => writeln!(out, "{k} nan {}", self.support(k)).unwrap(),
            }
        }
        writeln!(out, "miou {:.6}", self.miou()).unwrap();
        out
    }
}

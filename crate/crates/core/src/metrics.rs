//! Confusion-matrix based mean intersection-over-union.

use crate::error::{CirkdError, Result};
use crate::matrix::LabelMap;

/// `C x C` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
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

    /// Builds a matrix from explicit rows, mainly for tests and tooling.
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(CirkdError::shape("ConfusionMatrix::from_counts", "matrix must be square"));
        }
        Ok(Self {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not ignored.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(CirkdError::shape(
                "ConfusionMatrix::accumulate",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == gt.ignore_index() {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= c {
                return Err(CirkdError::ClassOutOfRange { class_id: p, num_classes: c });
            }
            if g >= c {
                return Err(CirkdError::ClassOutOfRange { class_id: g, num_classes: c });
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; shards accumulated separately merge exactly.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(CirkdError::shape("ConfusionMatrix::merge", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class, `None` where the class appears in neither prediction nor ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a nonzero union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(CirkdError::UndefinedMetric);
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

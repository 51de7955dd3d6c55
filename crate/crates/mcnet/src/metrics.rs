//! Confusion-matrix evaluation: overall accuracy, per-class IoU, mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// C x C integer counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one (truth, prediction) pair per point.
    pub fn accumulate(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Contract(format!(
                "accumulate: {} truth labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= self.num_classes || p >= self.num_classes {
                return Err(Error::Contract(format!(
                    "accumulate: label pair ({t}, {p}) out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise merge; accumulation is associative and order-free.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Contract(format!(
                "merge: {} vs {} classes",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Trace over total.
    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Contract("overall_accuracy: empty confusion matrix".into()));
        }
        let trace: u64 = (0..self.num_classes).map(|i| self.count(i, i)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// `IoU_c = TP / (TP + FP + FN)`; classes with an empty union yield None.
    pub fn iou_per_class(&self) -> Result<Vec<Option<f64>>> {
        if self.total() == 0 {
            return Err(Error::Contract("iou_per_class: empty confusion matrix".into()));
        }
        let c = self.num_classes;
        let mut out = Vec::with_capacity(c);
        for cls in 0..c {
            let tp = self.count(cls, cls);
            let fp: u64 = (0..c).filter(|&t| t != cls).map(|t| self.count(t, cls)).sum();
            let fn_: u64 = (0..c).filter(|&p| p != cls).map(|p| self.count(cls, p)).sum();
            let union = tp + fp + fn_;
            out.push(if union == 0 { None } else { Some(tp as f64 / union as f64) });
        }
        Ok(out)
    }

    /// Mean over classes with a nonempty union.
    pub fn mean_iou(&self) -> Result<f64> {
        let ious = self.iou_per_class()?;
        let present: Vec<f64> = ious.into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Contract("mean_iou: every class has an empty union".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Full report with per-class names.
    pub fn report(&self, class_names: &[String]) -> Result<MetricsReport> {
        let ious = self.iou_per_class()?;
        let per_class = ious
            .iter()
            .enumerate()
            .map(|(i, iou)| ClassIou {
                name: class_names
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{i}")),
                iou: *iou,
            })
            .collect();
        Ok(MetricsReport {
            oa: self.overall_accuracy()?,
            miou: self.mean_iou()?,
            per_class,
        })
    }
}

/// Per-class IoU entry of a metrics report; `iou` is absent for classes
/// excluded from the mean (empty union).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
}

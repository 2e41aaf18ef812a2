//! Classification metrics: per-class F1 (`TP / (TP + (FP + FN) / 2)`),
//! macro averages and target-class recall.

use serde::Serialize;

use crate::data::Dataset;
use crate::nn::{predict, ParamVector};
use crate::{Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Self {
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p);
        }
        m
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth * self.classes + predicted]
    }

    pub fn support(&self, class: usize) -> usize {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn true_positives(&self, class: usize) -> usize {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: usize) -> usize {
        (0..self.classes)
            .filter(|&t| t != class)
            .map(|t| self.get(t, class))
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> usize {
        self.support(class) - self.true_positives(class)
    }

    /// `None` when the class never occurs and is never predicted.
    pub fn f1(&self, class: usize) -> Option<f64> {
        let tp = self.true_positives(class) as f64;
        let denom = tp + 0.5 * (self.false_positives(class) + self.false_negatives(class)) as f64;
        (denom > 0.0).then(|| tp / denom)
    }

    /// `None` when the class is absent from the ground truth.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let support = self.support(class);
        (support > 0).then(|| self.true_positives(class) as f64 / support as f64)
    }

    /// Mean F1 over the classes present in the ground truth.
    pub fn macro_f1(&self) -> f64 {
        let present: Vec<usize> = (0..self.classes).filter(|&c| self.support(c) > 0).collect();
        if present.is_empty() {
            return 0.0;
        }
        present
            .iter()
            .map(|&c| self.f1(c).unwrap_or(0.0))
            .sum::<f64>()
            / present.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<usize>() as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub per_class_recall: Vec<Option<f64>>,
    /// Mean recall over the target classes present in the test set.
    pub tcr: Option<f64>,
    /// Classes with no test sample; excluded from the macro average.
    pub absent_classes: Vec<usize>,
}

pub fn compute_metrics(
    params: &ParamVector,
    test: &Dataset,
    target_labels: &[usize],
) -> Result<ClassMetrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("metrics need a non-empty test set".into()));
    }
    let predicted = predict(params, &test.batch())?;
    Ok(metrics_from_confusion(
        &ConfusionMatrix::from_predictions(test.labels(), &predicted, test.class_count()),
        target_labels,
    ))
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix, target_labels: &[usize]) -> ClassMetrics {
    let k = cm.classes();
    let per_class_recall: Vec<Option<f64>> = (0..k).map(|c| cm.recall(c)).collect();
    let absent_classes = (0..k).filter(|&c| cm.support(c) == 0).collect();
    let target_recalls: Vec<f64> = target_labels
        .iter()
        .filter_map(|&c| per_class_recall.get(c).copied().flatten())
        .collect();
    let tcr = (!target_recalls.is_empty())
        .then(|| target_recalls.iter().sum::<f64>() / target_recalls.len() as f64);
    ClassMetrics {
        macro_f1: cm.macro_f1(),
        accuracy: cm.accuracy(),
        per_class_f1: (0..k).map(|c| cm.f1(c)).collect(),
        per_class_recall,
        tcr,
        absent_classes,
    }
}

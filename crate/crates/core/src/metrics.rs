//! Accuracy and per-class / macro F1 over the three polarity classes.

use serde::{Deserialize, Serialize};

use crate::encoder::CLASS_COUNT;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `confusion[gold][pred]`.
    pub confusion: [[u64; CLASS_COUNT]; CLASS_COUNT],
    pub accuracy: f64,
    pub precision: [f64; CLASS_COUNT],
    pub recall: [f64; CLASS_COUNT],
    pub f1: [f64; CLASS_COUNT],
    pub macro_f1: f64,
}

impl Metrics {
    /// Scores class indices. Undefined ratios (no predictions or no gold
    /// examples of a class) count as 0.
    pub fn from_labels(gold: &[usize], pred: &[usize]) -> Metrics {
        assert_eq!(gold.len(), pred.len(), "gold and predictions differ in length");
        let mut confusion = [[0u64; CLASS_COUNT]; CLASS_COUNT];
        for (&g, &p) in gold.iter().zip(pred) {
            confusion[g][p] += 1;
        }
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..CLASS_COUNT).map(|c| confusion[c][c]).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut precision = [0.0; CLASS_COUNT];
        let mut recall = [0.0; CLASS_COUNT];
        let mut f1 = [0.0; CLASS_COUNT];
        for c in 0..CLASS_COUNT {
            let tp = confusion[c][c];
            let predicted: u64 = (0..CLASS_COUNT).map(|g| confusion[g][c]).sum();
            let actual: u64 = confusion[c].iter().sum();
            precision[c] = ratio(tp, predicted);
            recall[c] = ratio(tp, actual);
            let s = precision[c] + recall[c];
            f1[c] = if s == 0.0 { 0.0 } else { 2.0 * precision[c] * recall[c] / s };
        }
        Metrics {
            confusion,
            accuracy: ratio(correct, total),
            precision,
            recall,
            f1,
            macro_f1: f1.iter().sum::<f64>() / CLASS_COUNT as f64,
        }
    }

    pub fn from_probs(gold: &[usize], probs: &[[f64; CLASS_COUNT]]) -> Metrics {
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        Metrics::from_labels(gold, &pred)
    }
}

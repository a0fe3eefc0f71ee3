//! Confusion-matrix metrics: macro/micro F1, label-flip attack success rate
//! and backdoor accuracy.

use serde::{Deserialize, Serialize};

/// `counts[i][j]`: samples with true label `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        assert!(rows.iter().all(|r| r.len() == classes), "confusion matrix must be square");
        ConfusionMatrix {
            classes,
            counts: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p);
        }
        cm
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, predicted)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
}

/// Unweighted mean of per-class F1. A class with no support and no
/// predictions scores 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    if cm.classes == 0 {
        return 0.0;
    }
    let sum: f64 = (0..cm.classes)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let denom = (cm.row_sum(c) + cm.col_sum(c)) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    sum / cm.classes as f64
}

/// Micro-averaged F1 (equal to accuracy for single-label classification).
pub fn micro_f1(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    (0..cm.classes).map(|c| cm.get(c, c)).sum::<u64>() as f64 / total as f64
}

pub fn f1(cm: &ConfusionMatrix, average: F1Average) -> f64 {
    match average {
        F1Average::Macro => macro_f1(cm),
        F1Average::Micro => micro_f1(cm),
    }
}

/// Share of `src` samples predicted as `target`; `None` without `src` support.
pub fn asr_label_flip(cm: &ConfusionMatrix, src: usize, target: usize) -> Option<f64> {
    let support = cm.row_sum(src);
    (support > 0).then(|| cm.get(src, target) as f64 / support as f64)
}

/// `(Σ_j c[j][t] - c[t][t]) / (|B| - c[t][t])` on the triggered set `B`
/// labelled with the true labels; `None` when the denominator vanishes.
pub fn backdoor_accuracy(cm_b: &ConfusionMatrix, target: usize, b_size: u64) -> Option<f64> {
    let ctt = cm_b.get(target, target);
    if b_size <= ctt {
        return None;
    }
    Some((cm_b.col_sum(target) - ctt) as f64 / (b_size - ctt) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_f1_examples() {
        let diag = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]);
        assert_eq!(macro_f1(&diag), 1.0);

        let skewed = ConfusionMatrix::from_rows(&[vec![50, 0], vec![50, 0]]);
        assert!((macro_f1(&skewed) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_permutation_invariant() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 2, 1], vec![0, 3, 4], vec![2, 0, 9]]);
        let perm = [2, 0, 1];
        let mut permuted = ConfusionMatrix::new(3);
        for i in 0..3 {
            for j in 0..3 {
                for _ in 0..cm.get(i, j) {
                    permuted.record(perm[i], perm[j]);
                }
            }
        }
        assert!((macro_f1(&cm) - macro_f1(&permuted)).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 0]]);
        assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(micro_f1(&cm), 1.0);
    }

    #[test]
    fn asr_examples() {
        let mut none = ConfusionMatrix::new(3);
        (0..10).for_each(|_| none.record(1, 1));
        assert_eq!(asr_label_flip(&none, 1, 2), Some(0.0));

        let mut all = ConfusionMatrix::new(3);
        (0..10).for_each(|_| all.record(1, 2));
        assert_eq!(asr_label_flip(&all, 1, 2), Some(1.0));

        let mut partial = ConfusionMatrix::new(3);
        (0..40).for_each(|_| partial.record(1, 2));
        (0..60).for_each(|_| partial.record(1, 1));
        assert_eq!(asr_label_flip(&partial, 1, 2), Some(0.4));

        assert_eq!(asr_label_flip(&ConfusionMatrix::new(3), 1, 2), None);
    }

    #[test]
    fn backdoor_examples() {
        let clean = ConfusionMatrix::from_rows(&[vec![10, 0], vec![0, 5]]);
        assert_eq!(backdoor_accuracy(&clean, 1, 15), Some(0.0));

        let owned = ConfusionMatrix::from_rows(&[vec![0, 10], vec![0, 5]]);
        assert_eq!(backdoor_accuracy(&owned, 1, 15), Some(1.0));

        // |B| = 110, c_tt = 10, column t sums to 90.
        let cm = ConfusionMatrix::from_rows(&[vec![20, 80], vec![0, 10]]);
        assert_eq!(backdoor_accuracy(&cm, 1, 110), Some(0.8));

        let only_target = ConfusionMatrix::from_rows(&[vec![0, 0], vec![0, 7]]);
        assert_eq!(backdoor_accuracy(&only_target, 1, 7), None);
    }
}

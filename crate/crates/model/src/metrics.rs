//! Per-class and averaged classification metrics from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub total: u64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(ModelError::invalid("confusion", "must be a non-empty square matrix"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(ModelError::invalid("confusion", "holds no samples"));
        }
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            per_class.push(ClassMetrics {
                class: c,
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            });
        }
        let avg = |w: &dyn Fn(&ClassMetrics) -> f64, norm: f64| Averages {
            precision: per_class.iter().map(|m| w(m) * m.precision).sum::<f64>() / norm,
            recall: per_class.iter().map(|m| w(m) * m.recall).sum::<f64>() / norm,
            f1: per_class.iter().map(|m| w(m) * m.f1).sum::<f64>() / norm,
        };
        let macro_avg = avg(&|_| 1.0, k as f64);
        let weighted_avg = avg(&|m| m.support as f64, total as f64);
        let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
        Ok(MetricsReport {
            per_class,
            macro_avg,
            weighted_avg,
            accuracy: ratio(correct, total),
            total,
            confusion,
        })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() || truth.is_empty() {
            return Err(ModelError::invalid("predictions", "need equal, non-empty lists"));
        }
        let mut cm = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n_classes || p >= n_classes {
                return Err(ModelError::invalid("predictions", "class id out of range"));
            }
            cm[t][p] += 1;
        }
        Self::from_confusion(cm)
    }

    /// Per-class rows, then the two averages and accuracy.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1,support\n");
        for m in &self.per_class {
            s += &format!("{},{:.6},{:.6},{:.6},{}\n", m.class, m.precision, m.recall, m.f1, m.support);
        }
        for (name, a) in [("macro", self.macro_avg), ("weighted", self.weighted_avg)] {
            s += &format!("{name},{:.6},{:.6},{:.6},{}\n", a.precision, a.recall, a.f1, self.total);
        }
        s += &format!("accuracy,,,{:.6},{}\n", self.accuracy, self.total);
        s
    }

    /// Confusion matrix with a header row of predicted classes.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true\\pred");
        for c in 0..k {
            s += &format!(",{c}");
        }
        s.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            s += &c.to_string();
            for v in row {
                s += &format!(",{v}");
            }
            s.push('\n');
        }
        s
    }
}

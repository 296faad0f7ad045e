//! Confusion matrices and classification metrics.
//!
//! Binary metrics read TP/FN/FP/TN from a 2x2 matrix relative to a chosen
//! positive class. Multi-class metrics are macro averages of the per-class
//! one-vs-rest values. A metric whose denominator is zero is `None`, never
//! 0 or 1, and is left out of macro means.

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[actual][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {c}")));
        }
        if let Some(row) = counts.iter().find(|r| r.len() != c) {
            return Err(Error::Argument(format!(
                "confusion matrix must be square ({c} rows, row of length {})",
                row.len()
            )));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(actual: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::Argument(format!(
                "{} actual labels but {} predictions",
                actual.len(),
                predicted.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (i, (&a, &p)) in actual.iter().zip(predicted).enumerate() {
            if a >= classes || p >= classes {
                return Err(Error::Argument(format!(
                    "sample {i}: label ({a}, {p}) out of range for {classes} classes"
                )));
            }
            counts[a][p] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// TP/FN/FP/TN with `class` as the positive class.
    pub fn one_vs_rest(&self, class: usize) -> BinaryCounts {
        let tp = self.counts[class][class];
        let fn_ = self.counts[class].iter().sum::<u64>() - tp;
        let fp = (0..self.classes()).map(|a| self.counts[a][class]).sum::<u64>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        BinaryCounts { tp, fn_, fp, tn }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BinaryCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn harmonic(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    (p + r > 0.0).then(|| 2.0 * (r * p) / (r + p))
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> Option<f64> {
        harmonic(self.precision(), self.recall())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Averaging {
    Binary { positive: usize },
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub counts: BinaryCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassMetrics {
    fn new(class: usize, counts: BinaryCounts) -> Self {
        Self {
            class,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            specificity: counts.specificity(),
            f1: counts.f1(),
        }
    }
}

/// Number of classes left out of each macro mean for an undefined value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Exclusions {
    pub precision: usize,
    pub recall: usize,
    pub specificity: usize,
    pub f1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub averaging: Averaging,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    /// Harmonic mean of this report's `precision` and `recall`.
    pub f1: Option<f64>,
    /// Unweighted mean of the per-class F1 scores (macro mode only).
    pub class_mean_f1: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub excluded: Exclusions,
}

/// Metrics of a 2x2 matrix with `positive` as the positive class.
pub fn binary_metrics(cm: &ConfusionMatrix, positive: usize) -> Result<MetricReport> {
    if cm.classes() != 2 {
        return Err(Error::Argument(format!(
            "binary metrics need a 2x2 matrix, got {0}x{0}",
            cm.classes()
        )));
    }
    if positive > 1 {
        return Err(Error::Argument(format!("positive class must be 0 or 1, got {positive}")));
    }
    if cm.total() == 0 {
        return Err(Error::Argument("confusion matrix is empty".into()));
    }
    let counts = cm.one_vs_rest(positive);
    let class = ClassMetrics::new(positive, counts);
    Ok(MetricReport {
        averaging: Averaging::Binary { positive },
        accuracy: counts.accuracy(),
        precision: class.precision,
        recall: class.recall,
        specificity: class.specificity,
        f1: class.f1,
        class_mean_f1: None,
        per_class: vec![class],
        excluded: Exclusions::default(),
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>, excluded: &mut usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => *excluded += 1,
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Macro-averaged one-vs-rest metrics.
pub fn multiclass_metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    if cm.total() == 0 {
        return Err(Error::Argument("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| ClassMetrics::new(c, cm.one_vs_rest(c)))
        .collect();
    let mut excluded = Exclusions::default();
    let precision = mean_defined(per_class.iter().map(|m| m.precision), &mut excluded.precision);
    let recall = mean_defined(per_class.iter().map(|m| m.recall), &mut excluded.recall);
    let specificity = mean_defined(
        per_class.iter().map(|m| m.specificity),
        &mut excluded.specificity,
    );
    let class_mean_f1 = mean_defined(per_class.iter().map(|m| m.f1), &mut excluded.f1);
    Ok(MetricReport {
        averaging: Averaging::Macro,
        accuracy: ratio(cm.correct(), cm.total()),
        precision,
        recall,
        specificity,
        f1: harmonic(precision, recall),
        class_mean_f1,
        per_class,
        excluded,
    })
}

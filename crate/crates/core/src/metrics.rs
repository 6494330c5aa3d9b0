//! Confusion-matrix accumulation and the accuracy metrics derived from it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Labels;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

/// How classes with an undefined metric enter a class mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanPolicy {
    /// Undefined classes count as 0.
    #[default]
    IncludeAsZero,
    /// Undefined classes are left out of the mean.
    Exclude,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Set when the class never occurs in truth or prediction; all metrics are then 0.
    pub undefined: bool,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(shape_err!(
                "{} counts cannot form a {}x{} matrix",
                counts.len(),
                num_classes,
                num_classes
            ));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per non-ignored pixel at (truth, prediction).
    pub fn update(&mut self, pred: &Labels, target: &Labels, ignore_index: Option<u8>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(shape_err!(
                "prediction {:?} and target {:?} differ in shape",
                pred.shape(),
                target.shape()
            ));
        }
        let c = self.num_classes;
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            if Some(t) == ignore_index {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::Data(format!(
                    "class index out of range for {c} classes: truth {t}, prediction {p}"
                )));
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if other.num_classes != self.num_classes {
            return Err(shape_err!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes,
                other.num_classes
            ));
        }
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Ok(Self {
            num_classes: self.num_classes,
            counts,
        })
    }

    /// trace / total.
    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("overall accuracy of an empty matrix".into()));
        }
        let trace: u64 = (0..self.num_classes).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// (TP, FP, FN) for one class.
    pub fn tp_fp_fn(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.get(class, class);
        let col: u64 = (0..self.num_classes).map(|t| self.get(t, class)).sum();
        let row: u64 = (0..self.num_classes).map(|p| self.get(class, p)).sum();
        (tp, col - tp, row - tp)
    }

    pub fn class_metrics(&self, class: usize) -> Result<ClassMetrics> {
        if class >= self.num_classes {
            return Err(Error::Param(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        let (tp, fp, fn_) = self.tp_fp_fn(class);
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Ok(ClassMetrics {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            undefined: tp + fp + fn_ == 0,
        })
    }

    pub fn precision_recall_f1(&self, class: usize) -> Result<(f64, f64, f64)> {
        let m = self.class_metrics(class)?;
        Ok((m.precision, m.recall, m.f1))
    }

    pub fn iou(&self, class: usize) -> Result<f64> {
        Ok(self.class_metrics(class)?.iou)
    }

    fn class_mean(&self, policy: MeanPolicy, pick: impl Fn(&ClassMetrics) -> f64) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.num_classes {
            let m = self.class_metrics(c)?;
            if m.undefined && policy == MeanPolicy::Exclude {
                continue;
            }
            sum += pick(&m);
            n += 1;
        }
        if n == 0 {
            return Err(Error::UndefinedMetric("class mean over no defined classes".into()));
        }
        Ok(sum / n as f64)
    }

    pub fn mean_iou(&self, policy: MeanPolicy) -> Result<f64> {
        self.class_mean(policy, |m| m.iou)
    }

    pub fn mean_f1(&self, policy: MeanPolicy) -> Result<f64> {
        self.class_mean(policy, |m| m.f1)
    }

    pub fn report(&self, class_names: &[String], policy: MeanPolicy) -> Result<MetricReport> {
        let per_class = (0..self.num_classes)
            .map(|c| {
                let m = self.class_metrics(c)?;
                Ok(ClassReport {
                    name: class_names
                        .get(c)
                        .cloned()
                        .unwrap_or_else(|| format!("class{c}")),
                    metrics: m,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricReport {
            overall_accuracy: self.overall_accuracy()?,
            mean_f1: self.mean_f1(policy)?,
            mean_iou: self.mean_iou(policy)?,
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub metrics: ClassMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall_accuracy: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub per_class: Vec<ClassReport>,
}

/// Fraction as a percentage with two decimals.
pub fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl MetricReport {
    /// Flat `key = value` block; values are percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.per_class {
            let flag = if c.metrics.undefined { " (undefined)" } else { "" };
            let _ = writeln!(s, "iou.{} = {}{}", c.name, percent(c.metrics.iou), flag);
            let _ = writeln!(s, "f1.{} = {}{}", c.name, percent(c.metrics.f1), flag);
        }
        let _ = writeln!(s, "oa = {}", percent(self.overall_accuracy));
        let _ = writeln!(s, "mean_f1 = {}", percent(self.mean_f1));
        let _ = writeln!(s, "miou = {}", percent(self.mean_iou));
        s
    }
}

//! Classification metrics for imbalanced and ordinal labels: accuracy,
//! macro/micro F1, the distance measure (DM) and optimized precision (OP).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("{truth} true labels but {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} is not in the class universe")]
    UnknownLabel { label: i64 },
    #[error("d_max must be positive")]
    ZeroDistance,
    #[error("sample {index}: distance {distance} exceeds d_max {d_max}")]
    DistanceTooLarge { index: usize, distance: u64, d_max: u64 },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// True/predicted label pairs over a fixed, sorted class universe.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPredictions {
    truth: Vec<i64>,
    predicted: Vec<i64>,
    classes: Vec<i64>,
}

impl LabeledPredictions {
    pub fn new(truth: Vec<i64>, predicted: Vec<i64>, classes: impl IntoIterator<Item = i64>) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch {
                truth: truth.len(),
                predicted: predicted.len(),
            });
        }
        if truth.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut classes: Vec<i64> = classes.into_iter().collect();
        classes.sort_unstable();
        classes.dedup();
        for &label in truth.iter().chain(&predicted) {
            if classes.binary_search(&label).is_err() {
                return Err(MetricsError::UnknownLabel { label });
            }
        }
        Ok(Self {
            truth,
            predicted,
            classes,
        })
    }

    /// Class universe = every label that appears on either side.
    pub fn with_observed_classes(truth: Vec<i64>, predicted: Vec<i64>) -> Result<Self> {
        let classes: Vec<i64> = truth.iter().chain(&predicted).copied().collect();
        Self::new(truth, predicted, classes)
    }

    /// Ratings 1..=10.
    pub fn ratings(truth: Vec<i64>, predicted: Vec<i64>) -> Result<Self> {
        Self::new(truth, predicted, 1..=10)
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn truth(&self) -> &[i64] {
        &self.truth
    }

    pub fn predicted(&self) -> &[i64] {
        &self.predicted
    }

    pub fn classes(&self) -> &[i64] {
        &self.classes
    }

    fn class_index(&self, label: i64) -> usize {
        self.classes.binary_search(&label).expect("validated label")
    }
}

/// Counts with rows = true class and columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<i64>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Number of samples whose true class is `i`.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn predicted_count(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }

    /// `None` for classes without ground-truth support.
    pub fn recall(&self, i: usize) -> Option<f64> {
        match self.support(i) {
            0 => None,
            s => Some(self.counts[i][i] as f64 / s as f64),
        }
    }
}

pub fn build_confusion(preds: &LabeledPredictions) -> ConfusionMatrix {
    let k = preds.classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in preds.truth.iter().zip(&preds.predicted) {
        counts[preds.class_index(t)][preds.class_index(p)] += 1;
    }
    ConfusionMatrix {
        classes: preds.classes.clone(),
        counts,
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Suite {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Recall per class of the universe; `None` without support.
    pub recall: Vec<Option<f64>>,
}

pub fn f1_from_confusion(cm: &ConfusionMatrix) -> F1Suite {
    let k = cm.classes.len();
    let total = cm.total() as f64;
    let (mut tp_sum, mut fp_sum, mut fn_sum) = (0u64, 0u64, 0u64);
    let mut f1_sum = 0.0;
    for i in 0..k {
        let tp = cm.counts[i][i];
        let fp = cm.predicted_count(i) - tp;
        let fn_ = cm.support(i) - tp;
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fn_;
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        f1_sum += ratio(2.0 * precision * recall, precision + recall);
    }
    let micro_p = ratio(tp_sum as f64, (tp_sum + fp_sum) as f64);
    let micro_r = ratio(tp_sum as f64, (tp_sum + fn_sum) as f64);
    F1Suite {
        accuracy: cm.trace() as f64 / total,
        macro_f1: f1_sum / k as f64,
        micro_f1: ratio(2.0 * micro_p * micro_r, micro_p + micro_r),
        recall: (0..k).map(|i| cm.recall(i)).collect(),
    }
}

pub fn f1_suite(preds: &LabeledPredictions) -> F1Suite {
    f1_from_confusion(&build_confusion(preds))
}

/// `DM = (1/n) Σ (1 - |p_i - r_i| / d_max)`.
pub fn distance_measure(preds: &LabeledPredictions, d_max: u64) -> Result<f64> {
    if d_max == 0 {
        return Err(MetricsError::ZeroDistance);
    }
    let mut total = 0.0;
    for (index, (&t, &p)) in preds.truth.iter().zip(&preds.predicted).enumerate() {
        let distance = t.abs_diff(p);
        if distance > d_max {
            return Err(MetricsError::DistanceTooLarge { index, distance, d_max });
        }
        total += 1.0 - distance as f64 / d_max as f64;
    }
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizedPrecision {
    pub value: f64,
    /// Set when every supported class has zero recall, making the penalty's
    /// normalizer zero; the penalty is then taken as 0.
    pub degenerate: bool,
}

/// OP over the recall set of supported classes:
/// `ACC - Σ_{i,j} |R_i - R_j| / (2 (N-1) Σ_k R_k)` with the sum over ordered pairs.
pub fn op_from_confusion(cm: &ConfusionMatrix) -> OptimizedPrecision {
    let accuracy = cm.trace() as f64 / cm.total() as f64;
    let recalls: Vec<f64> = (0..cm.classes.len()).filter_map(|i| cm.recall(i)).collect();
    let n = recalls.len();
    if n <= 1 {
        return OptimizedPrecision {
            value: accuracy,
            degenerate: false,
        };
    }
    let norm: f64 = recalls.iter().sum();
    if norm == 0.0 {
        return OptimizedPrecision {
            value: accuracy,
            degenerate: true,
        };
    }
    let mut spread = 0.0;
    for a in &recalls {
        for b in &recalls {
            spread += (a - b).abs();
        }
    }
    OptimizedPrecision {
        value: accuracy - spread / (2.0 * (n - 1) as f64 * norm),
        degenerate: false,
    }
}

pub fn optimized_precision(preds: &LabeledPredictions) -> OptimizedPrecision {
    op_from_confusion(&build_confusion(preds))
}

/// Full evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub dm: Option<f64>,
    pub op: f64,
    pub op_degenerate: bool,
    pub recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Computes every metric; DM only when `d_max` is given.
pub fn evaluate(preds: &LabeledPredictions, d_max: Option<u64>) -> Result<EvalReport> {
    let confusion = build_confusion(preds);
    let f1 = f1_from_confusion(&confusion);
    let op = op_from_confusion(&confusion);
    let dm = d_max.map(|d| distance_measure(preds, d)).transpose()?;
    Ok(EvalReport {
        n: preds.len(),
        accuracy: f1.accuracy,
        macro_f1: f1.macro_f1,
        micro_f1: f1.micro_f1,
        dm,
        op: op.value,
        op_degenerate: op.degenerate,
        recall: f1.recall,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Acc,
    MacroF1,
    MicroF1,
    Dm,
    Op,
}

impl Metric {
    pub const DECISION: [Metric; 3] = [Metric::Acc, Metric::MacroF1, Metric::MicroF1];
    pub const RATING: [Metric; 3] = [Metric::Acc, Metric::Dm, Metric::Op];

    pub fn header(self) -> &'static str {
        match self {
            Metric::Acc => "ACC",
            Metric::MacroF1 => "Ma-F1",
            Metric::MicroF1 => "Mi-F1",
            Metric::Dm => "DM",
            Metric::Op => "OP",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "acc" | "accuracy" => Some(Metric::Acc),
            "ma-f1" | "macro-f1" | "macro_f1" => Some(Metric::MacroF1),
            "mi-f1" | "micro-f1" | "micro_f1" => Some(Metric::MicroF1),
            "dm" => Some(Metric::Dm),
            "op" => Some(Metric::Op),
            _ => None,
        }
    }

    pub fn value(self, report: &EvalReport) -> Option<f64> {
        match self {
            Metric::Acc => Some(report.accuracy),
            Metric::MacroF1 => Some(report.macro_f1),
            Metric::MicroF1 => Some(report.micro_f1),
            Metric::Dm => report.dm,
            Metric::Op => Some(report.op),
        }
    }
}

/// Plain-text table with one header row and one value row.
pub fn render_table(report: &EvalReport, columns: &[Metric]) -> String {
    let mut out = String::new();
    for c in columns {
        let _ = write!(out, "{:>8}", c.header());
    }
    out.push('\n');
    for c in columns {
        match c.value(report) {
            Some(v) => {
                let _ = write!(out, "{v:>8.3}");
            }
            None => out.push_str("       -"),
        }
    }
    out.push('\n');
    out
}

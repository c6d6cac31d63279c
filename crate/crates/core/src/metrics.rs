//! Confusion matrices and the accuracy/kappa/per-class report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    Empty,
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("{names} class names for {classes} classes")]
    NameCount { names: usize, classes: usize },
    #[error("matrix size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
}

/// `C x C` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != classes * classes {
            return Err(MetricsError::SizeMismatch(counts.len(), classes * classes));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), MetricsError> {
        for index in [truth, predicted] {
            if index >= self.classes {
                return Err(MetricsError::ClassOutOfRange { index, classes: self.classes });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    /// Adds another matrix's counts (exact and order-independent).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes != self.classes {
            return Err(MetricsError::SizeMismatch(other.classes, self.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.classes..][..self.classes].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, k)).sum()
    }

    /// Header row of predicted-class names, then one row per true class.
    pub fn to_csv(&self, names: &[String]) -> Result<String, MetricsError> {
        if names.len() != self.classes {
            return Err(MetricsError::NameCount { names: names.len(), classes: self.classes });
        }
        let quote = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::from("true\\predicted");
        for n in names {
            out.push(',');
            out.push_str(&quote(n));
        }
        out.push('\n');
        for (r, n) in names.iter().enumerate() {
            out.push_str(&quote(n));
            for c in 0..self.classes {
                let _ = write!(out, ",{}", self.get(r, c));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total: u64,
    pub test_loss: Option<f64>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_to_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let c = cm.classes;
    let n = total as f64;
    let trace: u64 = (0..c).map(|k| cm.get(k, k)).sum();
    let p_o = trace as f64 / n;
    let p_e: f64 = (0..c).map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64).sum::<f64>() / (n * n);
    let kappa = if p_e == 1.0 {
        // Every sample in one class and always predicted as it.
        if p_o == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };

    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let precision = ratio(tp, cm.col_sum(k));
            let recall = ratio(tp, cm.row_sum(k));
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { precision, recall, f1, support: cm.row_sum(k) }
        })
        .collect();

    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let average_accuracy = present.iter().map(|m| m.recall).sum::<f64>() / present.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / n;
    Ok(MetricsReport {
        overall_accuracy: p_o,
        average_accuracy,
        kappa,
        macro_avg: Averages { precision: mean(|m| m.precision), recall: mean(|m| m.recall), f1: mean(|m| m.f1) },
        weighted_avg: Averages {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
        },
        per_class,
        total,
        test_loss: None,
        confusion: cm.clone(),
    })
}

/// The three report artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub table: String,
    pub json: String,
    pub confusion_csv: String,
}

pub fn render_report(report: &MetricsReport, class_names: &[String]) -> Result<RenderedReport, MetricsError> {
    if class_names.len() != report.per_class.len() {
        return Err(MetricsError::NameCount { names: class_names.len(), classes: report.per_class.len() });
    }
    let width = class_names.iter().map(String::len).chain([20]).max().unwrap_or(20) + 2;
    let mut t = String::new();
    let _ =
        writeln!(t, "{:<width$}{:>10}{:>10}{:>10}{:>10}", "Class Labels", "Precision", "Recall", "f1-score", "Support");
    for (name, m) in class_names.iter().zip(&report.per_class) {
        let _ = writeln!(t, "{:<width$}{:>10.2}{:>10.2}{:>10.2}{:>10}", name, m.precision, m.recall, m.f1, m.support);
    }
    let _ =
        writeln!(t, "{:<width$}{:>10}{:>10}{:>10.2}{:>10}", "accuracy", "", "", report.overall_accuracy, report.total);
    for (label, a) in [("macro avg", &report.macro_avg), ("weighted avg", &report.weighted_avg)] {
        let _ =
            writeln!(t, "{:<width$}{:>10.2}{:>10.2}{:>10.2}{:>10}", label, a.precision, a.recall, a.f1, report.total);
    }
    let loss = report.test_loss.map_or_else(|| "n/a".to_string(), |l| format!("{l:.4}"));
    let _ = writeln!(t, "{:<width$}{:>40}", "Test loss", loss);
    let pct = |v: f64| format!("{:.2}%", 100.0 * v);
    let _ = writeln!(t, "{:<width$}{:>40}", "Average accuracy (%)", pct(report.average_accuracy));
    let _ = writeln!(t, "{:<width$}{:>40}", "Kappa accuracy (%)", pct(report.kappa));
    let _ = writeln!(t, "{:<width$}{:>40}", "Overall accuracy (%)", pct(report.overall_accuracy));

    Ok(RenderedReport {
        table: t,
        json: serde_json::to_string_pretty(report).expect("report serializes"),
        confusion_csv: report.confusion.to_csv(class_names)?,
    })
}

/// Class names of the Indian Pines ground truth, in label order.
pub const INDIAN_PINES_CLASSES: [&str; 16] = [
    "Alfalfa",
    "Corn-notill",
    "Corn-mintill",
    "Corn",
    "Grass-pasture",
    "Grass-trees",
    "Grass-pasture-mowed",
    "Hay-windrowed",
    "Oats",
    "Soyabean-notill",
    "Soyabean-mintill",
    "Soyabean-clean",
    "Wheat",
    "Woods",
    "Buildings-Grass-Trees-Drives",
    "Stone-Steel-Towers",
];

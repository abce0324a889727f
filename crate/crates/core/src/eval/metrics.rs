use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{topk_indices, Tensor};

/// `counts[true][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub classes: Vec<String>,
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::dim(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::arg(format!("label pair ({t}, {p}) outside 0..{k}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        classes: (0..k).map(|i| i.to_string()).collect(),
    })
}

impl ConfusionMatrix {
    pub fn with_classes(mut self, classes: &[String]) -> Result<ConfusionMatrix> {
        if classes.len() != self.counts.len() {
            return Err(Error::dim(format!(
                "{} class names for a {}-class matrix",
                classes.len(),
                self.counts.len()
            )));
        }
        self.classes = classes.to_vec();
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Each row divided by its total; rows with no samples stay `None`.
    pub fn row_normalized(&self) -> Vec<Option<Vec<f64>>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row.iter().map(|&c| c as f64 / total as f64).collect())
            })
            .collect()
    }
}

/// One-vs-rest metrics of a class; `None` marks a 0/0 value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Mean and population standard deviation over the defined entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MacroStat {
    /// Two-decimal `mean ± std`.
    pub fn display(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: Option<MacroStat>,
    pub macro_recall: Option<MacroStat>,
    pub macro_f1: Option<MacroStat>,
    #[serde(default)]
    pub top1: Option<f64>,
    #[serde(default)]
    pub top3: Option<f64>,
}

pub fn macro_stats(values: &[Option<f64>]) -> Result<MacroStat> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::arg("no defined values to summarize"));
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MacroStat {
        mean,
        std: var.sqrt(),
        count: defined.len(),
    })
}

/// Precision `TP/(TP+FP)`, recall `TP/(TP+FN)`, F1 their harmonic mean
/// (computed as `2TP/(2TP+FP+FN)`, defined whenever both are) and accuracy
/// `trace / total`.
pub fn metrics_from_cm(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let k = cm.k();
    let total = cm.total();
    if k == 0 || total == 0 {
        return Err(Error::arg("confusion matrix is empty"));
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let row: u64 = cm.counts[c].iter().sum();
            let col: u64 = cm.counts.iter().map(|r| r[c]).sum();
            let (fn_, fp) = (row - tp, col - tp);
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = match (precision, recall) {
                (Some(_), Some(_)) => ratio(2 * tp, 2 * tp + fp + fn_),
                _ => None,
            };
            ClassMetrics {
                name: cm.classes[c].clone(),
                support: row,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let stat = |f: fn(&ClassMetrics) -> Option<f64>| {
        macro_stats(&per_class.iter().map(f).collect::<Vec<_>>()).ok()
    };
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: stat(|m| m.precision),
        macro_recall: stat(|m| m.recall),
        macro_f1: stat(|m| m.f1),
        per_class,
        top1: None,
        top3: None,
    })
}

/// Fraction of rows whose label is among the row's `k` largest entries, for
/// each requested `k`.
pub fn topk_accuracy(
    probs: &Tensor,
    labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let (n, classes) = probs.dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::arg("no rows to score"));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if max_k > classes || ks.contains(&0) {
        return Err(Error::arg(format!(
            "k values {ks:?} must lie in 1..={classes}"
        )));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::arg(format!("label {label} outside 0..{classes}")));
        }
        let ranked = topk_indices(probs.row(r), max_k)?;
        let rank = ranked.iter().position(|&c| c == label);
        for (&k, h) in hits.iter_mut() {
            if rank.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(k, h)| (k, h as f64 / n as f64))
        .collect())
}

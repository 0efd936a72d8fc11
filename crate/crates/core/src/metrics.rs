//! Segmentation metrics from a K x K confusion matrix: per-class IoU,
//! precision/recall/F1, overall accuracy, chance agreement, Cohen's kappa,
//! and the macro means. Counts are exact integers; metrics are f64.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    /// counts[truth * k + pred]
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally prediction against truth, skipping ignored pixels.
    pub fn accumulate(&mut self, pred: &Array<u8>, truth: &Array<u8>) -> Result<()> {
        if pred.shape != truth.shape {
            return Err(Error::Shape {
                op: "accumulate",
                expected: truth.shape.clone(),
                got: pred.shape.clone(),
            });
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE_LABEL {
                continue;
            }
            if p as usize >= self.k || t as usize >= self.k {
                return Err(Error::Data(format!(
                    "accumulate: class id out of range (pred {p}, truth {t}, k {})",
                    self.k
                )));
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Partial matrices over disjoint pixel sets sum associatively.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Dimension {
                op: "merge",
                axis: "classes",
                expected: self.k,
                got: other.k,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|j| self.counts[i * self.k + j]).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.counts[i * self.k + j]).sum()
    }

    /// Matrix as CSV; `row_normalized` divides each row by its sum.
    pub fn to_csv(&self, row_normalized: bool) -> String {
        let mut out = String::new();
        for i in 0..self.k {
            let rs = self.row_sum(i);
            let row: Vec<String> = (0..self.k)
                .map(|j| {
                    let v = self.counts[i * self.k + j];
                    if row_normalized {
                        if rs == 0 {
                            "0".to_string()
                        } else {
                            format!("{}", v as f64 / rs as f64)
                        }
                    } else {
                        format!("{v}")
                    }
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Per-class and aggregate metrics. Degenerate denominators produce zeros
/// and set the class's `degenerate` flag rather than NaNs.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub k: usize,
    pub iou: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub miou: f64,
    pub mf1: f64,
    pub oa: f64,
    pub pre: f64,
    pub kappa: f64,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "class,iou,precision,recall,f1,degenerate"
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::csv_header());
        for c in 0..self.k {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c, self.iou[c], self.precision[c], self.recall[c], self.f1[c], self.degenerate[c]
            ));
        }
        out.push_str(&format!(
            "aggregate,miou={},mf1={},oa={},pre={},kappa={}\n",
            self.miou, self.mf1, self.oa, self.pre, self.kappa
        ));
        out
    }
}

/// Evaluate the full metric suite from the count matrix. Per-class scores
/// use the one-vs-rest reduction; OA/PRE/kappa use the standard multi-class
/// forms (trace ratio and marginal product sum).
pub fn metrics_from(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("metrics_from: empty confusion matrix".into()));
    }
    let k = cm.k;
    let mut iou = vec![0.0; k];
    let mut precision = vec![0.0; k];
    let mut recall = vec![0.0; k];
    let mut f1 = vec![0.0; k];
    let mut degenerate = vec![false; k];
    for c in 0..k {
        let tp = cm.counts[c * k + c] as f64;
        let fn_ = cm.row_sum(c) as f64 - tp;
        let fp = cm.col_sum(c) as f64 - tp;
        let iou_den = tp + fn_ + fp;
        if iou_den > 0.0 {
            iou[c] = tp / iou_den;
        } else {
            degenerate[c] = true;
        }
        if tp + fp > 0.0 {
            precision[c] = tp / (tp + fp);
        } else {
            degenerate[c] = true;
        }
        if tp + fn_ > 0.0 {
            recall[c] = tp / (tp + fn_);
        } else {
            degenerate[c] = true;
        }
        if recall[c] + precision[c] > 0.0 {
            f1[c] = 2.0 * recall[c] * precision[c] / (recall[c] + precision[c]);
        }
    }
    let trace: u64 = (0..k).map(|c| cm.counts[c * k + c]).sum();
    let oa = trace as f64 / total as f64;
    let pre = (0..k)
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (total as f64 * total as f64);
    let kappa = if (1.0 - pre).abs() < 1e-15 {
        // Both marginals concentrated in one class: agreement is either
        // perfect (diagonal) or pure chance.
        if (oa - 1.0).abs() < 1e-15 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pre) / (1.0 - pre)
    };
    let miou = iou.iter().sum::<f64>() / k as f64;
    let mf1 = f1.iter().sum::<f64>() / k as f64;
    Ok(MetricsReport {
        k,
        iou,
        precision,
        recall,
        f1,
        degenerate,
        miou,
        mf1,
        oa,
        pre,
        kappa,
    })
}

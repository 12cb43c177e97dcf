//! Confusion-matrix construction and the reported metrics: overall and
//! average accuracy, per-class accuracy, Cohen's kappa, mean and
//! frequency-weighted intersection-over-union, plus multi-run aggregation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label vectors differ in length: {true_len} vs {pred_len}")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("inconsistent per-class lengths across runs: {0:?}")]
    InconsistentRuns(Vec<usize>),
}

/// K x K counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// counts[i][j] = number of pixels of true class i predicted as class j.
pub fn build_confusion(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch {
            true_len: y_true.len(),
            pred_len: y_pred.len(),
        });
    }
    let mut counts = Array2::<u64>::zeros((num_classes, num_classes));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes {
            return Err(EvalError::LabelOutOfRange {
                label: t,
                num_classes,
            });
        }
        if p >= num_classes {
            return Err(EvalError::LabelOutOfRange {
                label: p,
                num_classes,
            });
        }
        counts[[t, p]] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// All scalar metrics derived from one confusion matrix. `per_class[i]` is
/// `None` when class i never occurs in the reference labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub per_class: Vec<Option<f64>>,
    pub kappa: f64,
    pub fwiou: f64,
    pub miou: f64,
}

pub fn compute_metrics(conf: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let k = conf.num_classes();
    let total = conf.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let total = total as f64;
    let row_sums: Vec<f64> = (0..k)
        .map(|i| conf.counts.row(i).iter().sum::<u64>() as f64)
        .collect();
    let col_sums: Vec<f64> = (0..k)
        .map(|j| conf.counts.column(j).iter().sum::<u64>() as f64)
        .collect();
    let diag: Vec<f64> = (0..k).map(|i| conf.counts[[i, i]] as f64).collect();

    let oa = diag.iter().sum::<f64>() / total;

    let mut per_class = Vec::with_capacity(k);
    let mut aa_sum = 0.0;
    let mut aa_count = 0usize;
    for i in 0..k {
        if row_sums[i] > 0.0 {
            let acc = diag[i] / row_sums[i];
            per_class.push(Some(acc));
            aa_sum += acc;
            aa_count += 1;
        } else {
            per_class.push(None);
        }
    }
    let aa = aa_sum / aa_count as f64;

    let p_e = (0..k).map(|i| row_sums[i] * col_sums[i]).sum::<f64>() / (total * total);
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        // all mass concentrated on one class in both margins implies oa = 1
        1.0
    } else {
        (oa - p_e) / (1.0 - p_e)
    };

    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    let mut fwiou = 0.0;
    for i in 0..k {
        let union = row_sums[i] + col_sums[i] - diag[i];
        if union > 0.0 {
            let iou = diag[i] / union;
            iou_sum += iou;
            iou_count += 1;
            fwiou += row_sums[i] / total * iou;
        }
    }
    let miou = iou_sum / iou_count as f64;

    Ok(Metrics {
        oa,
        aa,
        per_class,
        kappa,
        fwiou,
        miou,
    })
}

/// Mean and sample standard deviation (n-1 denominator; zero for one run).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    // identical samples have exactly zero spread; skip the accumulation fuzz
    if values.windows(2).all(|w| w[0] == w[1]) {
        return MeanStd {
            mean: values[0],
            std: 0.0,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        (ss / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Aggregated metrics over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub runs: usize,
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
    pub fwiou: MeanStd,
    pub miou: MeanStd,
    pub per_class: Vec<Option<MeanStd>>,
}

pub fn aggregate_runs(runs: &[Metrics]) -> Result<MetricsSummary, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyMatrix);
    }
    let k = runs[0].per_class.len();
    if runs.iter().any(|r| r.per_class.len() != k) {
        return Err(EvalError::InconsistentRuns(
            runs.iter().map(|r| r.per_class.len()).collect(),
        ));
    }
    let collect = |f: &dyn Fn(&Metrics) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
    let per_class = (0..k)
        .map(|i| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.per_class[i]).collect();
            if vals.is_empty() {
                None
            } else {
                Some(mean_std(&vals))
            }
        })
        .collect();
    Ok(MetricsSummary {
        runs: runs.len(),
        oa: mean_std(&collect(&|r| r.oa)),
        aa: mean_std(&collect(&|r| r.aa)),
        kappa: mean_std(&collect(&|r| r.kappa)),
        fwiou: mean_std(&collect(&|r| r.fwiou)),
        miou: mean_std(&collect(&|r| r.miou)),
        per_class,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Aligned text table: one row per class, then the five summary rows.
pub fn format_report(metrics: &Metrics, class_names: &[String]) -> String {
    let mut out = String::new();
    let width = class_names
        .iter()
        .map(|n| n.len())
        .chain(["FWIoU".len()].into_iter())
        .max()
        .unwrap_or(8)
        .max(8);
    out.push_str(&format!("{:<width$}  accuracy\n", "class"));
    for (i, name) in class_names.iter().enumerate() {
        let acc = match metrics.per_class.get(i).copied().flatten() {
            Some(a) => pct(a),
            None => "-".to_string(),
        };
        out.push_str(&format!("{name:<width$}  {acc}\n"));
    }
    out.push_str(&format!("{:<width$}  {}\n", "AA", pct(metrics.aa)));
    out.push_str(&format!("{:<width$}  {}\n", "OA", pct(metrics.oa)));
    out.push_str(&format!("{:<width$}  {}\n", "kappa", pct(metrics.kappa)));
    out.push_str(&format!("{:<width$}  {}\n", "FWIoU", pct(metrics.fwiou)));
    out.push_str(&format!("{:<width$}  {}\n", "MIoU", pct(metrics.miou)));
    out
}

fn pct_pm(v: &MeanStd) -> String {
    format!("{:.2}\u{b1}{:.2}", 100.0 * v.mean, 100.0 * v.std)
}

/// Aggregated table in the `99.33±0.16` style.
pub fn format_aggregate_report(summary: &MetricsSummary, class_names: &[String]) -> String {
    let mut out = String::new();
    let width = class_names
        .iter()
        .map(|n| n.len())
        .chain(["FWIoU".len()].into_iter())
        .max()
        .unwrap_or(8)
        .max(8);
    out.push_str(&format!(
        "{:<width$}  accuracy (mean\u{b1}std over {} runs)\n",
        "class", summary.runs
    ));
    for (i, name) in class_names.iter().enumerate() {
        let acc = match summary.per_class.get(i).and_then(|m| m.as_ref()) {
            Some(m) => pct_pm(m),
            None => "-".to_string(),
        };
        out.push_str(&format!("{name:<width$}  {acc}\n"));
    }
    out.push_str(&format!("{:<width$}  {}\n", "AA", pct_pm(&summary.aa)));
    out.push_str(&format!("{:<width$}  {}\n", "OA", pct_pm(&summary.oa)));
    out.push_str(&format!("{:<width$}  {}\n", "kappa", pct_pm(&summary.kappa)));
    out.push_str(&format!("{:<width$}  {}\n", "FWIoU", pct_pm(&summary.fwiou)));
    out.push_str(&format!("{:<width$}  {}\n", "MIoU", pct_pm(&summary.miou)));
    out
}

/// Brute-force re-implementation used as the dual-route oracle in tests and
/// the acceptance suite: explicit loops, no shared code with
/// `compute_metrics`.
pub fn metrics_by_loops(conf: &ConfusionMatrix) -> Metrics {
    let k = conf.num_classes();
    let mut total = 0f64;
    for i in 0..k {
        for j in 0..k {
            total += conf.counts[[i, j]] as f64;
        }
    }
    let mut correct = 0f64;
    for i in 0..k {
        correct += conf.counts[[i, i]] as f64;
    }
    let oa = correct / total;

    let mut per_class: Vec<Option<f64>> = Vec::new();
    let mut aa_sum = 0.0;
    let mut aa_n = 0;
    for i in 0..k {
        let mut row = 0f64;
        for j in 0..k {
            row += conf.counts[[i, j]] as f64;
        }
        if row > 0.0 {
            per_class.push(Some(conf.counts[[i, i]] as f64 / row));
            aa_sum += conf.counts[[i, i]] as f64 / row;
            aa_n += 1;
        } else {
            per_class.push(None);
        }
    }

    let mut p_e = 0f64;
    for i in 0..k {
        let mut row = 0f64;
        let mut col = 0f64;
        for j in 0..k {
            row += conf.counts[[i, j]] as f64;
            col += conf.counts[[j, i]] as f64;
        }
        p_e += row * col;
    }
    p_e /= total * total;
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        1.0
    } else {
        (oa - p_e) / (1.0 - p_e)
    };

    let mut iou_sum = 0f64;
    let mut iou_n = 0;
    let mut fwiou = 0f64;
    for i in 0..k {
        let mut row = 0f64;
        let mut col = 0f64;
        for j in 0..k {
            row += conf.counts[[i, j]] as f64;
            col += conf.counts[[j, i]] as f64;
        }
        let union = row + col - conf.counts[[i, i]] as f64;
        if union > 0.0 {
            let iou = conf.counts[[i, i]] as f64 / union;
            iou_sum += iou;
            iou_n += 1;
            fwiou += row / total * iou;
        }
    }

    Metrics {
        oa,
        aa: aa_sum / aa_n as f64,
        per_class,
        kappa,
        fwiou,
        miou: iou_sum / iou_n as f64,
    }
}

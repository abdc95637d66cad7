//! Prediction and metrics: balanced accuracy, macro F1, macro AUPRC via
//! exact average precision, and cross-seed aggregation.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::LabelMode;
use crate::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-class membership scores from a fused distance matrix: sigmoid(-D).
pub fn scores_from_distances(fused: ArrayView2<f64>) -> Array2<f64> {
    fused.mapv(|d| sigmoid(-d))
}

/// Multiclass: one-hot argmax, ties to the lowest class index.
/// Multilabel: independent threshold at 0.5.
pub fn predict(scores: ArrayView2<f64>, mode: LabelMode) -> Array2<f64> {
    let (nq, nc) = scores.dim();
    let mut out = Array2::zeros((nq, nc));
    for q in 0..nq {
        match mode {
            LabelMode::Multiclass => {
                let mut best = 0usize;
                for k in 1..nc {
                    if scores[[q, k]] > scores[[q, best]] {
                        best = k;
                    }
                }
                out[[q, best]] = 1.0;
            }
            LabelMode::Multilabel => {
                for k in 0..nc {
                    if scores[[q, k]] >= 0.5 {
                        out[[q, k]] = 1.0;
                    }
                }
            }
        }
    }
    out
}

struct Confusion {
    tp: usize,
    r#fn: usize,
    fp: usize,
}

fn per_class_confusion(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<Vec<Confusion>> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", truth.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    if truth.nrows() == 0 {
        return Err(Error::NoQueries);
    }
    let (nq, nc) = truth.dim();
    let mut out = Vec::with_capacity(nc);
    for k in 0..nc {
        let mut c = Confusion { tp: 0, r#fn: 0, fp: 0 };
        for q in 0..nq {
            let p = pred[[q, k]] > 0.5;
            let t = truth[[q, k]] > 0.5;
            match (p, t) {
                (true, true) => c.tp += 1,
                (false, true) => c.r#fn += 1,
                (true, false) => c.fp += 1,
                (false, false) => {}
            }
        }
        out.push(c);
    }
    Ok(out)
}

/// Mean per-class recall over the classes that actually occur in the truth.
pub fn balanced_accuracy(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    let conf = per_class_confusion(pred, truth)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in &conf {
        let support = c.tp + c.r#fn;
        if support > 0 {
            sum += c.tp as f64 / support as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoQueries);
    }
    Ok(sum / n as f64)
}

/// Macro F1. Classes that are never true and never predicted are excluded
/// from the average; a class that appears on only one side scores 0.
pub fn macro_f1(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    let conf = per_class_confusion(pred, truth)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in &conf {
        if c.tp + c.fp + c.r#fn == 0 {
            continue;
        }
        sum += 2.0 * c.tp as f64 / (2.0 * c.tp as f64 + c.fp as f64 + c.r#fn as f64);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoQueries);
    }
    Ok(sum / n as f64)
}

/// Exact average precision by threshold sweep over the distinct scores,
/// descending, with tied scores entering together:
/// AP = sum_n (R_n - R_{n-1}) * P_n. Returns None when there are no
/// positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), truth.len());
    let pos = truth.iter().filter(|&&t| t).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if truth[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Some(ap)
}

/// Macro average precision over the classes with at least one positive;
/// the second return value lists the classes excluded for having none.
pub fn macro_auprc(scores: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<(f64, Vec<usize>)> {
    if scores.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", truth.dim()),
            got: format!("{:?}", scores.dim()),
        });
    }
    if truth.nrows() == 0 {
        return Err(Error::NoQueries);
    }
    let nc = truth.ncols();
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = Vec::new();
    for k in 0..nc {
        let s: Vec<f64> = scores.column(k).to_vec();
        let t: Vec<bool> = truth.column(k).iter().map(|&v| v > 0.5).collect();
        match average_precision(&s, &t) {
            Some(ap) => {
                sum += ap;
                n += 1;
            }
            None => excluded.push(k),
        }
    }
    if n == 0 {
        return Err(Error::NoQueries);
    }
    Ok((sum / n as f64, excluded))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub support: usize,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub format_version: u32,
    pub n_queries: usize,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub macro_auprc: f64,
    /// Classes with no positive truth instances, excluded from macro_auprc.
    pub excluded_classes: Vec<usize>,
    pub per_class: Vec<ClassReport>,
    /// Which parameter set produced the scores: "raw" or "ema".
    pub params_used: String,
}

/// Builds the full report from raw scores. `scores` are per-class membership
/// probabilities; predictions are derived with [`predict`].
pub fn evaluate(scores: ArrayView2<f64>, truth: ArrayView2<f64>, mode: LabelMode) -> Result<EvalReport> {
    let pred = predict(scores, mode);
    let conf = per_class_confusion(pred.view(), truth)?;
    let ba = balanced_accuracy(pred.view(), truth)?;
    let f1 = macro_f1(pred.view(), truth)?;
    let (auprc, excluded) = macro_auprc(scores, truth)?;

    let mut per_class = Vec::with_capacity(conf.len());
    for (k, c) in conf.iter().enumerate() {
        let support = c.tp + c.r#fn;
        let recall = (support > 0).then(|| c.tp as f64 / support as f64);
        let f1 = (c.tp + c.fp + c.r#fn > 0)
            .then(|| 2.0 * c.tp as f64 / (2.0 * c.tp as f64 + c.fp as f64 + c.r#fn as f64));
        let s: Vec<f64> = scores.column(k).to_vec();
        let t: Vec<bool> = truth.column(k).iter().map(|&v| v > 0.5).collect();
        per_class.push(ClassReport {
            class: k,
            support,
            recall,
            f1,
            average_precision: average_precision(&s, &t),
        });
    }

    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        n_queries: truth.nrows(),
        balanced_accuracy: ba,
        macro_f1: f1,
        macro_auprc: auprc,
        excluded_classes: excluded,
        per_class,
        params_used: "raw".into(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub n_seeds: usize,
    /// (metric name, mean, population std).
    pub rows: Vec<(String, f64, f64)>,
}

impl SeedAggregate {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("metric,mean,std,n_seeds\n");
        for (name, mean, std) in &self.rows {
            out.push_str(&format!("{name},{mean},{std},{}\n", self.n_seeds));
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population std of the headline metrics across seed runs.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedAggregate> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("no reports to aggregate".into()));
    }
    let pull = |f: fn(&EvalReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    let metrics: [(&str, Vec<f64>); 3] = [
        ("balanced_accuracy", pull(|r| r.balanced_accuracy)),
        ("macro_f1", pull(|r| r.macro_f1)),
        ("macro_auprc", pull(|r| r.macro_auprc)),
    ];
    let rows = metrics
        .into_iter()
        .map(|(name, vals)| {
            let (m, s) = mean_std(&vals);
            (name.to_string(), m, s)
        })
        .collect();
    Ok(SeedAggregate { n_seeds: reports.len(), rows })
}

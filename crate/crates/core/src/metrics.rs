//! Confusion-matrix metrics. Sensitivity and specificity are micro-averaged
//! one-vs-rest rates; AUC is one-vs-rest via the Mann-Whitney statistic.

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::ScoreMatrix;

/// `counts[t * classes + p]` is the number of samples of true class `t`
/// predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0; classes * classes];
    for (row, (&p, &t)) in preds.iter().zip(labels).enumerate() {
        for id in [p, t] {
            if id >= classes {
                return Err(Error::LabelOutOfRange { row, label: id, classes });
            }
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    /// Samples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// One-vs-rest `(tp, fp, fn, tn)` for class `c`.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(c, c);
        let fp = self.predicted(c) - tp;
        let fn_ = self.support(c) - tp;
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }

    fn nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::InvalidArgument("confusion matrix is empty".into())),
            n => Ok(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicRates {
    pub accuracy: f64,
    pub micro_sensitivity: f64,
    pub micro_specificity: f64,
}

/// Accuracy plus pooled one-vs-rest sensitivity and specificity.
pub fn basic_rates(cm: &ConfusionMatrix) -> Result<BasicRates> {
    let n = cm.nonempty()?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for c in 0..cm.classes {
        let r = cm.one_vs_rest(c);
        tp += r.0;
        fp += r.1;
        fn_ += r.2;
        tn += r.3;
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(BasicRates {
        accuracy: cm.trace() as f64 / n as f64,
        micro_sensitivity: ratio(tp, tp + fn_),
        micro_specificity: ratio(tn, tn + fp),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub weighted: f64,
    pub macro_avg: f64,
    pub per_class: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Per-class F1 with 0 whenever a denominator vanishes.
pub fn f1_scores(cm: &ConfusionMatrix) -> Result<F1Scores> {
    let n = cm.nonempty()?;
    let mut out = F1Scores {
        weighted: 0.0,
        macro_avg: 0.0,
        per_class: Vec::with_capacity(cm.classes),
        precision: Vec::with_capacity(cm.classes),
        recall: Vec::with_capacity(cm.classes),
    };
    for c in 0..cm.classes {
        let tp = cm.get(c, c) as f64;
        let (pred, sup) = (cm.predicted(c), cm.support(c));
        let p = if pred == 0 { 0.0 } else { tp / pred as f64 };
        let r = if sup == 0 { 0.0 } else { tp / sup as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        out.precision.push(p);
        out.recall.push(r);
        out.per_class.push(f);
        out.weighted += f * sup as f64;
    }
    out.weighted /= n as f64;
    out.macro_avg = out.per_class.iter().sum::<f64>() / cm.classes as f64;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucScores {
    pub macro_auc: f64,
    /// `None` for classes without both positives and negatives.
    pub per_class: Vec<Option<f64>>,
}

/// One-vs-rest AUC from average ranks. Equal scores count as half a win.
pub fn roc_auc_ovr(scores: &ScoreMatrix, labels: &[usize]) -> Result<AucScores> {
    let (n, classes) = (scores.rows(), scores.cols());
    if labels.len() != n {
        return Err(Error::LengthMismatch(format!("{n} score rows but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("AUC needs at least two samples".into()));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange { row, label, classes });
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut order: Vec<usize> = (0..n).collect();
    let mut twice_rank = vec![0u64; n];
    for c in 0..classes {
        let pos = labels.iter().filter(|&&l| l == c).count() as u64;
        let neg = n as u64 - pos;
        if pos == 0 || neg == 0 {
            per_class.push(None);
            continue;
        }
        let s = |i: usize| scores.row(i)[c];
        order.sort_by(|&a, &b| s(a).partial_cmp(&s(b)).unwrap_or(Ordering::Equal));
        // Ranks are 1-based; a tie group spanning positions i..j shares rank (i + 1 + j) / 2.
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && s(order[j]) == s(order[i]) {
                j += 1;
            }
            for &k in &order[i..j] {
                twice_rank[k] = (i + 1 + j) as u64;
            }
            i = j;
        }
        let pos_ranks: u64 = (0..n).filter(|&i| labels[i] == c).map(|i| twice_rank[i]).sum();
        let twice_u = pos_ranks - pos * (pos + 1);
        per_class.push(Some(twice_u as f64 / (2 * pos * neg) as f64));
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(
            "no class has both positive and negative samples".into(),
        ));
    }
    Ok(AucScores {
        macro_auc: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDetail {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub auc: Option<f64>,
}

/// One evaluation row. `f1_weighted` is the F1 column of comparison tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub micro_sensitivity: f64,
    pub micro_specificity: f64,
    pub f1_weighted: f64,
    pub f1_macro: f64,
    pub roc_auc_macro_ovr: f64,
    pub per_class: Vec<ClassDetail>,
}

pub fn build_report(cm: &ConfusionMatrix, scores: &ScoreMatrix, labels: &[usize]) -> Result<MetricsReport> {
    if cm.total() != labels.len() as u64 || scores.rows() != labels.len() || scores.cols() != cm.classes() {
        return Err(Error::LengthMismatch(format!(
            "confusion matrix covers {} samples of {} classes, scores are {} x {}, {} labels",
            cm.total(),
            cm.classes(),
            scores.rows(),
            scores.cols(),
            labels.len()
        )));
    }
    let rates = basic_rates(cm)?;
    let f1 = f1_scores(cm)?;
    let auc = roc_auc_ovr(scores, labels)?;
    let per_class = (0..cm.classes())
        .map(|c| ClassDetail {
            precision: f1.precision[c],
            recall: f1.recall[c],
            f1: f1.per_class[c],
            support: cm.support(c),
            auc: auc.per_class[c],
        })
        .collect();
    Ok(MetricsReport {
        accuracy: rates.accuracy,
        micro_sensitivity: rates.micro_sensitivity,
        micro_specificity: rates.micro_specificity,
        f1_weighted: f1.weighted,
        f1_macro: f1.macro_avg,
        roc_auc_macro_ovr: auc.macro_auc,
        per_class,
    })
}

/// Predictions are the per-row argmax of `scores`.
pub fn evaluate(scores: &ScoreMatrix, labels: &[usize]) -> Result<MetricsReport> {
    let cm = confusion_matrix(&scores.argmax(), labels, scores.cols())?;
    build_report(&cm, scores, labels)
}

const SUMMARY: [&str; 6] = ["accuracy", "sensitivity", "specificity", "f1", "roc_auc", "f1_macro"];
const DETAIL: [&str; 5] = ["precision", "recall", "f1", "support", "auc"];

fn header(classes: usize) -> Vec<String> {
    let mut h = vec!["name".to_string()];
    h.extend(SUMMARY.iter().map(|s| s.to_string()));
    for c in 0..classes {
        h.extend(DETAIL.iter().map(|d| format!("{d}_{c}")));
    }
    h
}

/// Writes one CSV row per named report. All reports must share a class count.
pub fn write_reports_csv<W: Write>(out: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let classes = rows.first().map_or(0, |(_, r)| r.per_class.len());
    if rows.iter().any(|(_, r)| r.per_class.len() != classes) {
        return Err(Error::LengthMismatch("reports disagree on class count".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(classes))?;
    for (name, r) in rows {
        let mut rec = vec![
            name.clone(),
            r.accuracy.to_string(),
            r.micro_sensitivity.to_string(),
            r.micro_specificity.to_string(),
            r.f1_weighted.to_string(),
            r.roc_auc_macro_ovr.to_string(),
            r.f1_macro.to_string(),
        ];
        for d in &r.per_class {
            rec.extend([
                d.precision.to_string(),
                d.recall.to_string(),
                d.f1.to_string(),
                d.support.to_string(),
                d.auc.map_or(String::new(), |a| a.to_string()),
            ]);
        }
        w.write_record(rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_reports_csv<R: Read>(input: R) -> Result<Vec<(String, MetricsReport)>> {
    let mut r = csv::Reader::from_reader(input);
    let head = r.headers()?.clone();
    let width = head.len();
    if width < 1 + SUMMARY.len() || !(width - 1 - SUMMARY.len()).is_multiple_of(DETAIL.len()) {
        return Err(Error::Config(format!("unexpected report header with {width} columns")));
    }
    let classes = (width - 1 - SUMMARY.len()) / DETAIL.len();
    if head.iter().collect::<Vec<_>>() != header(classes) {
        return Err(Error::Config("unexpected report header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad number {s:?} in report"))) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| num(&rec[i]);
        let mut per_class = Vec::with_capacity(classes);
        for c in 0..classes {
            let b = 1 + SUMMARY.len() + c * DETAIL.len();
            per_class.push(ClassDetail {
                precision: f(b)?,
                recall: f(b + 1)?,
                f1: f(b + 2)?,
                support: rec[b + 3]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad support {:?}", &rec[b + 3])))?,
                auc: if rec[b + 4].is_empty() { None } else { Some(f(b + 4)?) },
            });
        }
        rows.push((
            rec[0].to_string(),
            MetricsReport {
                accuracy: f(1)?,
                micro_sensitivity: f(2)?,
                micro_specificity: f(3)?,
                f1_weighted: f(4)?,
                roc_auc_macro_ovr: f(5)?,
                f1_macro: f(6)?,
                per_class,
            },
        ));
    }
    Ok(rows)
}

/// Markdown table in percent with two decimals.
pub fn reports_markdown(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("| Model | Accuracy | Sensitivity | Specificity | F1 Score | ROC AUC |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for (name, r) in rows {
        s.push_str(&format!(
            "| {name} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            100.0 * r.accuracy,
            100.0 * r.micro_sensitivity,
            100.0 * r.micro_specificity,
            100.0 * r.f1_weighted,
            100.0 * r.roc_auc_macro_ovr
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_vs_rest_partitions_total() {
        let cm = confusion_matrix(&[0, 1, 2, 2, 1, 0], &[0, 1, 1, 2, 0, 0], 3).unwrap();
        for c in 0..3 {
            let (tp, fp, fn_, tn) = cm.one_vs_rest(c);
            assert_eq!(tp + fp + fn_ + tn, 6);
        }
        assert_eq!(cm.trace(), 4);
    }

    #[test]
    fn out_of_range_ids_error() {
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
        assert!(confusion_matrix(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn empty_matrix_errors() {
        let cm = confusion_matrix(&[], &[], 3).unwrap();
        assert!(basic_rates(&cm).is_err());
        assert!(f1_scores(&cm).is_err());
    }
}
